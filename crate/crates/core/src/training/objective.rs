//! Loss evaluation and backpropagation for one training step.

use ndarray::{Array1, Array2};

use crate::contrastive::{contra_loss, intra_loss_grad, inter_loss_grad, ContrastiveParts};
use crate::data_io::DomainBundle;
use crate::detection::{dahsc_loss_grad, total_loss, LossWeights};
use crate::encoder::{Domain, DomainPrompts, EncoderParams, EncoderPass};
use crate::error::{Error, Result};
use crate::graph::{readout_mean, AttributedGraph, Neighborhoods};
use crate::model::ModelState;
use crate::scalar::Scalar;

use super::{Pipeline, TrainConfig};

/// Random draws for one joint-training step: dropped-edge neighborhoods and
/// feature-shuffling permutations. Source entries are `None` when the source
/// graph is not used; permutations are `None` when no contrastive term is.
#[derive(Debug, Clone)]
pub struct Augmentation {
    pub source: Option<Neighborhoods>,
    pub target: Neighborhoods,
    pub source_perm: Option<Vec<usize>>,
    pub target_perm: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub l_target: T,
    pub l_source: T,
    pub parts: ContrastiveParts<T>,
    pub l_contra: T,
    pub total: T,
}

fn finite<T: Scalar>(v: T, term: &'static str, phase: &'static str, epoch: usize) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, phase, epoch })
    }
}

fn grads_for<T: Scalar>(grads: &mut ModelState<T>, domain: Domain) -> (&mut EncoderParams<T>, &mut DomainPrompts<T>) {
    let prompts = match domain {
        Domain::Source => &mut grads.source_prompts,
        Domain::Target => &mut grads.target_prompts,
    };
    (&mut grads.encoder, prompts)
}

struct DomainPasses<T> {
    clean: EncoderPass<T>,
    corrupt: Option<EncoderPass<T>>,
    // None means the detection branch is the clean pass (no prompts)
    detect: Option<EncoderPass<T>>,
    readout: Array1<T>,
    corrupt_readout: Option<Array1<T>>,
}

fn run_domain<T: Scalar>(
    state: &ModelState<T>,
    graph: &AttributedGraph<T>,
    neighbors: &Neighborhoods,
    domain: Domain,
    perm: Option<&[usize]>,
    prompts: bool,
) -> Result<DomainPasses<T>> {
    let feats = graph.features().view();
    let clean = EncoderPass::forward(feats, neighbors, domain, &state.encoder, None, None)?;
    let corrupt = match perm {
        Some(p) => Some(EncoderPass::forward(feats, neighbors, domain, &state.encoder, None, Some(p))?),
        None => None,
    };
    let detect = if prompts {
        Some(EncoderPass::forward(
            feats,
            neighbors,
            domain,
            &state.encoder,
            Some(state.prompts(domain)),
            None,
        )?)
    } else {
        None
    };
    let readout = readout_mean(clean.output().view())?;
    let corrupt_readout = corrupt.as_ref().map(|c| readout_mean(c.output().view())).transpose()?;
    Ok(DomainPasses {
        clean,
        corrupt,
        detect,
        readout,
        corrupt_readout,
    })
}

impl<T: Scalar> DomainPasses<T> {
    fn detection_output(&self) -> &Array2<T> {
        self.detect.as_ref().unwrap_or(&self.clean).output()
    }
}

/// Per-domain gradient buffers with respect to encoder outputs and readouts.
struct DomainAdjoints<T> {
    d_clean: Array2<T>,
    d_corrupt: Array2<T>,
    d_detect: Array2<T>,
    d_readout: Array1<T>,
    d_corrupt_readout: Array1<T>,
}

impl<T: Scalar> DomainAdjoints<T> {
    fn new(n: usize, k: usize) -> Self {
        DomainAdjoints {
            d_clean: Array2::zeros((n, k)),
            d_corrupt: Array2::zeros((n, k)),
            d_detect: Array2::zeros((n, k)),
            d_readout: Array1::zeros(k),
            d_corrupt_readout: Array1::zeros(k),
        }
    }

    fn backward(
        mut self,
        passes: &DomainPasses<T>,
        neighbors: &Neighborhoods,
        state: &ModelState<T>,
        domain: Domain,
        grads: &mut ModelState<T>,
    ) {
        let n = T::lit(self.d_clean.nrows() as f64);
        // readout = mean of rows: every row receives d_readout / n
        self.d_clean += &(&self.d_readout / n);
        self.d_corrupt += &(&self.d_corrupt_readout / n);
        let (enc, prm) = grads_for(grads, domain);
        match &passes.detect {
            Some(det) => det.backward(neighbors, &state.encoder, Some(state.prompts(domain)), self.d_detect.view(), enc, Some(prm)),
            None => self.d_clean += &self.d_detect,
        }
        passes.clean.backward(neighbors, &state.encoder, None, self.d_clean.view(), enc, None);
        if let Some(c) = &passes.corrupt {
            c.backward(neighbors, &state.encoder, None, self.d_corrupt.view(), enc, None);
        }
    }
}

/// Loss of one joint-training step and, when `grads` is given, its gradient
/// with respect to every parameter (accumulated into `grads`).
#[allow(clippy::too_many_arguments)]
pub fn joint_objective<T: Scalar>(
    state: &ModelState<T>,
    bundle: &DomainBundle<T>,
    target_supervision: &[(usize, u8)],
    aug: &Augmentation,
    pipeline: &Pipeline,
    config: &TrainConfig,
    epoch: usize,
    grads: Option<&mut ModelState<T>>,
) -> Result<LossBreakdown<T>> {
    const PHASE: &str = "joint";
    let eps = T::lit(config.clamp_eps);
    let alpha = T::lit(config.alpha_balance);
    let k = state.shape.out_width;
    let use_inter = pipeline.inter && pipeline.source;
    let contrastive = pipeline.intra || use_inter;

    let tgt = run_domain(
        state,
        &bundle.target,
        &aug.target,
        Domain::Target,
        aug.target_perm.as_deref().filter(|_| contrastive),
        pipeline.prompts,
    )?;
    let mut tgt_adj = DomainAdjoints::new(bundle.target.num_nodes(), k);

    let src_nb = if pipeline.source {
        Some(
            aug.source
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("augmentation lacks source neighborhoods".into()))?,
        )
    } else {
        None
    };
    let src = match src_nb {
        Some(nb) => Some(run_domain(
            state,
            &bundle.source,
            nb,
            Domain::Source,
            aug.source_perm.as_deref().filter(|_| contrastive),
            pipeline.prompts,
        )?),
        None => None,
    };
    let mut src_adj = src.as_ref().map(|_| DomainAdjoints::new(bundle.source.num_nodes(), k));

    let mut parts = ContrastiveParts::default();
    let mut d_disc = state.discriminators.clone();
    for w in [&mut d_disc.intra_source, &mut d_disc.intra_target, &mut d_disc.inter] {
        w.weight.fill(T::zero());
    }

    if pipeline.intra {
        let (v, g) = intra_terms(&tgt, state, Domain::Target, eps)?;
        parts.target_intra = finite(v, "target_intra", PHASE, epoch)?;
        tgt_adj.d_clean.scaled_add(alpha, &g.d_h);
        tgt_adj.d_corrupt.scaled_add(alpha, &g.d_h_corrupt);
        tgt_adj.d_readout.scaled_add(alpha, &g.d_readout);
        d_disc.intra_target.weight.scaled_add(alpha, &g.d_weight);
        if let (Some(s), Some(adj)) = (&src, src_adj.as_mut()) {
            let (v, g) = intra_terms(s, state, Domain::Source, eps)?;
            parts.source_intra = finite(v, "source_intra", PHASE, epoch)?;
            adj.d_clean.scaled_add(alpha, &g.d_h);
            adj.d_corrupt.scaled_add(alpha, &g.d_h_corrupt);
            adj.d_readout.scaled_add(alpha, &g.d_readout);
            d_disc.intra_source.weight.scaled_add(alpha, &g.d_weight);
        }
    }

    if use_inter {
        let s = src.as_ref().expect("inter requires source");
        let adj = src_adj.as_mut().expect("inter requires source");
        let disc = &state.discriminators.inter;
        let rt = tgt.readout.view();
        let rs = s.readout.view();
        let rct = tgt.corrupt_readout.as_ref().expect("corrupt pass").view();
        let rcs = s.corrupt_readout.as_ref().expect("corrupt pass").view();

        // target side: anchor r_t, positive r_s, negative corrupted r_s
        let (v, g) = inter_loss_grad(rt, rs, rcs, disc, eps)?;
        parts.target_inter = finite(v, "target_inter", PHASE, epoch)?;
        tgt_adj.d_readout.scaled_add(alpha, &g.d_anchor);
        adj.d_readout.scaled_add(alpha, &g.d_positive);
        adj.d_corrupt_readout.scaled_add(alpha, &g.d_negative);
        d_disc.inter.weight.scaled_add(alpha, &g.d_weight);

        // source side mirrors it
        let (v, g) = inter_loss_grad(rs, rt, rct, disc, eps)?;
        parts.source_inter = finite(v, "source_inter", PHASE, epoch)?;
        adj.d_readout.scaled_add(alpha, &g.d_anchor);
        tgt_adj.d_readout.scaled_add(alpha, &g.d_positive);
        tgt_adj.d_corrupt_readout.scaled_add(alpha, &g.d_negative);
        d_disc.inter.weight.scaled_add(alpha, &g.d_weight);
    }

    let c_t = state.centers.effective(Domain::Target, pipeline.centers);
    let (l_t, dz_t, dc_t) = dahsc_loss_grad(
        tgt.detection_output().view(),
        target_supervision,
        c_t.view(),
        eps,
        config.label_pairing,
    )?;
    let l_t = finite(l_t, "target_dahsc", PHASE, epoch)?;
    tgt_adj.d_detect += &dz_t;

    let mut l_s = T::zero();
    let mut dc_s = None;
    if let (Some(s), Some(adj)) = (&src, src_adj.as_mut()) {
        let sup: Vec<(usize, u8)> = bundle.source_labels().iter().copied().enumerate().collect();
        let c_s = state.centers.effective(Domain::Source, pipeline.centers);
        let (v, dz, dc) = dahsc_loss_grad(s.detection_output().view(), &sup, c_s.view(), eps, config.label_pairing)?;
        l_s = finite(v, "source_dahsc", PHASE, epoch)?;
        adj.d_detect += &dz;
        dc_s = Some(dc);
    }

    let l_contra = contra_loss(&parts);
    let total = finite(
        total_loss(l_t, l_s, l_contra, LossWeights { alpha_balance: alpha }),
        "total",
        PHASE,
        epoch,
    )?;

    if let Some(grads) = grads {
        tgt_adj.backward(&tgt, &aug.target, state, Domain::Target, grads);
        if let (Some(s), Some(adj), Some(nb)) = (&src, src_adj, src_nb) {
            adj.backward(s, nb, state, Domain::Source, grads);
        }
        grads.centers.accumulate(Domain::Target, pipeline.centers, dc_t.view());
        if let Some(dc) = dc_s {
            grads.centers.accumulate(Domain::Source, pipeline.centers, dc.view());
        }
        grads.discriminators.intra_source.weight += &d_disc.intra_source.weight;
        grads.discriminators.intra_target.weight += &d_disc.intra_target.weight;
        grads.discriminators.inter.weight += &d_disc.inter.weight;
    }

    Ok(LossBreakdown {
        l_target: l_t,
        l_source: l_s,
        parts,
        l_contra,
        total,
    })
}

fn intra_terms<T: Scalar>(
    passes: &DomainPasses<T>,
    state: &ModelState<T>,
    domain: Domain,
    eps: T,
) -> Result<(T, crate::contrastive::IntraGrad<T>)> {
    let corrupt = passes.corrupt.as_ref().expect("corrupt pass present when intra is on");
    intra_loss_grad(
        passes.clean.output().view(),
        corrupt.output().view(),
        passes.readout.view(),
        state.discriminators.intra(domain),
        eps,
    )
}

/// Target-only hypersphere loss on the full graph, used during self-training.
pub fn target_objective<T: Scalar>(
    state: &ModelState<T>,
    target: &AttributedGraph<T>,
    supervision: &[(usize, u8)],
    pipeline: &Pipeline,
    config: &TrainConfig,
    epoch: usize,
    grads: Option<&mut ModelState<T>>,
) -> Result<T> {
    let eps = T::lit(config.clamp_eps);
    let nb = target.neighbors();
    let prompts = pipeline.prompts.then(|| state.prompts(Domain::Target));
    let pass = EncoderPass::forward(target.features().view(), nb, Domain::Target, &state.encoder, prompts, None)?;
    let center = state.centers.effective(Domain::Target, pipeline.centers);
    let (v, dz, dc) = dahsc_loss_grad(pass.output().view(), supervision, center.view(), eps, config.label_pairing)?;
    let v = finite(v, "target_dahsc", "self-training", epoch)?;
    if let Some(grads) = grads {
        let (enc, prm) = grads_for(grads, Domain::Target);
        pass.backward(nb, &state.encoder, prompts, dz.view(), enc, prompts.map(|_| prm));
        grads.centers.accumulate(Domain::Target, pipeline.centers, dc.view());
    }
    Ok(v)
}
