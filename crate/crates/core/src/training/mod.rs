//! The training procedure: joint two-domain training, percentile
//! pseudo-labeling, and target-only self-training.

mod gradcheck;
mod objective;

pub use gradcheck::{default_state, grad_check, tiny_bundle, GradCheckOptions, GradCheckReport};
pub use objective::{joint_objective, target_objective, Augmentation, LossBreakdown};

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::data_io::DomainBundle;
use crate::detection::{anomaly_scores, CenterMode, LabelPairing};
use crate::encoder::{encode, Domain, DomainPrompts};
use crate::error::{Error, Result};
use crate::graph::{drop_edges, shuffle_permutation, AttributedGraph};
use crate::model::{ModelShape, ModelState, ParamGroup};
use crate::optim::Adam;
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;

/// Every hyperparameter of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Weight of the contrastive loss in the joint objective.
    pub alpha_balance: f64,
    /// Probability of dropping each edge during joint training.
    pub drop_p: f64,
    pub m_bases: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs_joint: usize,
    pub epochs_self: usize,
    pub shots: usize,
    pub seed: u64,
    pub hidden_width: usize,
    pub out_width: usize,
    pub clamp_eps: f64,
    pub label_pairing: LabelPairing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0005,
            alpha_balance: 0.5,
            drop_p: 0.1,
            m_bases: 5,
            beta1: 0.02,
            beta2: 0.25,
            epochs_joint: 50,
            epochs_self: 100,
            shots: 1,
            seed: 0,
            hidden_width: 256,
            out_width: 64,
            clamp_eps: 1e-7,
            label_pairing: LabelPairing::Standard,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.alpha_balance >= 0.0 && self.alpha_balance.is_finite()) {
            return bad(format!("alpha_balance {} must be nonnegative", self.alpha_balance));
        }
        if !(0.0..=1.0).contains(&self.drop_p) {
            return bad(format!("drop_p {} outside [0, 1]", self.drop_p));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} {b} outside (0, 1)"));
            }
        }
        if self.beta1 + self.beta2 > 1.0 {
            return bad(format!(
                "beta1 + beta2 = {} exceeds 1 (beta1 {}, beta2 {})",
                self.beta1 + self.beta2,
                self.beta1,
                self.beta2
            ));
        }
        if self.m_bases == 0 || self.shots == 0 || self.hidden_width == 0 || self.out_width == 0 {
            return bad("m_bases, shots and layer widths must be positive".into());
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return bad(format!("clamp_eps {} outside (0, 0.5)", self.clamp_eps));
        }
        Ok(())
    }

    pub fn shape_for<T: Scalar>(&self, bundle: &DomainBundle<T>) -> ModelShape {
        ModelShape {
            source_dim: bundle.source.num_attrs(),
            target_dim: bundle.target.num_attrs(),
            hidden_width: self.hidden_width,
            out_width: self.out_width,
            m_bases: self.m_bases,
        }
    }
}

/// Which parts of the method are switched on. Ablations flip these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pipeline {
    pub prompts: bool,
    pub intra: bool,
    pub inter: bool,
    pub centers: CenterMode,
    pub source: bool,
    pub self_train: bool,
}

impl Default for Pipeline {
    fn default() -> Self {
        Pipeline {
            prompts: true,
            intra: true,
            inter: true,
            centers: CenterMode::Shared,
            source: true,
            self_train: true,
        }
    }
}

impl Pipeline {
    fn joint_trainable(&self, group: ParamGroup) -> bool {
        use ParamGroup::*;
        match group {
            SourceMlp | SourceOffset => self.source,
            SourcePrompts => self.source && self.prompts,
            TargetPrompts => self.prompts,
            SharedCenter => self.centers == CenterMode::Shared,
            Discriminators => self.intra || (self.inter && self.source),
            TargetMlp | Encoder | TargetOffset => true,
        }
    }

    fn self_trainable(&self, group: ParamGroup) -> bool {
        use ParamGroup::*;
        match group {
            TargetMlp | Encoder | TargetOffset => true,
            TargetPrompts => self.prompts,
            SharedCenter => self.centers == CenterMode::Shared,
            SourceMlp | SourcePrompts | Discriminators | SourceOffset => false,
        }
    }
}

/// Loss values of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub l_t: f64,
    pub l_s: f64,
    pub l_contra: f64,
    pub total: f64,
}

impl LossRecord {
    pub const TSV_HEADER: &'static str = "epoch\tl_t\tl_s\tl_contra\ttotal";

    pub fn tsv_row(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.epoch, self.l_t, self.l_s, self.l_contra, self.total)
    }
}

pub fn format_trace(trace: &[LossRecord]) -> String {
    let mut out = String::from(LossRecord::TSV_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&r.tsv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: ModelState<T>,
    /// Loss at the start of each epoch, before that epoch's update.
    pub trace: Vec<LossRecord>,
}

/// Pseudo-labeled target nodes, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PseudoLabelSets {
    pub anomalous: Vec<usize>,
    pub normal: Vec<usize>,
}

/// `ceil(beta · n)`, robust to products like `0.02 · 100` landing a hair
/// above the integer.
pub fn percentile_count(beta: f64, n: usize) -> usize {
    ((beta * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Detection-branch embeddings of the target graph on its full adjacency.
fn target_detection<T: Scalar>(state: &ModelState<T>, target: &AttributedGraph<T>, pipeline: &Pipeline) -> Result<ndarray::Array2<T>> {
    let prompts = pipeline.prompts.then(|| state.prompts(Domain::Target));
    encode(target, target.neighbors(), Domain::Target, &state.encoder, prompts, None)
}

/// Random initial parameters with the hypersphere centers placed at the
/// mean initial target embedding of the training nodes.
///
/// In shared mode that mean becomes the shared center and both offsets
/// start at zero. In independent mode each domain's own center starts at
/// the same point and the shared center stays at zero, so both modes begin
/// from identical effective centers. With prompts off both prompt banks are
/// zero.
pub fn initialize<T: Scalar>(bundle: &DomainBundle<T>, config: &TrainConfig, pipeline: &Pipeline) -> Result<ModelState<T>> {
    config.validate()?;
    let shape = config.shape_for(bundle);
    let mut state = ModelState::init(shape, &mut stream(config.seed, Stream::Init));
    if !pipeline.prompts {
        state.source_prompts = DomainPrompts::zeros(shape.m_bases, shape.hidden_width, shape.out_width);
        state.target_prompts = DomainPrompts::zeros(shape.m_bases, shape.hidden_width, shape.out_width);
    }
    let z_t = target_detection(&state, &bundle.target, pipeline)?;
    let mean_t = z_t.select(Axis(0), &bundle.masks.train).mean_axis(Axis(0)).expect("nonempty training mask");
    match pipeline.centers {
        CenterMode::Shared => state.centers.shared = mean_t,
        CenterMode::Independent => {
            state.centers.source_offset = mean_t.clone();
            state.centers.target_offset = mean_t;
        }
    }
    Ok(state)
}

/// Draws one epoch's edge dropping and feature shuffles.
fn draw_augmentation<T: Scalar, R: rand::Rng>(
    bundle: &DomainBundle<T>,
    config: &TrainConfig,
    pipeline: &Pipeline,
    aug_rng: &mut R,
    corrupt_rng: &mut R,
) -> Result<Augmentation> {
    let target = drop_edges(&bundle.target, config.drop_p, aug_rng)?.neighborhoods();
    let source = if pipeline.source {
        Some(drop_edges(&bundle.source, config.drop_p, aug_rng)?.neighborhoods())
    } else {
        None
    };
    let contrastive = pipeline.intra || (pipeline.inter && pipeline.source);
    let (target_perm, source_perm) = if contrastive {
        let t = shuffle_permutation(bundle.target.num_nodes(), corrupt_rng);
        let s = pipeline.source.then(|| shuffle_permutation(bundle.source.num_nodes(), corrupt_rng));
        (Some(t), s)
    } else {
        (None, None)
    };
    Ok(Augmentation {
        source,
        target,
        source_perm,
        target_perm,
    })
}

/// Initializes from `config.seed` and runs the joint phase.
pub fn joint_train<T: Scalar>(bundle: &DomainBundle<T>, config: &TrainConfig, pipeline: &Pipeline) -> Result<TrainOutcome<T>> {
    let state = initialize(bundle, config, pipeline)?;
    joint_train_from(state, bundle, config, pipeline)
}

/// `epochs_joint` full-batch Adam steps on the joint objective.
pub fn joint_train_from<T: Scalar>(
    mut state: ModelState<T>,
    bundle: &DomainBundle<T>,
    config: &TrainConfig,
    pipeline: &Pipeline,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let supervision = bundle.target_supervision();
    let mut adam = Adam::new(T::lit(config.learning_rate), &state);
    let mut aug_rng = stream(config.seed, Stream::Augment);
    let mut corrupt_rng = stream(config.seed, Stream::Corrupt);
    let mut trace = Vec::with_capacity(config.epochs_joint);
    for epoch in 0..config.epochs_joint {
        let aug = draw_augmentation(bundle, config, pipeline, &mut aug_rng, &mut corrupt_rng)?;
        let mut grads = state.zeros_like();
        let loss = joint_objective(&state, bundle, &supervision, &aug, pipeline, config, epoch, Some(&mut grads))?;
        trace.push(LossRecord {
            epoch,
            l_t: loss.l_target.as_f64(),
            l_s: loss.l_source.as_f64(),
            l_contra: loss.l_contra.as_f64(),
            total: loss.total.as_f64(),
        });
        adam.step(&mut state, &grads, |g| pipeline.joint_trainable(g));
    }
    Ok(TrainOutcome { state, trace })
}

/// Anomaly scores `1 - exp(-‖z_i - c^t‖²)` for every target node, computed on
/// the full target adjacency.
pub fn score_target<T: Scalar>(state: &ModelState<T>, target: &AttributedGraph<T>, pipeline: &Pipeline) -> Result<Array1<T>> {
    let z = target_detection(state, target, pipeline)?;
    let center = state.centers.effective(Domain::Target, pipeline.centers);
    anomaly_scores(z.view(), center.view())
}

/// Ranks `eligible` nodes by descending score (ascending index on ties) and
/// takes `ceil(beta1 · n)` from the top as anomalous and `ceil(beta2 · n)`
/// from the bottom as normal.
///
/// When rounding up both counts would overlap, the normal set shrinks to the
/// nodes left after the anomalous set.
pub fn pseudo_label<T: Scalar>(scores: &[T], eligible: &[usize], beta1: f64, beta2: f64) -> Result<PseudoLabelSets> {
    if !(beta1 >= 0.0 && beta2 >= 0.0) || beta1 + beta2 > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "pseudo-label fractions beta1 {beta1} and beta2 {beta2} must be nonnegative with sum at most 1"
        )));
    }
    if eligible.is_empty() {
        return Err(Error::InvalidArgument("no eligible nodes to pseudo-label".into()));
    }
    if let Some(&i) = eligible.iter().find(|&&i| i >= scores.len()) {
        return Err(Error::InvalidArgument(format!("eligible node {i} has no score")));
    }
    if let Some(&i) = eligible.iter().find(|&&i| scores[i].is_nan()) {
        return Err(Error::InvalidArgument(format!("score of node {i} is NaN")));
    }
    let mut ranked = eligible.to_vec();
    ranked.sort_unstable();
    ranked.dedup();
    ranked.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN").then(a.cmp(&b)));
    let n = ranked.len();
    let k1 = percentile_count(beta1, n).min(n);
    let k2 = percentile_count(beta2, n).min(n - k1);
    let mut anomalous = ranked[..k1].to_vec();
    let mut normal = ranked[n - k2..].to_vec();
    anomalous.sort_unstable();
    normal.sort_unstable();
    Ok(PseudoLabelSets { anomalous, normal })
}

/// Supervision for self-training: pseudo-anomalies and the true shots as 1,
/// pseudo-normals as 0, sorted by node.
pub fn self_train_supervision(pseudo: &PseudoLabelSets, shots: &[usize]) -> Vec<(usize, u8)> {
    let mut sup: Vec<(usize, u8)> = pseudo
        .anomalous
        .iter()
        .chain(shots)
        .map(|&i| (i, 1))
        .chain(pseudo.normal.iter().map(|&i| (i, 0)))
        .collect();
    sup.sort_unstable();
    sup.dedup_by_key(|p| p.0);
    sup
}

/// `epochs_self` Adam steps on the target hypersphere loss alone, on the
/// full target adjacency, with a fresh optimizer and source-side parameters
/// frozen.
pub fn self_train<T: Scalar>(
    mut state: ModelState<T>,
    bundle: &DomainBundle<T>,
    pseudo: &PseudoLabelSets,
    config: &TrainConfig,
    pipeline: &Pipeline,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let supervision = self_train_supervision(pseudo, &bundle.shots);
    let mut adam = Adam::new(T::lit(config.learning_rate), &state);
    let mut trace = Vec::with_capacity(config.epochs_self);
    for epoch in 0..config.epochs_self {
        let mut grads = state.zeros_like();
        let l_t = target_objective(&state, &bundle.target, &supervision, pipeline, config, epoch, Some(&mut grads))?.as_f64();
        trace.push(LossRecord {
            epoch,
            l_t,
            l_s: 0.0,
            l_contra: 0.0,
            total: l_t,
        });
        adam.step(&mut state, &grads, |g| pipeline.self_trainable(g));
    }
    Ok(TrainOutcome { state, trace })
}

/// Everything produced by one pass of the full procedure.
#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub initial: ModelState<T>,
    pub joint: TrainOutcome<T>,
    pub pseudo: Option<PseudoLabelSets>,
    pub refined: Option<TrainOutcome<T>>,
}

impl<T> FitOutcome<T> {
    pub fn final_state(&self) -> &ModelState<T> {
        self.refined.as_ref().map_or(&self.joint.state, |r| &r.state)
    }
}

/// Initialization, joint training and, when enabled, pseudo-labeling plus
/// self-training.
pub fn fit<T: Scalar>(bundle: &DomainBundle<T>, config: &TrainConfig, pipeline: &Pipeline) -> Result<FitOutcome<T>> {
    let initial = initialize(bundle, config, pipeline)?;
    let joint = joint_train_from(initial.clone(), bundle, config, pipeline)?;
    let (pseudo, refined) = if pipeline.self_train {
        let scores = score_target(&joint.state, &bundle.target, pipeline)?;
        let scores = scores.as_slice().expect("contiguous scores");
        let pseudo = pseudo_label(scores, &bundle.unlabeled_train(), config.beta1, config.beta2)?;
        let refined = self_train(joint.state.clone(), bundle, &pseudo, config, pipeline)?;
        (Some(pseudo), Some(refined))
    } else {
        (None, None)
    };
    Ok(FitOutcome {
        initial,
        joint,
        pseudo,
        refined,
    })
}
