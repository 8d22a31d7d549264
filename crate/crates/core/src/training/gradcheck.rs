//! Central finite-difference check of the joint objective's gradient.

use rand::seq::index;

use crate::data_io::{gen_synthetic_pair, make_split, sample_few_shot, DomainBundle, SyntheticPairConfig};
use crate::error::{arg_err, Result};
use crate::model::ModelState;
use crate::rng::{stream, Stream};

use super::{draw_augmentation, initialize, joint_objective, Pipeline, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Total number of scalars to probe, spread over every tensor.
    pub samples: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Corrupts one analytic gradient entry before comparing.
    pub mutate: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            samples: 240,
            floor: 1e-6,
            seed: 0,
            mutate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
    /// `(tensor, entries probed, max relative error)` per tensor.
    pub per_tensor: Vec<(String, usize, f64)>,
}

/// A 24 + 24 node pair with small widths, split and one shot drawn, sized
/// so a full finite-difference sweep takes well under a second.
pub fn tiny_bundle(seed: u64) -> Result<(DomainBundle<f64>, TrainConfig)> {
    let cfg = SyntheticPairConfig {
        nodes: 24,
        blocks: 2,
        p_intra: 0.3,
        p_inter: 0.05,
        source_dim: 5,
        target_dim: 7,
        anomaly_fraction: 0.2,
        clique_size: 3,
        seed,
        ..SyntheticPairConfig::default()
    };
    let pair = gen_synthetic_pair::<f64>(&cfg)?.pair;
    // a split whose training mask holds an anomaly; the first few split seeds
    // almost always qualify
    let (masks, shots) = (seed..seed + 64)
        .find_map(|s| {
            let masks = make_split(pair.target.num_nodes(), s).ok()?;
            let shots = sample_few_shot(&pair.target, &masks, 1, s).ok()?;
            Some((masks, shots))
        })
        .ok_or_else(|| arg_err("no split with a training anomaly"))?;
    let bundle = DomainBundle::new(pair.source, &pair.target, masks, shots)?;
    let config = TrainConfig {
        hidden_width: 6,
        out_width: 4,
        m_bases: 3,
        seed,
        ..TrainConfig::default()
    };
    Ok((bundle, config))
}

/// Compares analytic and central-difference gradients of the joint loss
/// under one fixed augmentation draw.
pub fn grad_check(
    state: &ModelState<f64>,
    bundle: &DomainBundle<f64>,
    config: &TrainConfig,
    pipeline: &Pipeline,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(arg_err(format!("finite-difference step {} must be positive", opts.step)));
    }
    if opts.samples == 0 {
        return Err(arg_err("at least one scalar must be sampled"));
    }
    let supervision = bundle.target_supervision();
    let mut rng = stream(opts.seed, Stream::GradCheck);
    let mut corrupt = stream(opts.seed, Stream::Corrupt);
    let aug = draw_augmentation(bundle, config, pipeline, &mut rng, &mut corrupt)?;

    let mut analytic = state.zeros_like();
    joint_objective(state, bundle, &supervision, &aug, pipeline, config, 0, Some(&mut analytic))?;
    let loss_at = |s: &ModelState<f64>| -> Result<f64> {
        Ok(joint_objective(s, bundle, &supervision, &aug, pipeline, config, 0, None)?.total)
    };

    let shapes: Vec<(String, usize)> = state.params().iter().map(|p| (p.name.to_string(), p.values.len())).collect();
    let quotas = allocate(opts.samples, &shapes.iter().map(|s| s.1).collect::<Vec<_>>());
    let mut probe = state.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (String::new(), 0),
        per_tensor: Vec::new(),
    };
    let mut mutated = !opts.mutate;
    for (t, ((name, len), quota)) in shapes.iter().zip(quotas).enumerate() {
        let picks = index::sample(&mut rng, *len, quota).into_vec();
        let mut tensor_max = 0.0f64;
        for &i in &picks {
            let original = state.params()[t].values[i];
            probe.params_mut()[t].values[i] = original + opts.step;
            let plus = loss_at(&probe)?;
            probe.params_mut()[t].values[i] = original - opts.step;
            let minus = loss_at(&probe)?;
            probe.params_mut()[t].values[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let mut a = analytic.params()[t].values[i];
            if !mutated {
                a = -a - 0.1;
                mutated = true;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            tensor_max = tensor_max.max(rel);
            if rel > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = (name.clone(), i);
            }
            report.checked += 1;
        }
        report.per_tensor.push((name.clone(), picks.len(), tensor_max));
    }
    Ok(report)
}

/// Splits `total` probes over tensors of the given sizes as evenly as their
/// sizes allow, capped at the total number of scalars.
fn allocate(total: usize, sizes: &[usize]) -> Vec<usize> {
    let mut quotas = vec![0; sizes.len()];
    let mut left = total.min(sizes.iter().sum());
    while left > 0 {
        for (q, &s) in quotas.iter_mut().zip(sizes) {
            if left > 0 && *q < s {
                *q += 1;
                left -= 1;
            }
        }
    }
    quotas
}

/// The model state checked by default: the initial state of
/// [`tiny_bundle`] with biases and centers nudged off their initial values.
/// Zero biases leave some pre-activations exactly at the rectifier kink,
/// where a central difference does not measure the one-sided gradient.
pub fn default_state(bundle: &DomainBundle<f64>, config: &TrainConfig) -> Result<ModelState<f64>> {
    let pipeline = Pipeline::default();
    let mut state = initialize(bundle, config, &pipeline)?;
    let mut rng = stream(config.seed, Stream::GradCheck);
    for p in state.params_mut() {
        if p.name.starts_with("center.") || p.name.ends_with("bias") {
            for v in p.values.iter_mut() {
                *v += 0.05 * (rand::Rng::random::<f64>(&mut rng) - 0.5);
            }
        }
    }
    Ok(state)
}
