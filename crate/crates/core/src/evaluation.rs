//! Ranking metrics, the multi-trial experiment harness and ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::data_io::{make_split, sample_few_shot, DatasetPair, DomainBundle, LabelSource, LabelVault, SplitMasks};
use crate::detection::CenterMode;
use crate::error::{arg_err, Error, Result};
use crate::graph::AttributedGraph;
use crate::scalar::Scalar;
use crate::training::{fit, score_target, FitOutcome, Pipeline, PseudoLabelSets, TrainConfig};

fn check_inputs<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<Vec<f64>> {
    if scores.len() != labels.len() {
        return Err(arg_err(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 1) {
        return Err(arg_err(format!("label {y} is not binary")));
    }
    let s: Vec<f64> = scores.iter().map(|v| v.as_f64()).collect();
    if s.iter().any(|v| v.is_nan()) {
        return Err(arg_err("scores contain NaN"));
    }
    Ok(s)
}

/// Indices sorted by descending score, then split into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random anomaly outscores a random normal node, ties
/// counting one half (the Mann-Whitney statistic with average ranks).
pub fn auc_roc<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    let s = check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC-ROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    // walk groups from the lowest score up, assigning 1-based average ranks
    let mut groups = tie_groups(&s);
    groups.reverse();
    let mut rank_sum = 0.0;
    let mut below = 0usize;
    for g in &groups {
        let avg_rank = below as f64 + (g.len() as f64 + 1.0) / 2.0;
        rank_sum += avg_rank * g.iter().filter(|&&i| labels[i] == 1).count() as f64;
        below += g.len();
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: `Σ_k (R_k − R_{k−1}) · P_k` over descending distinct
/// score thresholds, equal scores forming one threshold.
pub fn auc_pr<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    let s = check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs at least one positive label".into()));
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for g in tie_groups(&s) {
        tp += g.iter().filter(|&&i| labels[i] == 1).count();
        seen += g.len();
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Per-trial values with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_trial: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn new(per_trial: Vec<f64>) -> Self {
        let n = per_trial.len().max(1) as f64;
        let mean = per_trial.iter().sum::<f64>() / n;
        let var = per_trial.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Summary {
            per_trial,
            mean,
            std: var.sqrt(),
        }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub shots: usize,
    pub trials: usize,
    pub auc_roc: Summary,
    pub auc_pr: Summary,
    /// AUC-ROC on the validation mask; trials whose validation mask holds a
    /// single class are skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_auc_roc: Option<Summary>,
    pub config_hash: String,
}

impl MetricReport {
    pub const TSV_HEADER: &'static str = "variant\tshots\ttrials\tauc_roc\tauc_pr";

    pub fn tsv_row(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.variant, self.shots, self.trials, self.auc_roc, self.auc_pr)
    }

    pub fn to_tsv(&self) -> String {
        format!("{}\n{}\n", Self::TSV_HEADER, self.tsv_row())
    }
}

/// The ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoPrompt,
    NoIntra,
    NoContra,
    HscOnly,
    NoSource,
    NoSelftrain,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPrompt,
        Variant::NoIntra,
        Variant::NoContra,
        Variant::HscOnly,
        Variant::NoSource,
        Variant::NoSelftrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPrompt => "no-prompt",
            Variant::NoIntra => "no-intra",
            Variant::NoContra => "no-contra",
            Variant::HscOnly => "hsc-only",
            Variant::NoSource => "no-source",
            Variant::NoSelftrain => "no-selftrain",
        }
    }

    pub fn pipeline(self) -> Pipeline {
        let full = Pipeline::default();
        match self {
            Variant::Full => full,
            Variant::NoPrompt => Pipeline { prompts: false, ..full },
            Variant::NoIntra => Pipeline { intra: false, ..full },
            Variant::NoContra => Pipeline {
                intra: false,
                inter: false,
                ..full
            },
            Variant::HscOnly => Pipeline {
                centers: CenterMode::Independent,
                ..full
            },
            Variant::NoSource => Pipeline {
                source: false,
                inter: false,
                ..full
            },
            Variant::NoSelftrain => Pipeline {
                self_train: false,
                ..full
            },
        }
    }

    /// The configuration actually run: without self-training the second
    /// phase has zero epochs.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        if !self.pipeline().self_train {
            c.epochs_self = 0;
        }
        c
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| arg_err(format!("unknown variant {s:?}; valid variants: {}", Self::valid_names())))
    }
}

/// Hex SHA-256 of the resolved configuration and variant.
pub fn config_hash(config: &TrainConfig, variant: Variant) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    sha256_hex(format!("{variant}\n{json}").as_bytes())
}

/// One trial's results and everything needed to audit it.
#[derive(Debug, Clone)]
pub struct TrialOutcome<T> {
    pub seed: u64,
    pub masks: SplitMasks,
    pub shots: Vec<usize>,
    pub fit: FitOutcome<T>,
    pub scores: Vec<T>,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub val_auc_roc: Option<f64>,
}

impl<T> TrialOutcome<T> {
    pub fn pseudo(&self) -> Option<&PseudoLabelSets> {
        self.fit.pseudo.as_ref()
    }
}

fn masked<T: Copy, L: LabelSource + ?Sized>(scores: &[T], labels: &L, mask: &[usize]) -> (Vec<T>, Vec<u8>) {
    mask.iter().map(|&i| (scores[i], labels.label(i))).unzip()
}

/// One trial with seed `config.seed`: split, shot sampling, training, and
/// test-mask metrics. Target labels are read only through `labels`: training
/// labels while sampling shots, the rest after [`LabelVault::unseal`].
pub fn run_trial<T: Scalar>(
    source: &AttributedGraph<T>,
    target: &AttributedGraph<T>,
    labels: &LabelVault,
    config: &TrainConfig,
    pipeline: &Pipeline,
) -> Result<TrialOutcome<T>> {
    config.validate()?;
    if labels.num_nodes() != target.num_nodes() {
        return Err(arg_err("label count differs from target node count"));
    }
    let masks = make_split(target.num_nodes(), config.seed)?;
    let shots = sample_few_shot(labels, &masks, config.shots, config.seed)?;
    let bundle = DomainBundle::new(source.clone(), target, masks.clone(), shots.clone())?;
    let fit = fit(&bundle, config, pipeline)?;
    let scores = score_target(fit.final_state(), &bundle.target, pipeline)?.to_vec();

    labels.unseal();
    let (test_scores, test_labels) = masked(&scores, labels, &masks.test);
    let auc_roc = auc_roc(&test_scores, &test_labels)?;
    let auc_pr = auc_pr(&test_scores, &test_labels)?;
    let (val_scores, val_labels) = masked(&scores, labels, &masks.val);
    let val_auc_roc = match crate::evaluation::auc_roc(&val_scores, &val_labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(TrialOutcome {
        seed: config.seed,
        masks,
        shots,
        fit,
        scores,
        auc_roc,
        auc_pr,
        val_auc_roc,
    })
}

/// `trials` independent trials of `variant` with seeds `seed, seed + 1, …`,
/// each resampling the split and the K shots.
pub fn run_ablation<T: Scalar>(pair: &DatasetPair<T>, config: &TrainConfig, variant: Variant, trials: usize) -> Result<MetricReport> {
    if trials == 0 {
        return Err(arg_err("at least one trial is required"));
    }
    let config = variant.apply(config);
    config.validate()?;
    let pipeline = variant.pipeline();
    let truth = pair
        .target
        .labels()
        .ok_or_else(|| arg_err("target graph carries no labels to evaluate against"))?;
    let mut roc = Vec::with_capacity(trials);
    let mut pr = Vec::with_capacity(trials);
    let mut val = Vec::new();
    for i in 0..trials {
        let trial_config = TrainConfig {
            seed: config.seed + i as u64,
            ..config.clone()
        };
        let vault = LabelVault::new(truth.to_vec());
        let t = run_trial(&pair.source, &pair.target, &vault, &trial_config, &pipeline)?;
        roc.push(t.auc_roc);
        pr.push(t.auc_pr);
        val.extend(t.val_auc_roc);
    }
    Ok(MetricReport {
        variant: variant.name().to_string(),
        shots: config.shots,
        trials,
        auc_roc: Summary::new(roc),
        auc_pr: Summary::new(pr),
        val_auc_roc: (!val.is_empty()).then(|| Summary::new(val)),
        config_hash: config_hash(&config, variant),
    })
}

/// The full model over `trials` trials.
pub fn run_experiment<T: Scalar>(pair: &DatasetPair<T>, config: &TrainConfig, trials: usize) -> Result<MetricReport> {
    run_ablation(pair, config, Variant::Full, trials)
}
