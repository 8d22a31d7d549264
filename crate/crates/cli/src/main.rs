//! `cdfs-gad`: generate synthetic benchmarks, train, score, evaluate,
//! run ablations and check gradients.
//!
//! Exit status: 0 on success, 1 when the data or model fails a check
//! (invalid configuration, undefined metric, integrity failure, gradient
//! check breach), 2 on I/O and argument errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cdfs_gad::checkpoint::{load_checkpoint, save_checkpoint};
use cdfs_gad::data_io::{
    gen_synthetic_pair, load_dataset, make_split, read_column, sample_few_shot, save_dataset, DatasetDescriptor, DatasetPair,
    DomainBundle, SplitMasks, SyntheticPairConfig,
};
use cdfs_gad::evaluation::{auc_pr, auc_roc, config_hash, run_ablation, MetricReport, Summary, Variant};
use cdfs_gad::training::{
    default_state, fit, format_trace, grad_check, score_target, tiny_bundle, GradCheckOptions, TrainConfig,
};
use cdfs_gad::{Error, Result};

#[derive(Parser)]
#[command(name = "cdfs-gad", version, about = "Cross-domain few-shot graph anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target dataset pair.
    Generate {
        /// SyntheticPairConfig JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint training, pseudo-labeling and self-training on one split.
    Train {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every target node with a trained run's final checkpoint.
    Score {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AUC-ROC and AUC-PR of a scores file against labels.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        /// One 0/1 label per line, aligned with the scores.
        #[arg(long)]
        labels: PathBuf,
        /// split.json restricting evaluation to one subset.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        subset: String,
        /// Run configuration recorded in the report (shots, hash).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-trial experiment for one ablation variant.
    Ablate {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a tiny pair.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 240)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Corrupt one analytic gradient entry; the check must then fail.
        #[arg(long)]
        mutate_gradient: bool,
    },
}

/// Training hyperparameters: built-in defaults, then `--config`, then flags.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TrainConfig JSON; omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs_joint: Option<usize>,
    #[arg(long)]
    epochs_self: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    alpha_balance: Option<f64>,
    #[arg(long)]
    drop_p: Option<f64>,
    #[arg(long)]
    m_bases: Option<usize>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    out_width: Option<usize>,
    /// `standard` or `swapped`.
    #[arg(long)]
    label_pairing: Option<String>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => read_json(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    c.$field = v;
                }
            )*};
        }
        apply!(shots, seed, epochs_joint, epochs_self, learning_rate, alpha_balance, drop_p, m_bases, beta1, beta2, hidden_width, out_width);
        if let Some(p) = &self.label_pairing {
            c.label_pairing = serde_json::from_value(serde_json::Value::String(p.clone()))
                .map_err(|_| Error::InvalidArgument(format!("label pairing {p:?} is neither `standard` nor `swapped`")))?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Written into an output directory before any heavy computation; enough
/// to replay the command.
#[derive(Serialize)]
struct RunManifest<C: Serialize> {
    command: &'static str,
    version: &'static str,
    seed: u64,
    variant: Option<String>,
    config: C,
    datasets: Vec<DatasetDescriptor>,
    outputs: Vec<String>,
}

impl<C: Serialize> RunManifest<C> {
    fn new(command: &'static str, seed: u64, config: C) -> Self {
        RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            variant: None,
            config,
            datasets: Vec::new(),
            outputs: Vec::new(),
        }
    }
}

fn load_pair(source: &Path, target: &Path) -> Result<(DatasetPair<f64>, DatasetDescriptor, DatasetDescriptor)> {
    DatasetPair::load(source, target)
}

fn generate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: SyntheticPairConfig = match config {
        Some(p) => read_json(p)?,
        None => SyntheticPairConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut manifest = RunManifest::new("generate", cfg.seed, &cfg);
    manifest.outputs = vec!["source".into(), "target".into()];
    write_json(&out.join("manifest.json"), &manifest)?;

    let synth = gen_synthetic_pair::<f64>(&cfg)?;
    save_dataset(&synth.pair.source, &synth.source_desc.name, &out.join("source"))?;
    save_dataset(&synth.pair.target, &synth.target_desc.name, &out.join("target"))?;
    println!(
        "wrote {} ({} nodes, {} anomalies) and {} ({} nodes, {} anomalies)",
        out.join("source").display(),
        synth.source_desc.num_nodes,
        synth.source_desc.num_anomalies,
        out.join("target").display(),
        synth.target_desc.num_nodes,
        synth.target_desc.num_anomalies
    );
    Ok(())
}

#[derive(Serialize)]
struct Labeled<'a> {
    shots: &'a [usize],
    pseudo_anomalous: &'a [usize],
    pseudo_normal: &'a [usize],
}

fn train(source: &Path, target: &Path, variant: &str, args: &ConfigArgs, out: &Path) -> Result<()> {
    let variant: Variant = variant.parse()?;
    let config = variant.apply(&args.resolve()?);
    let pipeline = variant.pipeline();
    let (pair, sd, td) = load_pair(source, target)?;
    if pair.target.labels().is_none() {
        return Err(Error::InvalidArgument("target dataset has no labels to draw shots from".into()));
    }

    let mut manifest = RunManifest::new("train", config.seed, &config);
    manifest.variant = Some(variant.to_string());
    manifest.datasets = vec![sd, td];
    manifest.outputs = [
        "config.json",
        "split.json",
        "labeled.json",
        "loss_joint.tsv",
        "loss_self.tsv",
        "checkpoints/init",
        "checkpoints/joint",
        "checkpoints/self",
    ]
    .map(String::from)
    .to_vec();
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("config.json"), &config)?;

    let masks = make_split(pair.target.num_nodes(), config.seed)?;
    masks.save(&out.join("split.json"))?;
    let shots = sample_few_shot(&pair.target, &masks, config.shots, config.seed)?;
    let bundle = DomainBundle::new(pair.source, &pair.target, masks, shots)?;

    let outcome = fit(&bundle, &config, &pipeline)?;
    let ckpt = out.join("checkpoints");
    save_checkpoint(&outcome.initial, config.seed, &pipeline, &ckpt.join("init"))?;
    save_checkpoint(&outcome.joint.state, config.seed, &pipeline, &ckpt.join("joint"))?;
    write_file(&out.join("loss_joint.tsv"), format_trace(&outcome.joint.trace))?;
    let empty = Vec::new();
    let (pa, pn) = outcome.pseudo.as_ref().map_or((&empty, &empty), |p| (&p.anomalous, &p.normal));
    write_json(
        &out.join("labeled.json"),
        &Labeled {
            shots: &bundle.shots,
            pseudo_anomalous: pa,
            pseudo_normal: pn,
        },
    )?;
    if let Some(refined) = &outcome.refined {
        save_checkpoint(&refined.state, config.seed, &pipeline, &ckpt.join("self"))?;
        write_file(&out.join("loss_self.tsv"), format_trace(&refined.trace))?;
    }
    let last = |t: &[cdfs_gad::training::LossRecord]| t.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained {variant}: joint loss {:.4} -> {:.4} over {} epochs; self-training {} epochs; {} pseudo-anomalies, {} pseudo-normals",
        outcome.joint.trace.first().map_or(f64::NAN, |r| r.total),
        last(&outcome.joint.trace),
        config.epochs_joint,
        outcome.refined.as_ref().map_or(0, |r| r.trace.len()),
        pa.len(),
        pn.len()
    );
    Ok(())
}

fn score(run: &Path, target: &Path, out: &Path) -> Result<()> {
    let ckpt = run.join("checkpoints");
    let dir = if ckpt.join("self").is_dir() { ckpt.join("self") } else { ckpt.join("joint") };
    let (state, manifest) = load_checkpoint::<f64>(&dir)?;
    let (graph, _) = load_dataset::<f64>(target)?;
    if graph.num_attrs() != state.shape.target_dim {
        return Err(Error::InvalidArgument(format!(
            "target has {} attributes, the checkpoint expects {}",
            graph.num_attrs(),
            state.shape.target_dim
        )));
    }
    let scores = score_target(&state, &graph, &manifest.pipeline)?;
    let mut text = String::from("node\tscore\n");
    for (i, s) in scores.iter().enumerate() {
        text.push_str(&format!("{i}\t{s}\n"));
    }
    write_file(out, text)?;
    println!("scored {} nodes with {}", scores.len(), dir.display());
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        file: path.to_path_buf(),
        line,
        msg,
    };
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let node: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| parse_err(i + 1, format!("bad node index in {line:?}")))?;
        let score: f64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| parse_err(i + 1, format!("bad score in {line:?}")))?;
        if node != scores.len() {
            return Err(parse_err(i + 1, format!("expected node {}, found {node}", scores.len())));
        }
        scores.push(score);
    }
    Ok(scores)
}

fn evaluate(
    scores: &Path,
    labels: &Path,
    mask: Option<&Path>,
    subset: &str,
    config: Option<&Path>,
    variant: &str,
    out: &Path,
) -> Result<()> {
    let variant: Variant = variant.parse()?;
    let scores = read_scores(scores)?;
    let labels: Vec<u8> = read_column(labels)?;
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (s, y): (Vec<f64>, Vec<u8>) = match mask {
        Some(path) => {
            let masks = SplitMasks::load(path)?;
            let nodes = match subset {
                "train" => &masks.train,
                "val" => &masks.val,
                _ => &masks.test,
            };
            if let Some(&i) = nodes.iter().find(|&&i| i >= scores.len()) {
                return Err(Error::InvalidArgument(format!("mask node {i} is out of range")));
            }
            nodes.iter().map(|&i| (scores[i], labels[i])).unzip()
        }
        None => (scores, labels),
    };
    let roc = auc_roc(&s, &y)?;
    let pr = auc_pr(&s, &y)?;
    let config: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let report = MetricReport {
        variant: variant.to_string(),
        shots: config.shots,
        trials: 1,
        auc_roc: Summary::new(vec![roc]),
        auc_pr: Summary::new(vec![pr]),
        val_auc_roc: None,
        config_hash: config_hash(&config, variant),
    };
    write_json(out, &report)?;
    println!("auc_roc {roc:.6} auc_pr {pr:.6} over {} nodes", s.len());
    Ok(())
}

fn ablate(source: &Path, target: &Path, variant: &str, trials: usize, args: &ConfigArgs, out: &Path) -> Result<()> {
    let variant: Variant = variant.parse()?;
    if trials == 0 {
        return Err(Error::InvalidArgument("--trials must be at least 1".into()));
    }
    let config = variant.apply(&args.resolve()?);
    let (pair, sd, td) = load_pair(source, target)?;
    let mut manifest = RunManifest::new("ablate", config.seed, &config);
    manifest.variant = Some(variant.to_string());
    manifest.datasets = vec![sd, td];
    manifest.outputs = vec!["metrics.json".into(), "metrics.tsv".into()];
    write_json(&out.join("manifest.json"), &manifest)?;

    let report = run_ablation(&pair, &config, variant, trials)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_file(&out.join("metrics.tsv"), report.to_tsv())?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn gradcheck(step: f64, samples: usize, seed: u64, tolerance: f64, variant: &str, mutate: bool) -> Result<bool> {
    let variant: Variant = variant.parse()?;
    let opts = GradCheckOptions {
        step,
        samples,
        seed,
        mutate,
        ..GradCheckOptions::default()
    };
    let (bundle, config) = tiny_bundle(seed)?;
    let state = default_state(&bundle, &config)?;
    let report = grad_check(&state, &bundle, &config, &variant.pipeline(), &opts)?;
    for (name, n, err) in &report.per_tensor {
        println!("{name:<24} {n:>4} probed  max rel error {err:.3e}");
    }
    println!(
        "max relative error {:.3e} over {} scalars (worst: {}[{}]); tolerance {tolerance:e}",
        report.max_rel_error, report.checked, report.worst.0, report.worst.1
    );
    Ok(report.max_rel_error <= tolerance)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { config, seed, out } => generate(config.as_deref(), seed, &out)?,
        Command::Train {
            source,
            target,
            variant,
            config,
            out,
        } => train(&source, &target, &variant, &config, &out)?,
        Command::Score { run, target, out } => score(&run, &target, &out)?,
        Command::Evaluate {
            scores,
            labels,
            mask,
            subset,
            config,
            variant,
            out,
        } => evaluate(&scores, &labels, mask.as_deref(), &subset, config.as_deref(), &variant, &out)?,
        Command::Ablate {
            source,
            target,
            variant,
            trials,
            config,
            out,
        } => ablate(&source, &target, &variant, trials, &config, &out)?,
        Command::Gradcheck {
            step,
            samples,
            seed,
            tolerance,
            variant,
            mutate_gradient,
        } => {
            if !gradcheck(step, samples, seed, tolerance, &variant, mutate_gradient)? {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
