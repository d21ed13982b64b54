//! Command-line frontend: dataset generation, training, evaluation,
//! gradient checking, and ablation sweeps. All reports are JSON.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use vispe::dataio::{self, MultiviewDataset, SyntheticSpec};
use vispe::embedder::{self, LinearHead, LossGraphSpec};
use vispe::evalsuite;
use vispe::trainer::{self, Mode, Trainer};
use vispe::{Result, VispeError};

#[derive(Parser)]
#[command(name = "vispe", about = "Multiview embedding toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multiview dataset directory.
    Gen(GenArgs),
    /// Train an embedding model and write a checkpoint directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the seen or unseen split.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Sweep the prototype randomization threshold.
    AblateThreshold(AblateThresholdArgs),
    /// Sweep objects-per-class x views-per-object training budgets.
    AblateGrid(AblateGridArgs),
    /// Export every view's embedding plus a label manifest.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON file with synthetic dataset parameters.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the spec file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `gen`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mode: String,
    /// `key = value` config file; omitted keys take mode defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory (from `train`).
    #[arg(long)]
    model: PathBuf,
    /// Which classes to evaluate: `seen` or `unseen`.
    #[arg(long)]
    split: String,
    /// Report JSON path; `-` for stdout.
    #[arg(long, default_value = "-")]
    report: String,
    /// Override the automatic choice of k for KNN.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// A training mode, or `all`.
    #[arg(long, default_value = "all")]
    mode: String,
    /// Report errors without failing the exit code.
    #[arg(long)]
    no_strict: bool,
}

#[derive(Args)]
struct AblateThresholdArgs {
    /// Comma-separated thresholds, e.g. `0,0.5,1.0`.
    #[arg(long, value_delimiter = ',')]
    thresholds: Vec<f64>,
    /// Seeds per threshold.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "-")]
    report: String,
    /// `key = value` config file applied to every run.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateGridArgs {
    /// Comma-separated objects-per-class budgets.
    #[arg(long, value_delimiter = ',')]
    objects: Vec<usize>,
    /// Comma-separated views-per-object budgets.
    #[arg(long, value_delimiter = ',')]
    views: Vec<usize>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "-")]
    report: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::AblateThreshold(a) => ablate_threshold(a),
        Command::AblateGrid(a) => ablate_grid(a),
        Command::Export(a) => export(a),
    }
}

fn write_report(dest: &str, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| VispeError::Format(e.to_string()))?;
    if dest == "-" {
        println!("{text}");
    } else {
        let path = PathBuf::from(dest);
        std::fs::write(&path, text).map_err(|e| VispeError::io(&path, e))?;
    }
    Ok(())
}

fn load_config_overrides(path: &Option<PathBuf>) -> Result<BTreeMap<String, String>> {
    match path {
        None => Ok(BTreeMap::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| VispeError::io(p, e))?;
            trainer::parse_config_text(&text)
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| VispeError::io(&a.spec, e))?;
    let mut spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| VispeError::Config(format!("bad spec: {e}")))?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let ds = dataio::generate(&spec)?;
    dataio::save(&ds, &a.out)?;
    eprintln!(
        "wrote {} objects / {} views to {}",
        ds.objects.len(),
        ds.total_views(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = dataio::load(&a.data)?;
    let mode: Mode = a.mode.parse()?;
    let overrides = load_config_overrides(&a.config)?;
    let config = trainer::build_config(mode, &overrides)?;
    let mut t = Trainer::new(config, &ds)?;
    let hook = |params: &embedder::EmbedderParams| {
        evalsuite::unseen_knn_accuracy(params, &ds).unwrap_or(f64::NAN)
    };
    t.run(&ds, Some(&hook))?;
    t.checkpoint(&a.out)?;
    if let Some(last) = t.history.last() {
        eprintln!(
            "epoch {}: mean loss {:.6}, checkpoint at {}",
            last.epoch,
            last.mean_total_loss,
            a.out.display()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = dataio::load(&a.data)?;
    let t = Trainer::resume(&a.model, &ds)?;
    let unseen = match a.split.as_str() {
        "seen" => false,
        "unseen" => true,
        other => return Err(VispeError::Usage(format!("unknown split '{other}'"))),
    };
    let config_echo =
        serde_json::to_value(&t.config).map_err(|e| VispeError::Format(e.to_string()))?;
    let report = evalsuite::evaluate(&t.params, &ds, unseen, a.k, config_echo, a.seed)?;
    let value = serde_json::to_value(&report).map_err(|e| VispeError::Format(e.to_string()))?;
    write_report(&a.report, &value)
}

/// One randomized loss-graph instance for a finite-difference comparison.
fn random_graph_spec(mode: Mode, obs_dim: usize, batch: usize, seed: u64) -> LossGraphSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mk = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    };
    match mode {
        Mode::Pe | Mode::Mvspe | Mode::Vispe => LossGraphSpec::Prototype {
            anchors: mk(batch),
            protos_1: mk(batch),
            protos_2: mk(batch),
            tau: 0.05,
            alpha: if mode == Mode::Vispe { 5.0 } else { 0.0 },
            stop_grad_protos: false,
        },
        Mode::Instance => LossGraphSpec::Instance {
            anchors: mk(batch),
            targets: (0..batch).collect(),
        },
        Mode::Supervised => LossGraphSpec::Supervised {
            anchors: mk(batch),
            labels: (0..batch).map(|i| i % 3).collect(),
        },
        Mode::Triplet => LossGraphSpec::Triplet {
            anchors: mk(batch),
            positives: mk(batch),
            negatives: mk(batch),
            margin: 1.0,
        },
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let modes: Vec<Mode> = if a.mode == "all" {
        Mode::ALL.to_vec()
    } else {
        vec![a.mode.parse()?]
    };
    let obs_dim = 10;
    let batch = 4;
    let arch = embedder::Arch::new(obs_dim, vec![8, 6], 5);
    let mut worst: f64 = 0.0;
    for &mode in &modes {
        let params = embedder::init(&arch, a.seed)?;
        let head = LinearHead::init(batch.max(3), arch.embed_dim, a.seed ^ 1);
        let spec = random_graph_spec(mode, obs_dim, batch, a.seed ^ 2);
        let err = embedder::gradient_check(
            &params,
            &|_h| spec.clone(),
            &head,
            a.eps,
            200,
            a.seed ^ 3,
        )?;
        println!("{:<12} max relative error {err:.3e}", mode.as_str());
        worst = worst.max(err);
    }
    if worst >= 1e-4 && !a.no_strict {
        return Err(VispeError::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} >= 1e-4"
        )));
    }
    Ok(())
}

/// Train one run and return its final unseen-class KNN accuracy.
fn run_cell(
    ds: &MultiviewDataset,
    mode: Mode,
    overrides: &BTreeMap<String, String>,
    threshold: Option<f64>,
    seed: u64,
) -> Result<f64> {
    let mut config = trainer::build_config(mode, overrides)?;
    if let Some(t) = threshold {
        config.threshold = t;
    }
    config.seed = seed;
    let mut t = Trainer::new(config, ds)?;
    t.run(ds, None)?;
    evalsuite::unseen_knn_accuracy(&t.params, ds)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn ablate_threshold(a: AblateThresholdArgs) -> Result<()> {
    if a.thresholds.is_empty() {
        return Err(VispeError::Usage("no thresholds given".into()));
    }
    if a.seeds == 0 {
        return Err(VispeError::Usage("--seeds must be positive".into()));
    }
    let ds = dataio::load(&a.data)?;
    let overrides = load_config_overrides(&a.config)?;
    let mut thresholds = a.thresholds.clone();
    thresholds.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut rows = Vec::new();
    for &t in &thresholds {
        let mut accs = Vec::new();
        for seed in 0..a.seeds {
            accs.push(run_cell(&ds, Mode::Vispe, &overrides, Some(t), seed)?);
        }
        let (mean, std) = mean_std(&accs);
        rows.push(serde_json::json!({
            "threshold": t,
            "unseen_knn_mean": mean,
            "unseen_knn_std": std,
            "runs": accs,
        }));
    }
    let value = serde_json::json!({
        "sweep": "threshold",
        "seeds": a.seeds,
        "config_overrides": overrides,
        "rows": rows,
    });
    write_report(&a.report, &value)
}

fn ablate_grid(a: AblateGridArgs) -> Result<()> {
    if a.objects.is_empty() || a.views.is_empty() {
        return Err(VispeError::Usage("empty --objects or --views list".into()));
    }
    let ds = dataio::load(&a.data)?;
    let overrides = load_config_overrides(&a.config)?;
    let mut cells = Vec::new();
    for &o in &a.objects {
        for &v in &a.views {
            let sub = dataio::subsample(&ds, o, v, a.seed);
            let acc = run_cell(&sub, Mode::Vispe, &overrides, None, a.seed)?;
            cells.push(serde_json::json!({
                "objects_per_class": o,
                "views_per_object": v,
                "unseen_knn_accuracy": acc,
            }));
        }
    }
    // monotone tendency is reported only; desk-scale runs are noisy
    let accs: Vec<f64> = cells
        .iter()
        .map(|c| c["unseen_knn_accuracy"].as_f64().unwrap())
        .collect();
    let monotone = accs.windows(2).all(|w| w[1] >= w[0] - 0.05);
    let value = serde_json::json!({
        "sweep": "grid",
        "seed": a.seed,
        "config_overrides": overrides,
        "cells": cells,
        "roughly_monotone": monotone,
    });
    write_report(&a.report, &value)
}

fn export(a: ExportArgs) -> Result<()> {
    let ds = dataio::load(&a.data)?;
    let t = Trainer::resume(&a.model, &ds)?;
    evalsuite::export_embeddings(&t.params, &ds, &a.out)?;
    eprintln!("wrote embeddings for {} views to {}", ds.total_views(), a.out.display());
    Ok(())
}
