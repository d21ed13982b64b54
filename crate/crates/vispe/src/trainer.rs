//! SGD training loop over all modes, with exact-resume checkpointing and
//! per-epoch history.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::MultiviewDataset;
use crate::embedder::{
    self, Arch, EmbedderParams, Gradients, LinearHead, LossGraph,
};
use crate::error::{Result, VispeError};
use crate::protobank::{self, BankState, MinibatchPlan, PrototypeBank, RngState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Instance,
    Pe,
    Mvspe,
    Vispe,
    Triplet,
    Supervised,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Instance,
        Mode::Pe,
        Mode::Mvspe,
        Mode::Vispe,
        Mode::Triplet,
        Mode::Supervised,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Instance => "instance",
            Mode::Pe => "pe",
            Mode::Mvspe => "mvspe",
            Mode::Vispe => "vispe",
            Mode::Triplet => "triplet",
            Mode::Supervised => "supervised",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = VispeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(Mode::Instance),
            "pe" => Ok(Mode::Pe),
            "mvspe" => Ok(Mode::Mvspe),
            "vispe" => Ok(Mode::Vispe),
            "triplet" => Ok(Mode::Triplet),
            "supervised" => Ok(Mode::Supervised),
            other => Err(VispeError::Usage(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleGranularity {
    Epoch,
    Iteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub tau: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub m: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub stop_grad_protos: bool,
    pub resample_granularity: ResampleGranularity,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub margin: f64,
    pub exclude_anchor_proto: bool,
    /// Evaluate unseen-class KNN accuracy every this many epochs (0 = never).
    pub eval_every: usize,
}

impl TrainConfig {
    /// Shared training recipe defaults for a mode (desk-scale epoch count).
    pub fn default_for(mode: Mode) -> Self {
        let (alpha, threshold) = match mode {
            Mode::Pe => (0.0, 0.0),
            Mode::Mvspe => (0.0, 0.5),
            Mode::Vispe => (5.0, 0.5),
            _ => (0.0, 0.0),
        };
        TrainConfig {
            mode,
            tau: 0.05,
            alpha,
            threshold,
            m: 32,
            lr: 0.001,
            epochs: 100,
            seed: 0,
            stop_grad_protos: false,
            resample_granularity: ResampleGranularity::Epoch,
            hidden_dims: vec![128, 64],
            embed_dim: 32,
            margin: 1.0,
            exclude_anchor_proto: false,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(VispeError::Config("tau must be > 0".into()));
        }
        if self.alpha < 0.0 {
            return Err(VispeError::Config("alpha must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(VispeError::Config("t must be in [0, 1]".into()));
        }
        if self.lr < 0.0 {
            return Err(VispeError::Config("lr must be >= 0".into()));
        }
        if self.m < 1 {
            return Err(VispeError::Config("m must be >= 1".into()));
        }
        match self.mode {
            Mode::Pe => {
                if self.threshold != 0.0 {
                    return Err(VispeError::Config(
                        "pe mode fixes prototypes: t must be 0 (use mvspe for t > 0)".into(),
                    ));
                }
                if self.alpha != 0.0 {
                    return Err(VispeError::Config(
                        "pe mode has no consistency term: alpha must be 0".into(),
                    ));
                }
            }
            Mode::Mvspe => {
                if self.alpha != 0.0 {
                    return Err(VispeError::Config(
                        "mvspe has no consistency term: alpha must be 0 (use vispe)".into(),
                    ));
                }
            }
            Mode::Vispe => {
                if self.alpha <= 0.0 {
                    return Err(VispeError::Config(
                        "vispe requires alpha > 0 (use mvspe for alpha = 0)".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Parse `key = value` lines (`#` comments). Unknown keys are rejected.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    const KNOWN: &[&str] = &[
        "mode",
        "tau",
        "alpha",
        "t",
        "m",
        "lr",
        "epochs",
        "seed",
        "stop_grad_protos",
        "resample_granularity",
        "hidden_dims",
        "embed_dim",
        "margin",
        "exclude_anchor_proto",
        "eval_every",
    ];
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            VispeError::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim();
        if !KNOWN.contains(&key) {
            return Err(VispeError::Config(format!(
                "line {}: unknown key '{key}'",
                lineno + 1
            )));
        }
        out.insert(key.to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// Build a validated config from mode defaults plus parsed overrides.
pub fn build_config(mode: Mode, overrides: &BTreeMap<String, String>) -> Result<TrainConfig> {
    let mode = match overrides.get("mode") {
        Some(m) => m.parse()?,
        None => mode,
    };
    let mut cfg = TrainConfig::default_for(mode);
    for (key, value) in overrides {
        let bad =
            |e: &dyn std::fmt::Display| VispeError::Config(format!("key '{key}': {e}"));
        match key.as_str() {
            "mode" => {}
            "tau" => cfg.tau = value.parse().map_err(|e| bad(&e))?,
            "alpha" => cfg.alpha = value.parse().map_err(|e| bad(&e))?,
            "t" => cfg.threshold = value.parse().map_err(|e| bad(&e))?,
            "m" => cfg.m = value.parse().map_err(|e| bad(&e))?,
            "lr" => cfg.lr = value.parse().map_err(|e| bad(&e))?,
            "epochs" => cfg.epochs = value.parse().map_err(|e| bad(&e))?,
            "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
            "stop_grad_protos" => cfg.stop_grad_protos = value.parse().map_err(|e| bad(&e))?,
            "resample_granularity" => {
                cfg.resample_granularity = match value.as_str() {
                    "epoch" => ResampleGranularity::Epoch,
                    "iteration" => ResampleGranularity::Iteration,
                    other => {
                        return Err(VispeError::Config(format!(
                            "resample_granularity must be 'epoch' or 'iteration', got '{other}'"
                        )))
                    }
                }
            }
            "hidden_dims" => {
                cfg.hidden_dims = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse().map_err(|e| bad(&e)))
                    .collect::<Result<_>>()?
            }
            "embed_dim" => cfg.embed_dim = value.parse().map_err(|e| bad(&e))?,
            "margin" => cfg.margin = value.parse().map_err(|e| bad(&e))?,
            "exclude_anchor_proto" => {
                cfg.exclude_anchor_proto = value.parse().map_err(|e| bad(&e))?
            }
            "eval_every" => cfg.eval_every = value.parse().map_err(|e| bad(&e))?,
            _ => unreachable!("unknown keys rejected by parse_config_text"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub mean_l_kl: f64,
    pub resample_count: usize,
    pub wall_time_s: f64,
    pub unseen_knn_accuracy: Option<f64>,
}

pub type TrainHistory = Vec<EpochStats>;

/// θ ← θ − lr·g, no momentum or weight decay.
pub fn sgd_step(params: &mut EmbedderParams, grads: &Gradients, lr: f64) -> Result<()> {
    if params.layers.len() != grads.layers.len() {
        return Err(VispeError::Config("gradient shape mismatch".into()));
    }
    for (l, g) in params.layers.iter_mut().zip(&grads.layers) {
        if l.w.len() != g.w.len() || l.b.len() != g.b.len() {
            return Err(VispeError::Config("gradient shape mismatch".into()));
        }
        for (w, gw) in l.w.iter_mut().zip(&g.w) {
            *w -= lr * gw;
        }
        for (b, gb) in l.b.iter_mut().zip(&g.b) {
            *b -= lr * gb;
        }
    }
    Ok(())
}

pub fn sgd_step_head(head: &mut LinearHead, grads: &LinearHead, lr: f64) {
    for (w, g) in head.w.iter_mut().zip(&grads.w) {
        *w -= lr * g;
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub params: EmbedderParams,
    pub head: Option<LinearHead>,
    pub bank: PrototypeBank,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub history: TrainHistory,
    train_ids: Vec<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig, ds: &MultiviewDataset) -> Result<Trainer> {
        config.validate()?;
        let train_ids = ds.train_object_ids();
        if train_ids.is_empty() {
            return Err(VispeError::Config("dataset has no training instances".into()));
        }
        if config.m > train_ids.len() {
            return Err(VispeError::Config(format!(
                "m = {} exceeds {} training instances",
                config.m,
                train_ids.len()
            )));
        }
        let arch = Arch::new(ds.obs_dim, config.hidden_dims.clone(), config.embed_dim);
        let params = embedder::init(&arch, config.seed)?;
        let head = match config.mode {
            Mode::Instance => Some(LinearHead::init(
                train_ids.len(),
                config.embed_dim,
                config.seed ^ 0x1157,
            )),
            Mode::Supervised => Some(LinearHead::init(
                ds.seen_classes.len(),
                config.embed_dim,
                config.seed ^ 0x5afe,
            )),
            _ => None,
        };
        let bank = protobank::init_bank(ds, config.threshold, config.seed ^ 0xbaa7)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a31);
        Ok(Trainer {
            config,
            params,
            head,
            bank,
            rng,
            epoch: 0,
            history: Vec::new(),
            train_ids,
        })
    }

    fn instance_slot(&self, object_id: usize) -> usize {
        self.train_ids
            .binary_search(&object_id)
            .expect("object id is a training instance")
    }

    fn step(&mut self, ds: &MultiviewDataset, plan: &MinibatchPlan) -> Result<(f64, f64)> {
        let view = |id: usize, v: usize| embedder::view_to_f64(&ds.objects[id].views[v]);
        let anchors: Vec<Vec<f64>> = plan
            .instance_ids
            .iter()
            .zip(&plan.anchor_views)
            .map(|(&id, &v)| view(id, v))
            .collect();
        let (loss, kl_part, grads, head_grads) = match self.config.mode {
            Mode::Pe | Mode::Mvspe | Mode::Vispe => {
                let protos_1: Vec<Vec<f64>> = plan
                    .instance_ids
                    .iter()
                    .zip(&plan.proto_views_1)
                    .map(|(&id, &v)| view(id, v))
                    .collect();
                let protos_2: Vec<Vec<f64>> = plan
                    .instance_ids
                    .iter()
                    .zip(&plan.proto_views_2)
                    .map(|(&id, &v)| view(id, v))
                    .collect();
                let graph = LossGraph::Prototype {
                    anchors: &anchors,
                    protos_1: &protos_1,
                    protos_2: &protos_2,
                    tau: self.config.tau,
                    alpha: self.config.alpha,
                    stop_grad_protos: self.config.stop_grad_protos,
                };
                let (loss, grads, _) = embedder::loss_and_grads(&self.params, &graph)?;
                // mean KL component for the history log
                let kl = if self.config.alpha > 0.0 {
                    mean_kl(&self.params, &anchors, &protos_1, &protos_2, self.config.tau)?
                } else {
                    0.0
                };
                (loss, kl, grads, None)
            }
            Mode::Instance => {
                let targets: Vec<usize> = plan
                    .instance_ids
                    .iter()
                    .map(|&id| self.instance_slot(id))
                    .collect();
                let head = self.head.as_ref().expect("instance mode has a head");
                let graph = LossGraph::Instance {
                    anchors: &anchors,
                    targets: &targets,
                    head,
                };
                let (loss, grads, hg) = embedder::loss_and_grads(&self.params, &graph)?;
                (loss, 0.0, grads, hg)
            }
            Mode::Supervised => {
                let labels: Vec<usize> = plan
                    .instance_ids
                    .iter()
                    .map(|&id| {
                        let class = ds.objects[id].class_id;
                        ds.seen_classes
                            .binary_search(&class)
                            .expect("training object has a seen class")
                    })
                    .collect();
                let head = self.head.as_ref().expect("supervised mode has a head");
                let graph = LossGraph::Supervised {
                    anchors: &anchors,
                    labels: &labels,
                    head,
                };
                let (loss, grads, hg) = embedder::loss_and_grads(&self.params, &graph)?;
                (loss, 0.0, grads, hg)
            }
            Mode::Triplet => {
                let mut positives = Vec::with_capacity(plan.len());
                let mut negatives = Vec::with_capacity(plan.len());
                for (slot, &id) in plan.instance_ids.iter().enumerate() {
                    let v = ds.objects[id].n_views();
                    let anchor_view = plan.anchor_views[slot];
                    let pos_view = if v >= 2 {
                        let mut j = self.rng.gen_range(0..v - 1);
                        if j >= anchor_view {
                            j += 1;
                        }
                        j
                    } else {
                        0
                    };
                    let other = loop {
                        let cand = *self.train_ids.choose(&mut self.rng).unwrap();
                        if cand != id || self.train_ids.len() == 1 {
                            break cand;
                        }
                    };
                    let neg_view = self.rng.gen_range(0..ds.objects[other].n_views());
                    positives.push(view(id, pos_view));
                    negatives.push(view(other, neg_view));
                }
                let graph = LossGraph::Triplet {
                    anchors: &anchors,
                    positives: &positives,
                    negatives: &negatives,
                    margin: self.config.margin,
                };
                let (loss, grads, _) = embedder::loss_and_grads(&self.params, &graph)?;
                (loss, 0.0, grads, None)
            }
        };
        sgd_step(&mut self.params, &grads, self.config.lr)?;
        if let (Some(head), Some(hg)) = (self.head.as_mut(), head_grads.as_ref()) {
            sgd_step_head(head, hg, self.config.lr);
        }
        Ok((loss, kl_part))
    }

    /// Run one epoch: ⌈N/m⌉ minibatches over a fresh permutation of the
    /// training instances, then (for epoch granularity) one resample pass.
    pub fn run_epoch(
        &mut self,
        ds: &MultiviewDataset,
        eval_hook: Option<&dyn Fn(&EmbedderParams) -> f64>,
    ) -> Result<()> {
        let start = Instant::now();
        let mut ids = self.train_ids.clone();
        ids.shuffle(&mut self.rng);
        let m = self.config.m;
        let mut loss_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut iters = 0usize;
        let mut resample_count = 0usize;
        for chunk in ids.chunks(m) {
            let plan = protobank::plan_for_ids(
                ds,
                &self.bank,
                chunk,
                self.config.exclude_anchor_proto,
                &mut self.rng,
            );
            let (loss, kl) = self.step(ds, &plan).map_err(|e| match e {
                VispeError::Numeric(msg) => VispeError::Numeric(format!(
                    "epoch {}, iteration {}: {msg}",
                    self.epoch, iters
                )),
                other => other,
            })?;
            loss_sum += loss;
            kl_sum += kl;
            iters += 1;
            if self.config.resample_granularity == ResampleGranularity::Iteration {
                resample_count += protobank::maybe_resample(&mut self.bank, ds);
            }
        }
        if self.config.resample_granularity == ResampleGranularity::Epoch {
            resample_count = protobank::maybe_resample(&mut self.bank, ds);
        }
        self.epoch += 1;
        let unseen_knn_accuracy = match eval_hook {
            Some(hook)
                if self.config.eval_every > 0 && self.epoch % self.config.eval_every == 0 =>
            {
                Some(hook(&self.params))
            }
            _ => None,
        };
        self.history.push(EpochStats {
            epoch: self.epoch,
            mean_total_loss: loss_sum / iters.max(1) as f64,
            mean_l_kl: kl_sum / iters.max(1) as f64,
            resample_count,
            wall_time_s: start.elapsed().as_secs_f64(),
            unseen_knn_accuracy,
        });
        Ok(())
    }

    pub fn run(
        &mut self,
        ds: &MultiviewDataset,
        eval_hook: Option<&dyn Fn(&EmbedderParams) -> f64>,
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch(ds, eval_hook)?;
        }
        Ok(())
    }

    // ---- persistence ----

    pub fn checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| VispeError::io(dir, e))?;
        let mut flat = self.params.to_flat();
        let head_rows = self.head.as_ref().map(|h| h.rows);
        if let Some(h) = &self.head {
            flat.extend_from_slice(&h.w);
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            arch: self.params.arch.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            bank: self.bank.to_state(),
            trainer_rng: RngState::capture(&self.rng),
            head_rows,
            train_instances: self.train_ids.len(),
            weight_layout: "embedder layers input-to-output (row-major W then b), then head rows"
                .to_string(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| VispeError::Format(e.to_string()))?;
        let model_path = dir.join("model.json");
        std::fs::write(&model_path, json).map_err(|e| VispeError::io(&model_path, e))?;
        let weights_path = dir.join("weights.bin");
        let mut bytes = Vec::with_capacity(flat.len() * 8);
        for v in &flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&weights_path, bytes).map_err(|e| VispeError::io(&weights_path, e))?;
        let history_path = dir.join("history.json");
        let json = serde_json::to_string_pretty(&self.history)
            .map_err(|e| VispeError::Format(e.to_string()))?;
        std::fs::write(&history_path, json).map_err(|e| VispeError::io(&history_path, e))?;
        Ok(())
    }

    pub fn resume(dir: &Path, ds: &MultiviewDataset) -> Result<Trainer> {
        let model_path = dir.join("model.json");
        let json =
            std::fs::read_to_string(&model_path).map_err(|e| VispeError::io(&model_path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&json).map_err(|e| VispeError::Format(e.to_string()))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(VispeError::Format(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        if manifest.arch.input_dim != ds.obs_dim {
            return Err(VispeError::Config(format!(
                "checkpoint expects obs_dim {}, dataset has {}",
                manifest.arch.input_dim, ds.obs_dim
            )));
        }
        let train_ids = ds.train_object_ids();
        if train_ids.len() != manifest.train_instances {
            return Err(VispeError::Config(format!(
                "checkpoint was trained on {} instances, dataset has {}",
                manifest.train_instances,
                train_ids.len()
            )));
        }
        let weights_path = dir.join("weights.bin");
        let mut bytes = Vec::new();
        std::fs::File::open(&weights_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| VispeError::io(&weights_path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(VispeError::Format("weights.bin length not a multiple of 8".into()));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let n_embedder: usize = manifest
            .arch
            .layer_shapes()
            .iter()
            .map(|(r, c)| r * c + r)
            .sum();
        let head = match manifest.head_rows {
            Some(rows) => {
                let cols = manifest.arch.embed_dim;
                if flat.len() != n_embedder + rows * cols {
                    return Err(VispeError::Format("weights.bin size mismatch".into()));
                }
                Some(LinearHead {
                    w: flat[n_embedder..].to_vec(),
                    rows,
                    cols,
                })
            }
            None => {
                if flat.len() != n_embedder {
                    return Err(VispeError::Format("weights.bin size mismatch".into()));
                }
                None
            }
        };
        let params = EmbedderParams::from_flat(&manifest.arch, &flat[..n_embedder])?;
        let history_path = dir.join("history.json");
        let history: TrainHistory = match std::fs::read_to_string(&history_path) {
            Ok(s) => serde_json::from_str(&s).map_err(|e| VispeError::Format(e.to_string()))?,
            Err(_) => Vec::new(),
        };
        Ok(Trainer {
            config: manifest.config,
            params,
            head,
            bank: PrototypeBank::from_state(&manifest.bank),
            rng: manifest.trainer_rng.restore(),
            epoch: manifest.epoch,
            history,
            train_ids,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    arch: Arch,
    config: TrainConfig,
    epoch: usize,
    bank: BankState,
    trainer_rng: RngState,
    head_rows: Option<usize>,
    train_instances: usize,
    weight_layout: String,
}

fn mean_kl(
    params: &EmbedderParams,
    anchors: &[Vec<f64>],
    protos_1: &[Vec<f64>],
    protos_2: &[Vec<f64>],
    tau: f64,
) -> Result<f64> {
    use crate::losses;
    let p1: Vec<Vec<f64>> = protos_1
        .iter()
        .map(|x| embedder::embed(params, x).map(|e| e.v))
        .collect::<Result<_>>()?;
    let p2: Vec<Vec<f64>> = protos_2
        .iter()
        .map(|x| embedder::embed(params, x).map(|e| e.v))
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    for x in anchors {
        let a = embedder::embed(params, x)?.v;
        let post1 = losses::prototype_posterior(&a, &p1, tau)?;
        let post2 = losses::prototype_posterior(&a, &p2, tau)?;
        sum += losses::kl_div(&post1, &post2)?;
    }
    Ok(sum / anchors.len() as f64)
}

/// Convenience wrapper: train from scratch.
pub fn train(config: &TrainConfig, ds: &MultiviewDataset) -> Result<(Trainer, TrainHistory)> {
    let mut trainer = Trainer::new(config.clone(), ds)?;
    trainer.run(ds, None)?;
    let history = trainer.history.clone();
    Ok((trainer, history))
}
