//! Joint training of the guidance encoder, endpoint diffusion, endpoint
//! predictor and trajectory decoder, plus checkpoints and ablation wiring.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ded_autograd::{Adam, Gradients, Graph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Scene};
use crate::model::{LossParts, LossWeights, Model, ModelConfig, Normalizer};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    Full,
    NoEd,
    NoEp,
    None,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoEp, Variant::NoEd, Variant::None];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEd => "no_ed",
            Variant::NoEp => "no_ep",
            Variant::None => "none",
        }
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
        match s {
            "full" => Ok(Variant::Full),
            "no_ed" => Ok(Variant::NoEd),
            "no_ep" => Ok(Variant::NoEp),
            "none" => Ok(Variant::None),
            other => Err(Error::usage(format!(
                "unknown variant '{other}' (expected full, no_ed, no_ep or none)"
            ))),
        }
    }
}

/// Where the decoder's endpoint input comes from at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndpointSource {
    /// EP candidate with the lowest NLL under the ED distribution.
    Calibrated,
    /// Mean of the fitted ED distribution.
    DiffusionMean,
    /// EP candidate with the highest logit.
    MostConfident,
    /// Zero endpoint input.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    pub endpoint_source: EndpointSource,
    pub train_diffusion: bool,
    pub train_endpoint: bool,
}

impl Wiring {
    pub fn uses_diffusion(&self) -> bool {
        matches!(self.endpoint_source, EndpointSource::Calibrated | EndpointSource::DiffusionMean)
    }

    pub fn uses_candidates(&self) -> bool {
        matches!(self.endpoint_source, EndpointSource::Calibrated | EndpointSource::MostConfident)
    }
}

/// Module wiring of each variant. Only modules a variant consumes are
/// trained.
pub fn apply_variant(variant: Variant) -> Wiring {
    let endpoint_source = match variant {
        Variant::Full => EndpointSource::Calibrated,
        Variant::NoEp => EndpointSource::DiffusionMean,
        Variant::NoEd => EndpointSource::MostConfident,
        Variant::None => EndpointSource::None,
    };
    let mut w = Wiring {
        endpoint_source,
        train_diffusion: false,
        train_endpoint: false,
    };
    w.train_diffusion = w.uses_diffusion();
    w.train_endpoint = w.uses_candidates();
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub variant: Variant,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    /// Return the parameters of the epoch with the lowest validation loss
    /// instead of the last epoch.
    pub keep_best: bool,
    /// Final learning rate as a fraction of the initial one, reached by a
    /// cosine decay over the epochs. 1 keeps the rate constant.
    pub final_lr_ratio: f64,
    /// Epochs of linear warmup before the decay starts.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            variant: Variant::Full,
            clip_norm: 10.0,
            keep_best: true,
            final_lr_ratio: 0.1,
            warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::usage("train.batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage("train.learning_rate must be positive"));
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(Error::usage("train.final_lr_ratio must be in (0, 1]"));
        }
        let w = &self.weights;
        for (name, v) in [("w_diff", w.diffusion), ("w_ep", w.endpoint), ("w_traj", w.trajectory)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::usage(format!("loss weight {name} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Per-agent mean losses over the epoch's steps.
    pub train: LossParts,
    pub val: Option<LossParts>,
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"DEDCKPT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: Model,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend(bincode::serialize(self).expect("checkpoint serializes"));
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let body = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| format("not a checkpoint file".into()))?;
        let ckpt: Checkpoint = bincode::deserialize(body).map_err(|e| format(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.model.check_consistency()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
    /// Epoch whose loss went non-finite; the checkpoint then holds the
    /// last finite state.
    pub diverged_at: Option<usize>,
}

impl TrainOutcome {
    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        metrics_jsonl(&self.log)
    }
}

pub fn metrics_jsonl(log: &[EpochMetrics]) -> String {
    log.iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

/// Loss and gradient of a batch of scenes, scenes evaluated in parallel
/// and merged in input order. Gradients are per-agent means.
fn batch_gradients(
    model: &Model,
    scenes: &[&Scene],
    seeds: &[u64],
    variant: Variant,
    weights: &LossWeights,
) -> Result<(LossParts, Gradients)> {
    let results: Vec<Result<(LossParts, Gradients)>> = scenes
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(scene, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new(&model.store);
            let (loss, parts) = model.scene_loss(&mut g, scene, variant, weights, &mut rng)?;
            Ok((parts, g.backward(loss)))
        })
        .collect();
    let mut parts = LossParts::default();
    let mut grads = Gradients::empty(model.store.len());
    for r in results {
        let (p, gr) = r?;
        parts.add(&p);
        grads.merge(&gr);
    }
    grads.scale(1.0 / parts.agents.max(1) as f64);
    Ok((parts, grads))
}

/// Mean validation losses with a fixed noise draw, so epochs compare.
pub fn validation_loss(model: &Model, scenes: &[Scene], variant: Variant, weights: &LossWeights, seed: u64) -> Result<LossParts> {
    let results: Vec<Result<LossParts>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut g = Graph::new(&model.store);
            Ok(model.scene_loss(&mut g, scene, variant, weights, &mut rng)?.1)
        })
        .collect();
    let mut total = LossParts::default();
    for r in results {
        total.add(&r?);
    }
    Ok(total.mean())
}

/// Cosine decay from `learning_rate` at epoch 1 to
/// `learning_rate · final_lr_ratio` at the last epoch.
pub fn learning_rate_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let warm = cfg.warmup_epochs.min(cfg.epochs.saturating_sub(1));
    if epoch <= warm {
        return cfg.learning_rate * epoch as f64 / (warm + 1) as f64;
    }
    let span = cfg.epochs - warm;
    let progress = if span <= 1 {
        0.0
    } else {
        (epoch - warm - 1) as f64 / (span - 1) as f64
    };
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.learning_rate * (cfg.final_lr_ratio + (1.0 - cfg.final_lr_ratio) * cos)
}

/// Trains a fresh model on `split.train`, logging validation losses on
/// `split.val` after every epoch.
pub fn train(split: &DatasetSplit, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::usage("training split is empty"));
    }
    let norm = Normalizer::fit(&split.train);
    let model = Model::new(model_cfg.clone(), norm, cfg.seed)?;
    let mut optimizer = Adam::new(&model.store, cfg.learning_rate);
    if cfg.clip_norm > 0.0 {
        optimizer = optimizer.with_clip_norm(cfg.clip_norm);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        model,
        train: cfg.clone(),
        epoch: 0,
        rng,
        optimizer,
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let val_seed = cfg.seed ^ 0x5eed_0fba;

    for epoch in 1..=cfg.epochs {
        let last_good = ckpt.clone();
        ckpt.optimizer.lr = learning_rate_at(cfg, epoch);
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut ckpt.rng);
        let mut sum = LossParts::default();
        let mut diverged = false;
        for batch in order.chunks(cfg.batch_size) {
            let scenes: Vec<&Scene> = batch.iter().map(|&i| &split.train[i]).collect();
            let seeds: Vec<u64> = (0..scenes.len()).map(|_| ckpt.rng.random()).collect();
            let (parts, grads) = batch_gradients(&ckpt.model, &scenes, &seeds, cfg.variant, &cfg.weights)?;
            if !parts.total.is_finite() || !grads.is_finite() {
                diverged = true;
                break;
            }
            sum.add(&parts);
            ckpt.optimizer.step(&mut ckpt.model.store, &grads);
            if !ckpt.model.store.is_finite() {
                diverged = true;
                break;
            }
        }
        if diverged {
            log::warn!("epoch {epoch}: non-finite loss, stopping");
            return Ok(TrainOutcome {
                checkpoint: best.map_or(last_good, |(_, c)| c),
                log,
                diverged_at: Some(epoch),
            });
        }
        ckpt.epoch = epoch;
        let val = if split.val.is_empty() {
            None
        } else {
            Some(validation_loss(&ckpt.model, &split.val, cfg.variant, &cfg.weights, val_seed)?)
        };
        let metrics = EpochMetrics {
            epoch,
            train: sum.mean(),
            val,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {}",
            metrics.train.total,
            val.map_or("-".to_string(), |v| format!("{:.4}", v.total))
        );
        if let (true, Some(v)) = (cfg.keep_best, val) {
            if v.total.is_finite() && best.as_ref().is_none_or(|(b, _)| v.total < *b) {
                best = Some((v.total, ckpt.clone()));
            }
        }
        log.push(metrics);
    }
    let checkpoint = match best {
        Some((_, mut b)) => {
            // Keep the final optimizer and RNG so training could resume.
            b.rng = ckpt.rng;
            b.optimizer = ckpt.optimizer;
            b.epoch = ckpt.epoch;
            b
        }
        None => ckpt,
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        diverged_at: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_dataset, synth_scenarios, ScenarioKind};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            temporal_width: 8,
            spatial_width: 8,
            diffusion_steps: 10,
            samples: 8,
            denoiser_hidden: 16,
            step_embedding: 8,
            diffusion_draws: 1,
            ep_layers: 1,
            ep_heads: 2,
            ep_d_model: 8,
            candidates: 3,
            tp_heads: 2,
            tp_d_model: 8,
            ..ModelConfig::default()
        }
    }

    fn tiny_split() -> DatasetSplit {
        let scenes = synth_scenarios(ScenarioKind::LaneChange, 12, 3).unwrap();
        split_dataset(&scenes, 3).unwrap()
    }

    #[test]
    fn variants_parse_and_print() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("half".parse::<Variant>(), Err(Error::Usage(_))));
    }

    #[test]
    fn no_ed_and_no_ep_differ_only_in_endpoint_source() {
        let a = apply_variant(Variant::NoEd);
        let b = apply_variant(Variant::NoEp);
        assert_ne!(a.endpoint_source, b.endpoint_source);
        assert!(a.uses_candidates() && !a.uses_diffusion());
        assert!(b.uses_diffusion() && !b.uses_candidates());
        let none = apply_variant(Variant::None);
        assert!(!none.uses_candidates() && !none.uses_diffusion());
    }

    #[test]
    fn learning_rate_decays_from_initial_to_final() {
        let cfg = TrainConfig {
            epochs: 11,
            learning_rate: 1e-3,
            final_lr_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert!((learning_rate_at(&cfg, 1) - 1e-3).abs() < 1e-15);
        assert!((learning_rate_at(&cfg, 6) - 5.5e-4).abs() < 1e-15);
        assert!((learning_rate_at(&cfg, 11) - 1e-4).abs() < 1e-15);
        let warm = TrainConfig { warmup_epochs: 3, ..cfg };
        assert!((learning_rate_at(&warm, 1) - 2.5e-4).abs() < 1e-15);
        assert!((learning_rate_at(&warm, 3) - 7.5e-4).abs() < 1e-15);
        assert!((learning_rate_at(&warm, 4) - 1e-3).abs() < 1e-15);
        assert!((learning_rate_at(&warm, 11) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.weights.endpoint = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn initial_loss_is_finite_for_many_seeds() {
        let split = tiny_split();
        for seed in 0..10 {
            let model = Model::new(tiny_model(), Normalizer::fit(&split.train), seed).unwrap();
            let v = validation_loss(&model, &split.train, Variant::Full, &LossWeights::default(), seed).unwrap();
            assert!(v.total.is_finite(), "seed {seed}");
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let split = tiny_split();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&split, &tiny_model(), &cfg).unwrap();
        let bytes = out.checkpoint.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[1..], Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }
}
