//! Flat `section.key = value` run configuration with a fixed key registry.

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffusion::Density;
use crate::model::ModelConfig;
use crate::training::{TrainConfig, Variant};
use crate::{Error, Result};

/// Every accepted key with a one-line description.
pub const REGISTRY: &[(&str, &str)] = &[
    ("run.seed", "master seed"),
    ("run.out_dir", "directory for run artifacts"),
    ("data.hist_len", "history frames"),
    ("data.fut_len", "future frames"),
    ("guidance.temporal_width", "LSTM hidden width"),
    ("guidance.spatial_width", "spatial feature width"),
    ("diffusion.steps", "diffusion steps K"),
    ("diffusion.beta_start", "first noise variance"),
    ("diffusion.beta_end", "last noise variance"),
    ("diffusion.samples", "endpoint samples M"),
    ("diffusion.density", "gaussian or kde"),
    ("diffusion.hidden", "denoiser hidden width"),
    ("diffusion.step_embedding", "step embedding width"),
    ("diffusion.train_draws", "noise draws per agent per step"),
    ("ep.layers", "endpoint transformer layers"),
    ("ep.heads", "endpoint attention heads"),
    ("ep.d_model", "endpoint model width"),
    ("ep.candidates", "endpoint candidates C"),
    ("tp.layers", "decoder memory layers"),
    ("tp.heads", "decoder attention heads"),
    ("tp.d_model", "decoder width"),
    ("tp.report_modes", "modes reported per agent"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "scenes per step"),
    ("train.learning_rate", "Adam step size"),
    ("train.w_diff", "diffusion loss weight"),
    ("train.w_ep", "endpoint loss weight"),
    ("train.w_traj", "trajectory loss weight"),
    ("train.variant", "full, no_ed, no_ep or none"),
    ("train.clip_norm", "gradient norm clip, 0 disables"),
    ("train.keep_best", "keep the best validation epoch"),
    ("train.final_lr_ratio", "last-epoch learning rate over the first"),
    ("train.warmup_epochs", "epochs of linear learning-rate warmup"),
    ("eval.seeds", "comma-separated ablation seeds"),
];

/// Merged settings: later layers override earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_known(key: &str) -> bool {
        REGISTRY.iter().any(|(k, _)| *k == key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !Self::is_known(key) {
            return Err(Error::usage(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parses `section.key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("config line {}: expected 'key = value'", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// `key=value` overrides, as given on a command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("override '{}' is not key=value", p.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::usage(format!("config key {key}: cannot parse '{v}'")))
            })
            .transpose()
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        self.parsed("run.seed")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::default();
        macro_rules! field {
            ($key:literal, $f:expr) => {
                if let Some(v) = self.parsed($key)? {
                    $f = v;
                }
            };
        }
        field!("data.hist_len", c.hist_len);
        field!("data.fut_len", c.fut_len);
        field!("guidance.temporal_width", c.temporal_width);
        field!("guidance.spatial_width", c.spatial_width);
        field!("diffusion.steps", c.diffusion_steps);
        field!("diffusion.beta_start", c.beta_start);
        field!("diffusion.beta_end", c.beta_end);
        field!("diffusion.samples", c.samples);
        field!("diffusion.hidden", c.denoiser_hidden);
        field!("diffusion.step_embedding", c.step_embedding);
        field!("diffusion.train_draws", c.diffusion_draws);
        field!("ep.layers", c.ep_layers);
        field!("ep.heads", c.ep_heads);
        field!("ep.d_model", c.ep_d_model);
        field!("ep.candidates", c.candidates);
        field!("tp.layers", c.tp_layers);
        field!("tp.heads", c.tp_heads);
        field!("tp.d_model", c.tp_d_model);
        field!("tp.report_modes", c.report_modes);
        if let Some(d) = self.get("diffusion.density") {
            c.density = d.parse::<Density>()?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        macro_rules! field {
            ($key:literal, $f:expr) => {
                if let Some(v) = self.parsed($key)? {
                    $f = v;
                }
            };
        }
        field!("run.seed", c.seed);
        field!("train.epochs", c.epochs);
        field!("train.batch_size", c.batch_size);
        field!("train.learning_rate", c.learning_rate);
        field!("train.w_diff", c.weights.diffusion);
        field!("train.w_ep", c.weights.endpoint);
        field!("train.w_traj", c.weights.trajectory);
        field!("train.clip_norm", c.clip_norm);
        field!("train.keep_best", c.keep_best);
        field!("train.final_lr_ratio", c.final_lr_ratio);
        field!("train.warmup_epochs", c.warmup_epochs);
        if let Some(v) = self.get("train.variant") {
            c.variant = v.parse::<Variant>()?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn seeds(&self) -> Result<Option<Vec<u64>>> {
        self.get("eval.seeds")
            .map(|s| {
                s.split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<u64>()
                            .map_err(|_| Error::usage(format!("eval.seeds: cannot parse '{p}'")))
                    })
                    .collect()
            })
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut cfg = RunConfig::parse("# run\ntrain.epochs = 7\n\nep.candidates=5 # few\n").unwrap();
        cfg.apply_overrides(&["train.epochs=9"]).unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!(t.epochs, 9);
        assert_eq!(cfg.model_config().unwrap().candidates, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("train.epoch = 3").unwrap_err();
        assert!(matches!(err, Error::Usage(ref m) if m.contains("train.epoch")));
    }

    #[test]
    fn bad_values_are_rejected() {
        let cfg = RunConfig::parse("train.variant = half").unwrap();
        assert!(cfg.train_config().is_err());
        let cfg = RunConfig::parse("ep.heads = x").unwrap();
        assert!(matches!(cfg.model_config(), Err(Error::Usage(_))));
    }

    #[test]
    fn seed_list() {
        let cfg = RunConfig::parse("eval.seeds = 1, 2,3").unwrap();
        assert_eq!(cfg.seeds().unwrap().unwrap(), vec![1, 2, 3]);
    }
}
