//! Run configuration: one TOML document with a section per module.
//! Unknown keys are rejected and every section is validated before use.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::TauMode;
use crate::nn::loss::FocalParams;
use crate::nn::optim::{AdamWConfig, LrSchedule};
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_queries: usize,
    /// Initial queries per timestamp `0..=f`; also the assignment quota.
    pub query_split: Vec<usize>,
    pub n_layers: usize,
    pub points_ladder: Vec<usize>,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub tau_mode: TauMode,
    pub freeze_scaling: bool,
    pub temporal_mask: bool,
    pub pe4d: bool,
    pub ego_state: bool,
    /// Forecast by re-decoding semantics in place, without moving queries.
    pub freeze_queries: bool,
    /// Bound on per-frame query migration (meters).
    pub max_step: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_queries: 130,
            query_split: vec![90, 10, 10, 10, 10],
            n_layers: 4,
            points_ladder: vec![1, 4, 8, 16],
            embed_dim: 64,
            n_heads: 4,
            tau_mode: TauMode::PerHeadPerQuery,
            freeze_scaling: false,
            temporal_mask: true,
            pe4d: true,
            ego_state: true,
            freeze_queries: false,
            max_step: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 {
            return Err(Error::config("model.n_queries", "must be positive"));
        }
        if self.query_split.iter().sum::<usize>() != self.n_queries {
            return Err(Error::config(
                "model.query_split",
                format!("sums to {}, expected n_queries = {}", self.query_split.iter().sum::<usize>(), self.n_queries),
            ));
        }
        if self.query_split.first().copied().unwrap_or(0) == 0 {
            return Err(Error::config("model.query_split", "the current-frame group must be non-empty"));
        }
        if self.n_layers == 0 || self.points_ladder.len() != self.n_layers {
            return Err(Error::config(
                "model.points_ladder",
                format!("needs exactly n_layers = {} positive entries", self.n_layers),
            ));
        }
        if self.points_ladder.iter().any(|&p| p == 0) || self.points_ladder.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("model.points_ladder", "entries must be positive and non-decreasing"));
        }
        if self.embed_dim == 0 || self.embed_dim % 8 != 0 {
            return Err(Error::config("model.embed_dim", "must be a positive multiple of 8"));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::config("model.n_heads", "must divide embed_dim"));
        }
        if !(self.max_step.is_finite() && self.max_step > 0.0) {
            return Err(Error::config("model.max_step", "must be positive"));
        }
        Ok(())
    }

    /// Timestamps span `0..=f`.
    pub fn future_frames(&self) -> usize {
        self.query_split.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_chamfer: f64,
    pub lambda_focal: f64,
    pub lambda_plan: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_chamfer: 1.0,
            lambda_focal: 1.0,
            lambda_plan: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossConfig {
    pub fn focal(&self) -> FocalParams {
        FocalParams {
            gamma: self.focal_gamma,
            alpha: self.focal_alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("loss.lambda_chamfer", self.lambda_chamfer),
            ("loss.lambda_focal", self.lambda_focal),
            ("loss.lambda_plan", self.lambda_plan),
            ("loss.focal_gamma", self.focal_gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(k, "must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::config("loss.focal_alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub e2e_epochs: usize,
    /// Sequences generated for training (seeds `seed .. seed + n`).
    pub sequences: usize,
    /// Passes over each sequence per epoch.
    pub repeats: usize,
    pub shuffle: bool,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Held-out sequences scored after every epoch (0 disables).
    pub validation_sequences: usize,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 2,
            e2e_epochs: 8,
            sequences: 64,
            repeats: 1,
            shuffle: true,
            checkpoint_every: 1,
            validation_sequences: 8,
            schedule: LrSchedule::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_epochs + self.e2e_epochs == 0 {
            return Err(Error::config("train.e2e_epochs", "at least one epoch is required"));
        }
        if self.sequences == 0 {
            return Err(Error::config("train.sequences", "must be positive"));
        }
        if self.repeats == 0 {
            return Err(Error::config("train.repeats", "must be positive"));
        }
        let s = &self.schedule;
        if !(s.peak.is_finite() && s.peak > 0.0) {
            return Err(Error::config("train.schedule.peak", "must be positive"));
        }
        if !(s.floor.is_finite() && s.floor >= 0.0 && s.floor <= s.peak) {
            return Err(Error::config("train.schedule.floor", "must lie in [0, peak]"));
        }
        if s.total_steps != 0 && s.total_steps < s.warmup_steps {
            return Err(Error::config("train.schedule.total_steps", "must be 0 (whole run) or >= warmup_steps"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(Error::config("train.optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("train.optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("train.optimizer.eps", "must be positive"));
        }
        if !(o.weight_decay >= 0.0 && o.clip_norm >= 0.0) {
            return Err(Error::config("train.optimizer", "weight_decay and clip_norm must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sequences: usize,
    /// Held-out seeds start at `seed + seed_offset`.
    pub seed_offset: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sequences: 64,
            seed_offset: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset root; when unset, sequences are generated in memory.
    pub data_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: None,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// `text` with every line prefixed by `# `, for echoing a config into
/// text outputs.
pub fn comment_block(text: &str) -> String {
    let mut s = String::new();
    for line in text.lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section and the constraints between them.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.model.future_frames() != self.world.future_frames {
            return Err(Error::config(
                "model.query_split",
                format!(
                    "needs future_frames + 1 = {} groups, got {}",
                    self.world.future_frames + 1,
                    self.model.query_split.len()
                ),
            ));
        }
        if self.eval.sequences == 0 {
            return Err(Error::config("eval.sequences", "must be positive"));
        }
        // TOML integers are signed
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", format!("must be at most {}", i64::MAX)));
        }
        if self.eval.seed_offset > i64::MAX as u64 {
            return Err(Error::config("eval.seed_offset", format!("must be at most {}", i64::MAX)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn seeds_must_fit_a_toml_integer() {
        let mut cfg = RunConfig::default();
        cfg.seed = i64::MAX as u64;
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        cfg.seed += 1;
        assert!(cfg.validate().unwrap_err().to_string().contains("seed"));
    }

    #[test]
    fn partial_nested_sections_fill_defaults() {
        let c = RunConfig::from_toml("[train.schedule]\npeak = 0.001\n[train.optimizer]\nclip_norm = 5.0\n").unwrap();
        assert_eq!(c.train.schedule.peak, 1e-3);
        assert_eq!(c.train.schedule.total_steps, 0);
        assert_eq!(c.train.optimizer.clip_norm, 5.0);
        assert_eq!(c.train.optimizer.beta1, 0.9);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_toml("[model]\nn_querys = 3\n").unwrap_err();
        assert!(err.to_string().contains("n_querys"), "{err}");
    }

    #[test]
    fn split_mismatch_names_key() {
        let err = RunConfig::from_toml("[model]\nn_queries = 100\n").unwrap_err();
        assert!(err.to_string().contains("model.query_split"), "{err}");
    }

    #[test]
    fn class_count_names_key() {
        let err = RunConfig::from_toml("[world]\nn_classes = 1\n").unwrap_err();
        assert!(err.to_string().contains("world.n_classes"), "{err}");
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let err = RunConfig::from_toml("[world]\nfuture_frames = 3\n").unwrap_err();
        assert!(err.to_string().contains("model.query_split"), "{err}");
    }

    #[test]
    fn ladder_must_match_layers() {
        let err = RunConfig::from_toml("[model]\nn_layers = 3\n").unwrap_err();
        assert!(err.to_string().contains("model.points_ladder"), "{err}");
    }
}
