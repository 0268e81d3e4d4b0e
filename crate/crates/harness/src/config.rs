//! Run configuration, loaded from TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use fasd::distill::DistillConfig;
use fasd::model::ModelConfig;
use fasd::optim::AdamWConfig;
use serde::{Deserialize, Serialize};

use crate::scene::SceneSpec;

/// Environment variable naming the root for all run outputs.
pub const OUT_ENV: &str = "FASD_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the configured rate to zero over all steps.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if total == 0 => base,
            LrSchedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// One teacher and one student run per seed.
    pub seeds: Vec<u64>,
    /// BEV IoU threshold for evaluation.
    pub eval_iou: f64,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            teacher_epochs: 8,
            student_epochs: 8,
            train_scenes: 200,
            val_scenes: 50,
            seeds: vec![1, 2, 3],
            eval_iou: 0.5,
            schedule: LrSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub optim: AdamWConfig,
    pub train: TrainConfig,
    pub data: SceneSpec,
    /// Output directory, relative to `$FASD_OUT` when that is set.
    pub output: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        self.data.validate()?;
        ensure!(
            self.model.classes == self.data.classes.len(),
            "model has {} classes but the scene spec defines {}",
            self.model.classes,
            self.data.classes.len()
        );
        ensure!(!self.train.seeds.is_empty(), "at least one seed is required");
        ensure!((0.0..=1.0).contains(&self.train.eval_iou), "eval_iou must lie in [0, 1]");
        let o = &self.optim;
        ensure!(o.lr > 0.0 && o.eps > 0.0 && o.weight_decay >= 0.0, "optimizer settings out of range");
        ensure!((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2), "betas must lie in [0, 1)");
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// `$FASD_OUT/<output>`, or `<output>` alone when the variable is unset.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output),
            None => self.output.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.rate(2.0, 0, 10), 2.0);
        assert!((s.rate(2.0, 5, 10) - 1.0).abs() < 1e-15);
        assert!(s.rate(2.0, 10, 10).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(2.0, 7, 10), 2.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nepochs = 3\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("[train]\nseeds = [9]\n[distill]\nlambda2 = 0.5\n").unwrap();
        assert_eq!(cfg.train.seeds, vec![9]);
        assert_eq!(cfg.distill.lambda2, 0.5);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[model.teacher]\nwidth = 30\nheads = 8\n").is_err());
        assert!(RunConfig::from_toml("[distill]\ntemperature = 0.0\n").is_err());
    }
}
