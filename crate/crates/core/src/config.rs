//! One JSON file drives every command. Any subset of keys may appear;
//! absent keys take the documented defaults, and relative data paths
//! resolve against the config file's own directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{DiffusionSettings, NoiseCoeff, PredictionMode};
use crate::error::{Error, Result};
use crate::infer::GenConfig;
use crate::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
use crate::training::{GuidanceConfig, LambdaKind, LrKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// None keeps every timestep 1..=T.
    pub subset_count: Option<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::Linear,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            subset_count: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSection {
    pub mode: PredictionMode,
    /// The n in x_{t−n} prediction; ignored in x0 mode.
    pub n: usize,
    pub noise_coeff: NoiseCoeff,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            mode: PredictionMode::X0,
            n: 100,
            noise_coeff: NoiseCoeff::Sqrt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    /// Compute the x₁-restoring term at every drawn t, not just t = 1.
    pub x1_every_step: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { x1_every_step: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSection {
    /// Unfreeze the embedding table (frozen by default).
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSection {
    pub stages: usize,
    pub deterministic: bool,
    pub dedup: bool,
    pub reembed_between_stages: bool,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            stages: 5,
            deterministic: true,
            dedup: true,
            reembed_between_stages: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub epochs_max: usize,
    pub lr_kind: LrKind,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lambda_kind: LambdaKind,
    pub lambda_value: f64,
    pub dynamic_c: f64,
    pub seed: u64,
    pub grad_clip: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            batch_size: t.batch_size,
            epochs_max: t.epochs_max,
            lr_kind: t.lr_kind,
            lr_start: t.lr_start,
            lr_end: t.lr_end,
            lambda_kind: t.lambda_kind,
            lambda_value: t.lambda_value,
            dynamic_c: t.dynamic_c,
            seed: t.seed,
            grad_clip: t.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub jsonl: PathBuf,
    pub features: PathBuf,
    pub vocab: PathBuf,
    /// Explicit split file; absent means split by `val_fraction`.
    pub split: Option<PathBuf>,
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            jsonl: PathBuf::from("data.jsonl"),
            features: PathBuf::from("features.cdlf"),
            vocab: PathBuf::from("vocab.txt"),
            split: None,
            val_fraction: 0.125,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub schedule: ScheduleSection,
    pub diffusion: DiffusionSection,
    pub loss: LossSection,
    pub embedding: EmbeddingSection,
    pub model: DenoiserConfig,
    pub guidance: GuidanceConfig,
    pub training: TrainingSection,
    pub infer: InferSection,
    pub data: DataSection,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("<config>", e.to_string()))
    }

    /// Load and resolve relative data paths against the file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Config =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        anchor(&mut self.data.jsonl);
        anchor(&mut self.data.features);
        anchor(&mut self.data.vocab);
        if let Some(split) = &mut self.data.split {
            anchor(split);
        }
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        let schedule = build_schedule(s.kind, s.t_max, s.beta_start, s.beta_end)?;
        match s.subset_count {
            Some(count) => schedule.with_subset(count),
            None => Ok(schedule),
        }
    }

    pub fn diffusion_settings(&self) -> DiffusionSettings {
        DiffusionSettings {
            noise_coeff: self.diffusion.noise_coeff,
            prediction: self.diffusion.mode,
            n_back: self.diffusion.n,
            x1_every_step: self.loss.x1_every_step,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            batch_size: t.batch_size,
            epochs_max: t.epochs_max,
            lr_kind: t.lr_kind,
            lr_start: t.lr_start,
            lr_end: t.lr_end,
            lambda_kind: t.lambda_kind,
            lambda_value: t.lambda_value,
            dynamic_c: t.dynamic_c,
            guidance: self.guidance,
            seed: t.seed,
            grad_clip: t.grad_clip,
        }
    }

    /// Generation settings; guidance contributes its weight only when
    /// enabled, so a disabled config generates unguided.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            stages: self.infer.stages,
            deterministic: self.infer.deterministic,
            w: if self.guidance.enabled { self.guidance.w } else { 0.0 },
            dedup: self.infer.dedup,
            reembed_between_stages: self.infer.reembed_between_stages,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::config("data.val_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        let cfg = Config::from_json("{}").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.schedule.t_max, 1000);
        assert_eq!(cfg.training.batch_size, 8);
        assert_eq!(cfg.infer.stages, 5);
        assert!(cfg.loss.x1_every_step);
        assert!(!cfg.embedding.trainable);
    }

    #[test]
    fn partial_sections_keep_sibling_defaults() {
        let cfg = Config::from_json(
            r#"{
                "schedule": {"kind": "cosine", "T": 50, "subset_count": 10},
                "diffusion": {"mode": "x_t_minus_n", "n": 7},
                "training": {"epochs_max": 3, "lr_kind": "log"},
                "guidance": {"enabled": true}
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.schedule.kind, ScheduleKind::Cosine);
        assert_eq!(cfg.schedule.t_max, 50);
        assert_eq!(cfg.schedule.beta_end, 0.02, "untouched sibling default");
        assert_eq!(cfg.diffusion.mode, PredictionMode::XTMinusN);
        assert_eq!(cfg.diffusion.n, 7);
        assert_eq!(cfg.diffusion.noise_coeff, NoiseCoeff::Sqrt);
        assert_eq!(cfg.training.epochs_max, 3);
        assert_eq!(cfg.training.lr_kind, LrKind::Log);
        assert_eq!(cfg.training.batch_size, 8);
        assert!(cfg.guidance.enabled);
        assert_eq!(cfg.guidance.p_uncond, 0.2);

        let tc = cfg.train_config();
        assert!(tc.guidance.enabled);
        let gc = cfg.gen_config();
        assert_eq!(gc.w, 0.3, "enabled guidance carries its weight");
        let ds = cfg.diffusion_settings();
        assert_eq!(ds.n_back, 7);
        assert!(ds.x1_every_step);
    }

    #[test]
    fn disabled_guidance_generates_unguided() {
        let cfg = Config::from_json(r#"{"guidance": {"enabled": false, "w": 1.0}}"#).unwrap();
        assert_eq!(cfg.gen_config().w, 0.0);
    }

    #[test]
    fn schedule_section_builds_subset() {
        let cfg = Config::from_json(r#"{"schedule": {"T": 40, "subset_count": 8}}"#).unwrap();
        let s = cfg.build_schedule().unwrap();
        assert_eq!(s.t_max, 40);
        assert_eq!(s.step_subset.len(), 8);
        assert_eq!(*s.step_subset.last().unwrap(), 40);
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"data": {"jsonl": "toy/data.jsonl", "features": "/abs/features.cdlf"}}"#,
        )
        .unwrap();
        let cfg = Config::from_path(&path).unwrap();
        assert_eq!(cfg.data.jsonl, dir.path().join("toy/data.jsonl"));
        assert_eq!(cfg.data.features, PathBuf::from("/abs/features.cdlf"));
        assert_eq!(cfg.data.vocab, dir.path().join("vocab.txt"));
    }

    #[test]
    fn bad_json_reports_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, "{ not json").unwrap();
        let err = Config::from_path(&path).unwrap_err();
        assert!(err.to_string().contains("run.json"), "{err}");
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = Config::default();
        cfg.schedule.subset_count = Some(100);
        cfg.training.lambda_kind = LambdaKind::Dynamic;
        cfg.model.vocab = 33;
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(Config::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn validation_surfaces_section_and_field() {
        let cfg = Config::from_json(r#"{"training": {"lr_start": 0.0}}"#).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("lr_start"), "{err}");
        let cfg = Config::from_json(r#"{"data": {"val_fraction": 1.5}}"#).unwrap();
        assert!(cfg.validate().is_err());
    }
}
