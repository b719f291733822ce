//! Run configuration: one JSON-loadable struct covering the task
//! stream, model widths, valve and library knobs, loss toggles, and
//! seeds. Unknown keys are rejected so a typo cannot silently fall back
//! to a default, and every field has one so partial configs stay short.

use crate::data::Family;
use crate::error::{Error, Result};
use crate::valve::{SignatureNormalization, ThresholdMode};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// How transfer experts behave while a new task trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Every active expert trains, including previously frozen ones;
    /// the forgetting-measurement arm.
    AllTrainable,
    /// Transfer experts stay frozen, fresh experts train (default).
    Blending,
    /// Nothing in the library trains; lower-bound arm.
    AllFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainBackbone {
    /// Encoder/decoder train on the first task, then freeze; later
    /// tasks adapt through experts only, which keeps completed-task
    /// evaluation paths bit-stable.
    FirstTaskOnly,
    Always,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Families presented in order; repeats exercise old-task reuse.
    pub task_sequence: Vec<Family>,
    pub steps_per_task: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub expert_capacity: usize,
    pub k_transfer: usize,
    pub k_new: usize,
    pub freeze_policy: FreezePolicy,
    pub threshold_update_mode: ThresholdMode,
    pub signature_normalization: SignatureNormalization,
    /// Component switches (ablation arms disable whole subsystems).
    pub valve_enabled: bool,
    pub library_enabled: bool,
    /// Loss toggles; reconstruction is always on.
    pub loss_contrast: bool,
    pub loss_distillation: bool,
    pub loss_projection: bool,
    pub loss_regularization: bool,
    pub loss_diversity: bool,
    /// Contrast weight inside the switch loss.
    pub beta1: f64,
    /// Contrast weight inside the distillation loss.
    pub beta2: f64,
    /// Fusion softmax temperature.
    pub tau: f64,
    pub feature_width: usize,
    pub adapter_reduction: usize,
    pub val_samples: usize,
    pub replay_per_task: usize,
    pub replay_batch: usize,
    /// Batches averaged into the pre-training task vector.
    pub task_vector_batches: usize,
    /// Refresh frozen transfer experts' performance EMA while active.
    pub update_frozen_scores: bool,
    /// Refresh owner scores when an old task is re-presented.
    pub ema_refresh_on_reuse: bool,
    pub train_backbone: TrainBackbone,
    pub base_lr: f64,
    pub seed: u64,
    /// Separate stream for image synthesis; defaults to `seed`.
    pub data_seed: Option<u64>,
    /// Haze pre-pass under rain (mixed-weather data).
    pub allow_haze_rain: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            task_sequence: vec![Family::Haze, Family::Rain, Family::Snow],
            steps_per_task: 2000,
            batch_size: 2,
            image_size: 32,
            expert_capacity: crate::experts::DEFAULT_CAPACITY,
            k_transfer: crate::experts::DEFAULT_K_TRANSFER,
            k_new: crate::experts::DEFAULT_K_NEW,
            freeze_policy: FreezePolicy::Blending,
            threshold_update_mode: ThresholdMode::Delta,
            signature_normalization: SignatureNormalization::RegistryZ,
            valve_enabled: true,
            library_enabled: true,
            loss_contrast: true,
            loss_distillation: true,
            loss_projection: true,
            loss_regularization: true,
            loss_diversity: true,
            beta1: crate::losses::DEFAULT_BETA1,
            beta2: crate::losses::DEFAULT_BETA2,
            tau: crate::experts::DEFAULT_TAU,
            feature_width: crate::backbone::DEFAULT_WIDTH,
            adapter_reduction: crate::experts::DEFAULT_REDUCTION,
            val_samples: 8,
            replay_per_task: 16,
            replay_batch: 2,
            task_vector_batches: 4,
            update_frozen_scores: true,
            ema_refresh_on_reuse: false,
            train_backbone: TrainBackbone::FirstTaskOnly,
            base_lr: crate::optim::DEFAULT_BASE_LR,
            seed: 0,
            data_seed: None,
            allow_haze_rain: false,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.task_sequence.is_empty() {
            return bad("task_sequence must not be empty".into());
        }
        for (name, v) in [
            ("steps_per_task", self.steps_per_task),
            ("batch_size", self.batch_size),
            ("expert_capacity", self.expert_capacity),
            ("k_transfer", self.k_transfer),
            ("k_new", self.k_new),
            ("val_samples", self.val_samples),
            ("replay_per_task", self.replay_per_task),
            ("replay_batch", self.replay_batch),
            ("task_vector_batches", self.task_vector_batches),
            ("adapter_reduction", self.adapter_reduction),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.image_size < crate::metrics::SSIM_WINDOW {
            return bad(format!(
                "image_size must be at least {} for SSIM evaluation",
                crate::metrics::SSIM_WINDOW
            ));
        }
        if self.feature_width < 4 || self.feature_width % 4 != 0 {
            return bad(format!(
                "feature_width {} must be a positive multiple of 4 (projection head)",
                self.feature_width
            ));
        }
        if self.feature_width % self.adapter_reduction != 0 {
            return bad(format!(
                "feature_width {} not divisible by adapter_reduction {}",
                self.feature_width, self.adapter_reduction
            ));
        }
        if self.replay_batch > self.replay_per_task {
            return bad("replay_batch cannot exceed replay_per_task".into());
        }
        if self.k_new > self.expert_capacity {
            return bad("k_new cannot exceed expert_capacity".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_json_str(r#"{"stepz_per_task": 100}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json_str(r#"{"seed": 7, "steps_per_task": 50}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.steps_per_task, 50);
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.data_seed(), 7);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            r#"{"task_sequence": []}"#,
            r#"{"steps_per_task": 0}"#,
            r#"{"image_size": 10}"#,
            r#"{"feature_width": 6}"#,
            r#"{"feature_width": 16, "adapter_reduction": 5}"#,
            r#"{"replay_batch": 32, "replay_per_task": 16}"#,
            r#"{"tau": 0.0}"#,
            r#"{"base_lr": -0.1}"#,
            r#"{"beta1": -0.5}"#,
        ] {
            let err = RunConfig::from_json_str(bad).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad} must be a config error");
        }
    }

    #[test]
    fn json_round_trip_preserves_everything() {
        let mut c = RunConfig::default();
        c.task_sequence = vec![Family::Snow, Family::Snow, Family::Haze];
        c.freeze_policy = FreezePolicy::AllTrainable;
        c.data_seed = Some(99);
        c.out_dir = Some(PathBuf::from("/tmp/x"));
        let text = c.to_json_pretty().unwrap();
        let back = RunConfig::from_json_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn enum_spellings_are_snake_case() {
        let c = RunConfig::from_json_str(
            r#"{"freeze_policy": "all_frozen", "train_backbone": "always",
                "threshold_update_mode": "literal", "signature_normalization": "raw",
                "task_sequence": ["rain", "haze"]}"#,
        )
        .unwrap();
        assert_eq!(c.freeze_policy, FreezePolicy::AllFrozen);
        assert_eq!(c.train_backbone, TrainBackbone::Always);
        assert_eq!(c.task_sequence, vec![Family::Rain, Family::Haze]);
    }
}
