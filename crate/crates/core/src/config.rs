//! Versioned pipeline configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::AssociationConfig;
use crate::labels::{check_threshold, DEFAULT_T_CLS};
use crate::simulator::SceneConfig;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TauSelection {
    /// Sweep tau on the validation block instead of using `association.tau`.
    pub enabled: bool,
    pub max: f64,
    pub steps: usize,
}

impl Default for TauSelection {
    fn default() -> Self {
        Self {
            enabled: true,
            max: 1.0,
            steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub init_scale: f64,
    /// Supervised epochs on a separate source domain before adaptation;
    /// 0 starts from the random initialization.
    pub pretrain_epochs: usize,
    pub source_identities: usize,
    /// Descriptors per source identity.
    pub source_draws: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            init_scale: 1.0,
            pretrain_epochs: 20,
            source_identities: 40,
            source_draws: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparabilityConfig {
    pub style_scales: Vec<f64>,
    /// Embedding draws per identity and camera.
    pub draws: usize,
}

impl Default for SeparabilityConfig {
    fn default() -> Self {
        Self {
            style_scales: vec![0.0, 0.15, 0.3, 0.6, 1.0, 1.5, 2.0, 3.0],
            draws: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default = "default_t_cls")]
    pub t_cls: f64,
    #[serde(default)]
    pub association: AssociationConfig,
    #[serde(default)]
    pub tau_selection: TauSelection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Train/validation/test frame ratio, contiguous blocks in that order.
    #[serde(default = "default_split")]
    pub split: [u32; 3],
    /// Student cameras to adapt; empty means every camera.
    #[serde(default)]
    pub students: Vec<String>,
    /// Also train the phase-2-only and confident-backbone variants.
    #[serde(default = "default_true")]
    pub ablations: bool,
    #[serde(default)]
    pub separability: SeparabilityConfig,
}

fn default_t_cls() -> f64 {
    DEFAULT_T_CLS
}

fn default_split() -> [u32; 3] {
    [16, 4, 5]
}

fn default_true() -> bool {
    true
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            scene: SceneConfig::default(),
            t_cls: DEFAULT_T_CLS,
            association: AssociationConfig::default(),
            tau_selection: TauSelection::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            split: default_split(),
            students: Vec::new(),
            ablations: true,
            separability: SeparabilityConfig::default(),
        }
    }
}

/// Contiguous train/validation/test frame blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSplit {
    pub train: std::ops::Range<u64>,
    pub val: std::ops::Range<u64>,
    pub test: std::ops::Range<u64>,
}

/// Splits `n` frames by `ratio`; the test block absorbs rounding.
pub fn split_frames(n: u64, ratio: [u32; 3]) -> FrameSplit {
    let total: u64 = ratio.iter().map(|r| u64::from(*r)).sum::<u64>().max(1);
    let n_train = n * u64::from(ratio[0]) / total;
    let n_val = n * u64::from(ratio[1]) / total;
    FrameSplit {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..n,
    }
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Version {
            schema_version: u32,
        }
        let v: Version = serde_json::from_str(s)?;
        if v.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema { found: v.schema_version });
        }
        let config: Self = serde_json::from_str(s)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                found: self.schema_version,
            });
        }
        self.scene.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        check_threshold(self.t_cls).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let a = &self.association;
        if !(a.epsilon >= 0.0) || !(a.tau >= 0.0) || !(a.iou_min > 0.0 && a.iou_min <= 1.0) {
            return bad("association epsilon, tau and iou_min must be non-negative, iou_min in (0, 1]".into());
        }
        if self.tau_selection.enabled && (self.tau_selection.steps == 0 || !(self.tau_selection.max > 0.0)) {
            return bad("tau sweep needs positive max and steps".into());
        }
        if self.model.hidden == 0 || !(self.model.init_scale >= 0.0) {
            return bad("model hidden size must be positive".into());
        }
        if self.split.contains(&0) {
            return bad("every split block needs a positive share".into());
        }
        let split = split_frames(self.scene.n_frames as u64, self.split);
        for (name, block) in [("train", &split.train), ("validation", &split.val), ("test", &split.test)] {
            if block.end - block.start <= a.horizon as u64 {
                return bad(format!("{name} block is shorter than the tracking horizon"));
            }
        }
        let ids: Vec<String> = (0..self.scene.n_cameras).map(SceneConfig::camera_id).collect();
        for s in &self.students {
            if !ids.contains(s) {
                return bad(format!("unknown student camera {s}"));
            }
        }
        Ok(())
    }

    pub fn student_cameras(&self) -> Vec<String> {
        if self.students.is_empty() {
            (0..self.scene.n_cameras).map(SceneConfig::camera_id).collect()
        } else {
            self.students.clone()
        }
    }

    pub fn frame_split(&self) -> FrameSplit {
        split_frames(self.scene.n_frames as u64, self.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_16_4_5() {
        let s = split_frames(200, [16, 4, 5]);
        assert_eq!(s.train, 0..128);
        assert_eq!(s.val, 128..160);
        assert_eq!(s.test, 160..200);
        let s = split_frames(101, [16, 4, 5]);
        assert_eq!(s.test.end, 101);
    }

    #[test]
    fn defaults_roundtrip() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let minimal = PipelineConfig::from_json(r#"{"schema_version": 1, "seed": 4}"#).unwrap();
        assert_eq!(minimal.seed, 4);
        assert_eq!(minimal.t_cls, 0.8);
        assert_eq!(minimal.train.batch_size, 8);
        assert_eq!(minimal.association.horizon, 4);
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(matches!(
            PipelineConfig::from_json(r#"{"schema_version": 2}"#),
            Err(ConfigError::Schema { found: 2 })
        ));
        assert!(PipelineConfig::from_json(r#"{"seed": 1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"schema_version": 1, "sede": 1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"schema_version": 1, "train": {"lr": 0.1, "momentum": 0.9}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"schema_version": 1, "t_cls": 1.2}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"schema_version": 1, "students": ["cam9"]}"#).is_err());
    }
}
