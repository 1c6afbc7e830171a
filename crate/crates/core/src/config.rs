//! Run configuration, stored as TOML with units spelled out in key names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::DatasetFormat;
use crate::dba::DbaConfig;
use crate::mapping::MappingConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Tracking and mapping alternate on one thread; fully deterministic.
    Interleaved,
    /// Tracking and mapping run on separate threads joined by a channel.
    Concurrent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub keyframe_flow_threshold_px: f64,
    pub local_window_keyframes: usize,
    pub local_radius_keyframes: usize,
    pub global_ba_period_keyframes: usize,
    pub global_proximity_px: f64,
    pub local_ba_iterations: usize,
    pub initial_ba_iterations: usize,
    pub global_ba_iterations: usize,
    /// Solver grid resolution relative to the input images.
    pub solver_scale: f64,
    /// Standard deviation of the noise added to oracle flow.
    pub flow_noise_px: f64,
    /// Inverse depth assigned to every pixel of the first keyframe.
    pub initial_inv_depth: f64,
    pub dba: DbaConfig,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            keyframe_flow_threshold_px: 4.0,
            local_window_keyframes: 16,
            local_radius_keyframes: 3,
            global_ba_period_keyframes: 10,
            global_proximity_px: 16.0,
            local_ba_iterations: 6,
            initial_ba_iterations: 30,
            global_ba_iterations: 6,
            solver_scale: 0.125,
            flow_noise_px: 0.0,
            initial_inv_depth: 1.0,
            dba: DbaConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub dataset_format: Option<DatasetFormat>,
    /// Use only the first frames of the sequence.
    pub clip_frames: Option<usize>,
    pub mode: RunMode,
    pub rng_seed: u64,
    pub eval_stride_frames: usize,
    pub tracking: TrackingConfig,
    pub mapping: MappingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            dataset_format: None,
            clip_frames: None,
            mode: RunMode::Interleaved,
            rng_seed: 0,
            eval_stride_frames: 5,
            tracking: TrackingConfig::default(),
            mapping: MappingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let t = &self.tracking;
        if !(t.keyframe_flow_threshold_px > 0.0 && t.global_proximity_px > 0.0) {
            return bad("flow thresholds must be positive");
        }
        if t.local_window_keyframes < 2
            || t.local_radius_keyframes == 0
            || t.global_ba_period_keyframes == 0
        {
            return bad("need local_window_keyframes >= 2 and positive radius and global period");
        }
        if t.local_ba_iterations == 0 || t.initial_ba_iterations == 0 || t.global_ba_iterations == 0
        {
            return bad("bundle adjustment iteration counts must be positive");
        }
        if !(t.solver_scale > 0.0 && t.solver_scale <= 1.0) {
            return bad("solver_scale must lie in (0, 1]");
        }
        if !(t.flow_noise_px >= 0.0) || !(t.initial_inv_depth > 0.0) {
            return bad("flow_noise_px must be non-negative and initial_inv_depth positive");
        }
        if self.eval_stride_frames == 0 {
            return bad("eval_stride_frames must be positive");
        }
        if self.clip_frames == Some(0) {
            return bad("clip_frames must be positive");
        }
        self.mapping
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialization, as lowercase hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
