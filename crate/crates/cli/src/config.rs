//! JSON configuration with one group per subsystem. Every group is optional
//! and unknown keys are rejected at any depth.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shelfpick_core::perception::SegmentationParams;
use shelfpick_core::planner::DEFAULT_THRESHOLD;
use shelfpick_core::render::CameraSpec;
use shelfpick_core::sim::{ObjectSet, ShelfSpec, SimConfig};
use shelfpick_neural::{ModelSpec, TrainConfig};

pub const CONFIG_ENV: &str = "SHELFPICK_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub shelf: ShelfSpec,
    pub object_set: ObjectSet,
    pub object_count: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { shelf: ShelfSpec::default(), object_set: ObjectSet::Varied, object_count: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    /// Square image side in pixels.
    pub resolution: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { resolution: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    pub depth_threshold: f64,
    pub normal_threshold_deg: f64,
    /// Scaled from 30 px at 256² when absent.
    pub min_cluster_size: Option<usize>,
    pub wall_tolerance: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { depth_threshold: 0.01, normal_threshold_deg: 20.0, min_cluster_size: None, wall_tolerance: 0.005 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Oracle,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub threshold: f64,
    pub predictor: PredictorKind,
    /// Checkpoint for the learned predictor.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, predictor: PredictorKind::Oracle, checkpoint: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub sim: SimConfig,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub segmentation: SegmentationConfig,
    pub model: ModelSpec,
    pub training: TrainConfig,
    pub planner: PlannerConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_value(value).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_json(&text)
    }

    /// Explicit path first, then `SHELFPICK_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.sim.validate().map_err(|e| invalid(e.to_string()))?;
        self.scene.shelf.validate().map_err(|e| invalid(e.to_string()))?;
        if self.scene.object_count == 0 {
            return Err(invalid("scene.object_count must be at least 1".into()));
        }
        let camera = self.camera_spec();
        camera.validate(&self.scene.shelf).map_err(|e| invalid(e.to_string()))?;
        self.segmentation_params().validate().map_err(invalid)?;
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        if self.model.resolution != self.camera.resolution {
            return Err(invalid(format!(
                "model.resolution {} differs from camera.resolution {}",
                self.model.resolution, self.camera.resolution
            )));
        }
        self.training.validate().map_err(|e| invalid(e.to_string()))?;
        if !(self.planner.threshold > 0.0 && self.planner.threshold <= 1.0) {
            return Err(invalid("planner.threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn camera_spec(&self) -> CameraSpec {
        CameraSpec::for_shelf(&self.scene.shelf, self.camera.resolution)
    }

    pub fn segmentation_params(&self) -> SegmentationParams {
        let mut p = SegmentationParams::for_camera(&self.camera_spec());
        let s = &self.segmentation;
        p.depth_threshold = s.depth_threshold;
        p.normal_threshold = s.normal_threshold_deg.to_radians();
        p.wall_tolerance = s.wall_tolerance;
        if let Some(n) = s.min_cluster_size {
            p.min_cluster_size = n;
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = Config::from_json("{}").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.scene.object_count, 6);
        assert_eq!(c.camera.resolution, 64);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        for (doc, key) in [
            (r#"{"bogus": 1}"#, "bogus"),
            (r#"{"scene": {"objects": 3}}"#, "objects"),
            (r#"{"sim": {"dt": 0.01, "gravityy": 9.8}}"#, "gravityy"),
            (r#"{"training": {"epoch": 3}}"#, "epoch"),
        ] {
            let err = Config::from_json(doc).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn inconsistent_values_are_rejected() {
        assert!(Config::from_json(r#"{"camera": {"resolution": 32}}"#).is_err());
        assert!(Config::from_json(r#"{"camera": {"resolution": 32}, "model": {"resolution": 32}}"#).is_ok());
        assert!(Config::from_json(r#"{"planner": {"threshold": 0}}"#).is_err());
        assert!(Config::from_json(r#"{"scene": {"object_count": 0}}"#).is_err());
    }

    #[test]
    fn segmentation_overrides_apply() {
        let c = Config::from_json(r#"{"segmentation": {"normal_threshold_deg": 30, "min_cluster_size": 5}}"#).unwrap();
        let p = c.segmentation_params();
        assert!((p.normal_threshold - 30f64.to_radians()).abs() < 1e-15);
        assert_eq!(p.min_cluster_size, 5);
        assert_eq!(Config::default().segmentation_params().min_cluster_size, 2);
    }

    #[test]
    fn partial_model_group_keeps_default_widths() {
        let c = Config::from_json(r#"{"model": {"skip_taps": [true, true, false, true]}}"#).unwrap();
        assert_eq!(c.model.depth_widths, ModelSpec::default().depth_widths);
        assert!(!c.model.skip_taps[2]);
        assert!(Config::from_json(r#"{"model": {"skip_taps": [true]}}"#).is_err());
    }
}
