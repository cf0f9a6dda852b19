//! Pipeline configuration.
//!
//! Files are flat `section.key = value` lines (valid TOML dotted keys);
//! section headers are accepted too. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::association::AssociationParams;
use crate::cloud_io::GroundParams;
use crate::error::{Error, Result};
use crate::estimator::EstimatorParams;
use crate::pagor::{level_thresholds, DEFAULT_P_VALUES};
use crate::segmentation::{LineParams, PlaneParams};
use crate::verification::VerifyParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundConfig {
    pub enabled: bool,
    pub distance_threshold: f64,
    pub max_normal_angle_deg: f64,
    pub iterations: usize,
}

impl GroundConfig {
    pub fn params(&self) -> GroundParams {
        GroundParams {
            distance_threshold: self.distance_threshold,
            max_normal_angle_deg: self.max_normal_angle_deg,
            iterations: self.iterations,
        }
    }
}

impl Default for GroundConfig {
    fn default() -> Self {
        let p = GroundParams::default();
        Self {
            enabled: true,
            distance_threshold: p.distance_threshold,
            max_normal_angle_deg: p.max_normal_angle_deg,
            iterations: p.iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Segments with fewer points are discarded.
    pub min_points: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { min_points: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PagorConfig {
    /// Upper-tail probabilities per pyramid level, strictly descending.
    pub p_values: Vec<f64>,
}

impl Default for PagorConfig {
    fn default() -> Self {
        Self {
            p_values: DEFAULT_P_VALUES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Seed of every random stream in the pipeline.
    pub seed: u64,
    pub ground: GroundConfig,
    pub plane: PlaneParams,
    pub line: LineParams,
    pub segment: SegmentConfig,
    pub association: AssociationParams,
    pub pagor: PagorConfig,
    pub estimator: EstimatorParams,
    pub verify: VerifyParams,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must not exceed {}", i64::MAX)));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("plane.voxel_size", self.plane.voxel_size)?;
        positive("plane.eigen_ratio", self.plane.eigen_ratio)?;
        positive("plane.distance_threshold", self.plane.distance_threshold)?;
        positive("line.distance_threshold", self.line.distance_threshold)?;
        positive("ground.distance_threshold", self.ground.distance_threshold)?;
        if !(0.0..=1.0).contains(&self.plane.normal_threshold) {
            return Err(Error::Config("plane.normal_threshold must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.line.inlier_ratio) {
            return Err(Error::Config("line.inlier_ratio must lie in [0, 1]".into()));
        }
        level_thresholds(&self.pagor.p_values).map_err(|e| Error::Config(format!("pagor.p_values: {e}")))?;
        self.estimator.validate()?;
        self.verify.kernel()?;
        Ok(())
    }

    /// Renders the configuration as flat `section.key = value` lines.
    pub fn to_flat_string(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = String::new();
        flatten("", &value, &mut out);
        Ok(out)
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.push_str(&format!("{prefix} = {other}\n"));
        }
    }
}
