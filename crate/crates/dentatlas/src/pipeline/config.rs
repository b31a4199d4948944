//! Pipeline configuration: one JSON document holding every stage's
//! parameters. Unknown keys are rejected with the offending key named.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::RegistrationSchedule;
use crate::shape::CpdConfig;
use crate::volgrid::EnhancementConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtlasConfig {
    pub outer_iterations: usize,
    pub shape_update_step: f64,
    /// Guidance-template threshold for the foreground mask and the hard
    /// atlas label vote (half the smallest tooth intensity).
    pub guidance_threshold: f64,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig {
            outer_iterations: 10,
            shape_update_step: 0.25,
            guidance_threshold: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeConfig {
    pub cpd: CpdConfig,
    pub pca_threshold: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        ShapeConfig {
            cpd: CpdConfig::default(),
            pca_threshold: 0.85,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Standardized voxel spacing in mm.
    pub working_spacing_mm: f64,
    /// (intensity, guidance) metric weights for multi-channel registration.
    pub channel_weights: (f64, f64),
    /// Worker threads; 0 uses all available cores.
    pub parallelism: usize,
    pub enhancement: EnhancementConfig,
    pub registration: RegistrationSchedule,
    pub atlas: AtlasConfig,
    pub shape: ShapeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            working_spacing_mm: 0.4,
            channel_weights: (0.5, 0.5),
            parallelism: 0,
            enhancement: EnhancementConfig::default(),
            registration: RegistrationSchedule::default(),
            atlas: AtlasConfig::default(),
            shape: ShapeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.working_spacing_mm > 0.0) {
            return Err(Error::Config(format!(
                "working spacing must be positive, got {}",
                self.working_spacing_mm
            )));
        }
        let (wi, wg) = self.channel_weights;
        if wi < 0.0 || wg < 0.0 || (wi + wg - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "channel weights must be non-negative and sum to 1, got ({wi}, {wg})"
            )));
        }
        if self.atlas.outer_iterations == 0 {
            return Err(Error::Config("atlas outer_iterations must be >= 1".into()));
        }
        if !(self.atlas.shape_update_step > 0.0 && self.atlas.shape_update_step <= 1.0) {
            return Err(Error::Config(format!(
                "atlas shape_update_step must lie in (0, 1], got {}",
                self.atlas.shape_update_step
            )));
        }
        if !(0.0 < self.shape.pca_threshold && self.shape.pca_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "pca threshold must lie in (0, 1], got {}",
                self.shape.pca_threshold
            )));
        }
        self.enhancement
            .validate()
            .map_err(|e| Error::Config(format!("enhancement: {e}")))?;
        self.registration
            .validate()
            .map_err(|e| Error::Config(format!("registration: {e}")))?;
        self.shape
            .cpd
            .validate()
            .map_err(|e| Error::Config(format!("cpd: {e}")))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<PipelineConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn defaults_carry_the_published_parameters() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.working_spacing_mm, 0.4);
        assert_eq!(cfg.enhancement.margin_voxels, 30);
        assert_eq!(cfg.enhancement.dilation_radius_voxels, 15);
        assert_eq!(cfg.registration.shrink_factors, vec![8, 4, 2, 1]);
        assert_eq!(cfg.registration.smoothing_sigmas_voxels, vec![3.0, 2.0, 1.0, 0.0]);
        assert_eq!(cfg.registration.max_iterations, vec![100, 80, 40, 10]);
        assert_eq!(cfg.atlas.outer_iterations, 10);
        assert_eq!(cfg.shape.pca_threshold, 0.85);
    }

    #[test]
    fn round_trip_and_unknown_key_rejection() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = PipelineConfig::default();
        cfg.write(&path).unwrap();
        let back = PipelineConfig::read(&path).unwrap();
        assert_eq!(back.to_canonical_json().unwrap(), cfg.to_canonical_json().unwrap());

        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("\"working_spacing_mm\"", "\"working_spacng_mm\"", 1);
        std::fs::write(&path, text).unwrap();
        let err = PipelineConfig::read(&path).unwrap_err();
        assert!(err.to_string().contains("working_spacng_mm"), "{err}");
    }

    #[test]
    fn invalid_values_are_named() {
        let mut cfg = PipelineConfig::default();
        cfg.shape.pca_threshold = 1.5;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("pca threshold"));
    }
}
