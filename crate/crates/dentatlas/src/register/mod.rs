//! Pairwise registration: similarity metrics, linear (rigid/affine)
//! optimization and symmetric diffeomorphic registration.

mod linear;
mod metric;
mod pyramid;
mod syn;
mod transform;

pub use linear::{register_linear, register_linear_from, LinearResult, RegistrationMode};
pub use metric::{global_correlation, local_cc, local_cc_bidirectional, BidirectionalCc, LocalCcResult};
pub use pyramid::{level_geometry, make_level, trailing_slope, RegistrationSchedule};
pub use syn::{register_syn, SynResult};
pub use transform::{AffineMap, AffineTransform, LinearTransform, RigidTransform};

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::num::{Element, Real};
use crate::volgrid::Grid3;

/// A two-channel image: intensity plus the reassigned-segmentation
/// guidance channel, with the metric weights between them.
#[derive(Debug, Clone)]
pub struct ChannelPair<T: Real> {
    pub intensity: Grid3<T>,
    pub guidance: Grid3<T>,
    /// `(w_intensity, w_guidance)`, non-negative, summing to 1.
    pub weights: (f64, f64),
}

impl<T: Real + Element> ChannelPair<T> {
    pub fn new(intensity: Grid3<T>, guidance: Grid3<T>, weights: (f64, f64)) -> Result<Self> {
        intensity
            .geometry()
            .check_same(guidance.geometry(), "ChannelPair")?;
        if weights.0 < 0.0 || weights.1 < 0.0 {
            return Err(Error::InvalidArgument(
                "channel weights must be non-negative".into(),
            ));
        }
        let sum = weights.0 + weights.1;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "channel weights must sum to 1, got {sum}"
            )));
        }
        Ok(ChannelPair {
            intensity,
            guidance,
            weights,
        })
    }

    /// Intensity-only pair: guidance present but weighted to zero.
    pub fn intensity_only(intensity: Grid3<T>) -> Self {
        let guidance = Grid3::filled(intensity.geometry().clone(), T::zero());
        ChannelPair {
            intensity,
            guidance,
            weights: (1.0, 0.0),
        }
    }

    /// Channels and weights, skipping zero-weighted ones.
    pub fn active_channels(&self) -> Vec<(&Grid3<T>, f64)> {
        let mut out = Vec::with_capacity(2);
        if self.weights.0 > 0.0 {
            out.push((&self.intensity, self.weights.0));
        }
        if self.weights.1 > 0.0 {
            out.push((&self.guidance, self.weights.1));
        }
        out
    }

    /// Apply `f` to both channels, keeping the weights.
    pub fn map_channels(&self, mut f: impl FnMut(&Grid3<T>) -> Grid3<T>) -> ChannelPair<T> {
        ChannelPair {
            intensity: f(&self.intensity),
            guidance: f(&self.guidance),
            weights: self.weights,
        }
    }

    /// Intensity-weighted centroid of the intensity channel (mm).
    /// Background at 0 contributes nothing.
    pub fn foreground_centroid(&self) -> Result<Point3<f64>> {
        let geom = self.intensity.geometry();
        let mut acc = [0.0f64; 3];
        let mut total = 0.0f64;
        for (idx, p) in geom.iter_indices().enumerate() {
            let w = self.intensity.data()[idx].as_f64().max(0.0);
            if w > 0.0 {
                let pos = geom.position(p);
                acc[0] += w * pos[0];
                acc[1] += w * pos[1];
                acc[2] += w * pos[2];
                total += w;
            }
        }
        if total <= 0.0 {
            return Err(Error::DegenerateInput(
                "no positive intensity for centroid".into(),
            ));
        }
        Ok(Point3::new(
            acc[0] / total,
            acc[1] / total,
            acc[2] / total,
        ))
    }
}
