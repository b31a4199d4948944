//! Multi-resolution schedule and pyramid construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Geometry;
use crate::num::{Element, Real};
use crate::smooth::smooth_grid;
use crate::volgrid::Grid3;

/// Multi-resolution registration parameters.
///
/// Per-level lists run coarse to fine; shrink factors must be
/// non-increasing and end at 1. Sigmas are in voxels of the full-resolution
/// grid level they smooth.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationSchedule {
    pub shrink_factors: Vec<usize>,
    pub smoothing_sigmas_voxels: Vec<f64>,
    pub max_iterations: Vec<usize>,
    /// Convergence threshold on the metric slope over the trailing window.
    pub convergence_tol: f64,
    /// Trailing window length for the convergence slope.
    pub convergence_window: usize,
    /// Local cross-correlation window radius in voxels.
    pub cc_window_radius: usize,
    /// Per-iteration maximum displacement update, in voxels.
    pub gradient_step_voxels: f64,
    /// Gaussian sigma applied to each update field, in voxels.
    pub update_field_sigma_voxels: f64,
    /// Gaussian sigma applied to the accumulated fields, in voxels.
    pub total_field_sigma_voxels: f64,
}

impl Default for RegistrationSchedule {
    fn default() -> Self {
        RegistrationSchedule {
            shrink_factors: vec![8, 4, 2, 1],
            smoothing_sigmas_voxels: vec![3.0, 2.0, 1.0, 0.0],
            max_iterations: vec![100, 80, 40, 10],
            convergence_tol: 1e-6,
            convergence_window: 10,
            cc_window_radius: 4,
            gradient_step_voxels: 0.25,
            update_field_sigma_voxels: 3.0,
            total_field_sigma_voxels: 0.5,
        }
    }
}

impl RegistrationSchedule {
    pub fn levels(&self) -> usize {
        self.shrink_factors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.shrink_factors.len();
        if n == 0 {
            return Err(Error::Config("schedule has no levels".into()));
        }
        if self.smoothing_sigmas_voxels.len() != n || self.max_iterations.len() != n {
            return Err(Error::Config(format!(
                "schedule lists must have equal lengths: {} shrink factors, {} sigmas, {} iteration counts",
                n,
                self.smoothing_sigmas_voxels.len(),
                self.max_iterations.len()
            )));
        }
        for w in self.shrink_factors.windows(2) {
            if w[1] > w[0] {
                return Err(Error::Config(format!(
                    "shrink factors must be non-increasing, got {:?}",
                    self.shrink_factors
                )));
            }
        }
        if *self.shrink_factors.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "shrink factors must end at 1, got {:?}",
                self.shrink_factors
            )));
        }
        if self.shrink_factors.iter().any(|&f| f == 0) {
            return Err(Error::Config("shrink factor 0".into()));
        }
        if self.smoothing_sigmas_voxels.iter().any(|&s| s < 0.0) {
            return Err(Error::Config("negative smoothing sigma".into()));
        }
        if self.cc_window_radius == 0 {
            return Err(Error::Config("cc window radius must be >= 1".into()));
        }
        if !(self.gradient_step_voxels > 0.0) {
            return Err(Error::Config("gradient step must be positive".into()));
        }
        if self.convergence_window < 2 {
            return Err(Error::Config("convergence window must be >= 2".into()));
        }
        Ok(())
    }
}

/// Geometry of a shrunk level: `ceil(n / factor)` voxels per axis, spacing
/// scaled by the factor, origin preserved.
pub fn level_geometry(full: &Geometry, factor: usize) -> Geometry {
    let f = factor.max(1);
    let dims = [
        full.dims[0].div_ceil(f).max(1),
        full.dims[1].div_ceil(f).max(1),
        full.dims[2].div_ceil(f).max(1),
    ];
    let spacing = [
        full.spacing[0] * f as f64,
        full.spacing[1] * f as f64,
        full.spacing[2] * f as f64,
    ];
    Geometry {
        dims,
        spacing,
        origin: full.origin,
    }
}

/// Smooth by `sigma` voxels then subsample by `factor`.
pub fn make_level<T: Real + Element>(g: &Grid3<T>, sigma: f64, factor: usize) -> Grid3<T> {
    let smoothed = smooth_grid(g, sigma);
    if factor <= 1 {
        return smoothed;
    }
    let target = level_geometry(g.geometry(), factor);
    Grid3::from_fn(target, |idx| {
        let ci = [
            (idx[0] * factor) as f64,
            (idx[1] * factor) as f64,
            (idx[2] * factor) as f64,
        ];
        T::of_f64(smoothed.sample_trilinear_ci(ci))
    })
}

/// Least-squares slope of a metric trace tail; `None` until the window fills.
pub fn trailing_slope(trace: &[f64], window: usize) -> Option<f64> {
    if trace.len() < window {
        return None;
    }
    let tail = &trace[trace.len() - window..];
    let n = window as f64;
    let mean_x = (window - 1) as f64 / 2.0;
    let mean_y = tail.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, y) in tail.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    Some(num / den)
}
