//! Rigid and affine registration by gradient ascent on the weighted global
//! correlation, with finite-difference gradients over the small parameter
//! vector and step halving on non-improvement.

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::num::{Element, Real};
use crate::volgrid::Grid3;


use super::pyramid::{make_level, RegistrationSchedule};
use super::transform::{AffineMap, AffineTransform, LinearTransform, RigidTransform};
use super::ChannelPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegistrationMode {
    Rigid,
    Affine,
}

/// Result of a linear registration: the transform plus the per-level trace
/// of accepted metric values (non-decreasing within each level).
#[derive(Debug, Clone)]
pub struct LinearResult {
    pub transform: LinearTransform,
    pub metric_trace: Vec<Vec<f64>>,
    pub final_metric: f64,
}

const INITIAL_STEP: f64 = 0.1;
const MIN_STEP: f64 = 1e-5;
const FD_STEP: f64 = 1e-3;

/// Registers `moving` onto `fixed`: finds the linear map `T` (fixed space →
/// moving space) maximizing the weighted Pearson correlation between the
/// fixed channels and the moving channels resampled through `T`.
pub fn register_linear<T: Real + Element>(
    fixed: &ChannelPair<T>,
    moving: &ChannelPair<T>,
    mode: RegistrationMode,
    schedule: &RegistrationSchedule,
) -> Result<LinearResult> {
    register_linear_from(fixed, moving, mode, schedule, None)
}

/// As [`register_linear`], starting from an initial transform (e.g. the
/// rigid result seeding the affine stage).
pub fn register_linear_from<T: Real + Element>(
    fixed: &ChannelPair<T>,
    moving: &ChannelPair<T>,
    mode: RegistrationMode,
    schedule: &RegistrationSchedule,
    init: Option<&LinearTransform>,
) -> Result<LinearResult> {
    schedule.validate()?;
    let center = fixed.foreground_centroid()?;
    // translation parameters are expressed in units of ~10 full-res voxels
    // so the shared ascent step moves rotations and translations at
    // comparable rates
    let spacing = fixed.intensity.spacing();
    let t_scale = 10.0 * (spacing[0] + spacing[1] + spacing[2]) / 3.0;

    let mut params = Params::from_init(mode, init, center, t_scale);
    let mut trace: Vec<Vec<f64>> = Vec::with_capacity(schedule.levels());
    let mut final_metric = f64::NEG_INFINITY;

    for level in 0..schedule.levels() {
        let sigma = schedule.smoothing_sigmas_voxels[level];
        let factor = schedule.shrink_factors[level];
        let fixed_l = fixed.map_channels(|g| make_level(g, sigma, factor));
        let moving_l = moving.map_channels(|g| make_level(g, sigma, factor));
        let samples = FixedSamples::collect(&fixed_l);

        let eval = |p: &Params| -> Result<f64> {
            weighted_metric(&samples, &moving_l, &p.to_map())
        };

        let mut current = eval(&params).map_err(|e| {
            Error::RegistrationFailure(format!("metric degenerate at level {level} init: {e}"))
        })?;
        let mut level_trace = vec![current];
        let mut step = INITIAL_STEP;
        let mut iterations = 0usize;

        while step >= MIN_STEP && iterations < schedule.max_iterations[level] {
            iterations += 1;
            let grad = fd_gradient(&params, &eval)?;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let trial = params.stepped(&grad, step / norm);
            match eval(&trial) {
                Ok(m) if m > current => {
                    params = trial;
                    current = m;
                    level_trace.push(m);
                }
                _ => step *= 0.5,
            }
        }
        final_metric = current;
        trace.push(level_trace);
    }

    let transform = params.to_transform()?;
    Ok(LinearResult {
        transform,
        metric_trace: trace,
        final_metric,
    })
}

/// Metric-evaluation cap: levels with more voxels are sampled on a
/// deterministic stride so one evaluation stays cheap (the optimizer calls
/// it ~25 times per iteration for the finite-difference gradient). Pearson
/// over tens of thousands of samples pins 12 parameters comfortably.
const MAX_METRIC_SAMPLES: usize = 32_768;

/// Fixed-channel sample positions and values, collected once per level.
struct FixedSamples<T> {
    /// Per active channel: (weight, samples as (position, value)).
    channels: Vec<(f64, Vec<([f64; 3], f64)>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real + Element> FixedSamples<T> {
    fn collect(fixed: &ChannelPair<T>) -> FixedSamples<T> {
        let geom = fixed.intensity.geometry();
        let [nx, ny, nz] = geom.dims;
        let n = geom.voxel_count();
        let stride = ((n as f64 / MAX_METRIC_SAMPLES as f64).cbrt().ceil() as usize).max(1);
        let channels = fixed
            .active_channels()
            .iter()
            .map(|(grid, w)| {
                let mut samples = Vec::new();
                let mut k = 0;
                while k < nz {
                    let mut j = 0;
                    while j < ny {
                        let mut i = 0;
                        while i < nx {
                            samples.push((
                                geom.position([i, j, k]),
                                grid.at(i, j, k).as_f64(),
                            ));
                            i += stride;
                        }
                        j += stride;
                    }
                    k += stride;
                }
                (*w, samples)
            })
            .collect();
        FixedSamples {
            channels,
            _marker: std::marker::PhantomData,
        }
    }
}

fn weighted_metric<T: Real + Element>(
    fixed: &FixedSamples<T>,
    moving: &ChannelPair<T>,
    map: &AffineMap,
) -> Result<f64> {
    let moving_channels = moving.active_channels();
    if fixed.channels.len() != moving_channels.len() {
        return Err(Error::InvalidArgument(
            "fixed and moving channel weights differ".into(),
        ));
    }
    let mut metric = 0.0;
    for ((w, samples), (m, _)) in fixed.channels.iter().zip(&moving_channels) {
        metric += w * overlap_pearson(samples, m, map)?;
    }
    Ok(metric)
}

/// Pearson correlation between fixed samples and the moving channel
/// resampled through `map`, restricted to samples whose mapped position
/// lies inside the moving domain. Out-of-domain padding would otherwise
/// leak the domain boundary into the metric and break its invariance to
/// intensity rescaling.
fn overlap_pearson<T: Real + Element>(
    samples: &[([f64; 3], f64)],
    moving: &Grid3<T>,
    map: &AffineMap,
) -> Result<f64> {
    use rayon::prelude::*;

    let mdims = moving.dims();
    // fixed-size chunks with partial sums combined in chunk order keep the
    // reduction deterministic
    let partials: Vec<[f64; 6]> = samples
        .par_chunks(8192)
        .map(|chunk| {
            let mut s = [0.0f64; 6]; // n, sa, sb, saa, sbb, sab
            for (pos, a) in chunk {
                let p = map.apply(*pos);
                let ci = moving.geometry().continuous_index(p);
                let inside =
                    (0..3).all(|d| ci[d] >= 0.0 && ci[d] <= (mdims[d] - 1) as f64);
                if !inside {
                    continue;
                }
                let b = moving.sample_trilinear_ci(ci);
                s[0] += 1.0;
                s[1] += a;
                s[2] += b;
                s[3] += a * a;
                s[4] += b * b;
                s[5] += a * b;
            }
            s
        })
        .collect();
    let mut total = [0.0f64; 6];
    for p in partials {
        for d in 0..6 {
            total[d] += p[d];
        }
    }
    let n = total[0];
    if n < 32.0 {
        return Err(Error::DegenerateInput(format!(
            "only {n} overlapping voxels for the correlation metric"
        )));
    }
    let var_a = total[3] - total[1] * total[1] / n;
    let var_b = total[4] - total[2] * total[2] / n;
    if var_a <= 0.0 || var_b <= 0.0 {
        return Err(Error::DegenerateInput(
            "constant channel in overlap region".into(),
        ));
    }
    let cov = total[5] - total[1] * total[2] / n;
    Ok(cov / (var_a * var_b).sqrt())
}

fn fd_gradient(params: &Params, eval: &impl Fn(&Params) -> Result<f64>) -> Result<Vec<f64>> {
    let n = params.values.len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let mut hi = params.clone();
        hi.values[i] += FD_STEP;
        let mut lo = params.clone();
        lo.values[i] -= FD_STEP;
        grad[i] = (eval(&hi)? - eval(&lo)?) / (2.0 * FD_STEP);
    }
    Ok(grad)
}

/// Optimizer parameter vector.
///
/// Rigid: `[rx, ry, rz, tx, ty, tz]` — rotation vector in radians plus
/// translation in `t_scale` units. Affine: 9 row-major linear entries
/// followed by the scaled translation.
#[derive(Debug, Clone)]
struct Params {
    mode: RegistrationMode,
    values: Vec<f64>,
    center: Point3<f64>,
    t_scale: f64,
}

impl Params {
    fn from_init(
        mode: RegistrationMode,
        init: Option<&LinearTransform>,
        center: Point3<f64>,
        t_scale: f64,
    ) -> Params {
        let affine = init
            .map(|t| t.as_affine(center))
            .unwrap_or_else(|| AffineTransform {
                linear: Matrix3::identity(),
                translation: Vector3::zeros(),
                center,
            });
        let values = match mode {
            RegistrationMode::Rigid => {
                let rot = UnitQuaternion::from_matrix(&affine.linear);
                let axis = rot.scaled_axis();
                vec![
                    axis.x,
                    axis.y,
                    axis.z,
                    affine.translation.x / t_scale,
                    affine.translation.y / t_scale,
                    affine.translation.z / t_scale,
                ]
            }
            RegistrationMode::Affine => {
                let m = affine.linear;
                vec![
                    m[(0, 0)],
                    m[(0, 1)],
                    m[(0, 2)],
                    m[(1, 0)],
                    m[(1, 1)],
                    m[(1, 2)],
                    m[(2, 0)],
                    m[(2, 1)],
                    m[(2, 2)],
                    affine.translation.x / t_scale,
                    affine.translation.y / t_scale,
                    affine.translation.z / t_scale,
                ]
            }
        };
        Params {
            mode,
            values,
            center,
            t_scale,
        }
    }

    fn stepped(&self, direction: &[f64], scale: f64) -> Params {
        let mut out = self.clone();
        for (v, d) in out.values.iter_mut().zip(direction) {
            *v += d * scale;
        }
        out
    }

    fn to_map(&self) -> AffineMap {
        self.to_affine().to_map()
    }

    fn to_affine(&self) -> AffineTransform {
        match self.mode {
            RegistrationMode::Rigid => {
                let v = &self.values;
                let rot = UnitQuaternion::from_scaled_axis(Vector3::new(v[0], v[1], v[2]));
                AffineTransform {
                    linear: rot.to_rotation_matrix().into_inner(),
                    translation: Vector3::new(v[3], v[4], v[5]) * self.t_scale,
                    center: self.center,
                }
            }
            RegistrationMode::Affine => {
                let v = &self.values;
                AffineTransform {
                    linear: Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]),
                    translation: Vector3::new(v[9], v[10], v[11]) * self.t_scale,
                    center: self.center,
                }
            }
        }
    }

    fn to_transform(&self) -> Result<LinearTransform> {
        let affine = self.to_affine();
        match self.mode {
            RegistrationMode::Rigid => {
                let v = &self.values;
                let rigid = RigidTransform {
                    rotation: UnitQuaternion::from_scaled_axis(Vector3::new(v[0], v[1], v[2])),
                    translation: affine.translation,
                    center: self.center,
                };
                rigid.validate()?;
                Ok(LinearTransform::Rigid(rigid))
            }
            RegistrationMode::Affine => {
                affine
                    .validate()
                    .map_err(|e| Error::RegistrationFailure(format!("affine result invalid: {e}")))?;
                Ok(LinearTransform::Affine(affine))
            }
        }
    }
}
