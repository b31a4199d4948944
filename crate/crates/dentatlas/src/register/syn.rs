//! Symmetric diffeomorphic registration.
//!
//! Both images deform toward a midpoint: two half displacement fields are
//! grown by composing exponentiated, smoothed local-CC gradient updates.
//! The returned forward/inverse maps are compositions of one half map with
//! the inverse of the other, so the pair satisfies the round-trip and
//! Jacobian invariants checked by [`DiffeoPair::new`].

use crate::error::{Error, Result};
use crate::field::{
    compose_fields, exp_field, invert_field, min_interior_jacobian, resample_field, warp_volume,
    DiffeoPair, Field3,
};
use crate::num::{Element, Real};
use crate::smooth::smooth_field;

use super::metric::local_cc_bidirectional;
use super::pyramid::{level_geometry, make_level, trailing_slope, RegistrationSchedule};
use super::transform::LinearTransform;
use super::ChannelPair;

#[derive(Debug, Clone)]
pub struct SynResult<T: Real> {
    pub pair: DiffeoPair<T>,
    /// Metric value per iteration, per level (mean of the two half-warp
    /// directions).
    pub metric_trace: Vec<Vec<f64>>,
    pub final_metric: f64,
}

const MIN_GRADIENT_STEP_VOX: f64 = 1e-4;
const EXP_MIN_SQUARINGS: u32 = 4;
/// Gradients below this voxel norm are floating-point cancellation noise
/// (well-matched images); normalizing them up to a full step would walk the
/// fields randomly.
const MIN_GRADIENT_NORM_VOX: f64 = 1e-9;

/// Symmetric diffeomorphic registration of `moving` onto `fixed`.
///
/// `init` is the linear transform (fixed space → moving space) used to
/// resample the moving channels onto the fixed grid before the deformable
/// stage; the returned fields live on the fixed grid and map onto the
/// init-resampled moving image.
pub fn register_syn<T: Real + Element>(
    fixed: &ChannelPair<T>,
    moving: &ChannelPair<T>,
    init: Option<&LinearTransform>,
    schedule: &RegistrationSchedule,
) -> Result<SynResult<T>> {
    schedule.validate()?;
    if fixed.weights != moving.weights {
        return Err(Error::InvalidArgument(
            "fixed and moving channel weights differ".into(),
        ));
    }

    // resample moving channels onto the fixed grid through the initial map
    let fixed_geom = fixed.intensity.geometry().clone();
    let map = init.map(|t| t.to_map());
    let moving_resampled = moving.map_channels(|g| match &map {
        Some(m) => crate::field::resample_volume_linear(g, m, &fixed_geom),
        None => crate::volgrid::resample_to_geometry(g, &fixed_geom),
    });

    let mut half_fixed: Option<Field3<T>> = None;
    let mut half_moving: Option<Field3<T>> = None;
    let mut trace: Vec<Vec<f64>> = Vec::with_capacity(schedule.levels());
    let mut final_metric = 0.0;

    for level in 0..schedule.levels() {
        let sigma = schedule.smoothing_sigmas_voxels[level];
        let factor = schedule.shrink_factors[level];
        let geom_l = level_geometry(&fixed_geom, factor);
        let fixed_l = fixed.map_channels(|g| make_level(g, sigma, factor));
        let moving_l = moving_resampled.map_channels(|g| make_level(g, sigma, factor));

        let mut u_f = match &half_fixed {
            Some(f) => resample_field(f, &geom_l),
            None => Field3::zeros(geom_l.clone()),
        };
        let mut u_m = match &half_moving {
            Some(f) => resample_field(f, &geom_l),
            None => Field3::zeros(geom_l.clone()),
        };

        let mut step = schedule.gradient_step_voxels;
        let mut level_trace: Vec<f64> = Vec::new();
        let mut iteration = 0usize;
        while iteration < schedule.max_iterations[level] {
            iteration += 1;
            let mut metric = 0.0;
            let mut grad_m = Field3::<T>::zeros(geom_l.clone());
            let mut grad_f = Field3::<T>::zeros(geom_l.clone());

            for ((f_ch, w), (m_ch, _)) in fixed_l
                .active_channels()
                .iter()
                .zip(moving_l.active_channels().iter())
            {
                let wf = warp_volume(f_ch, &u_f);
                let wm = warp_volume(m_ch, &u_m);
                // the CC metric is symmetric; one pass yields both half-warp
                // gradients
                let cc = local_cc_bidirectional(&wf, &wm, schedule.cc_window_radius)?;
                metric += w * cc.metric;
                add_scaled(&mut grad_m, &cc.gradient_b, *w);
                add_scaled(&mut grad_f, &cc.gradient_a, *w);
            }

            level_trace.push(metric);
            final_metric = metric;

            if let Some(slope) = trailing_slope(&level_trace, schedule.convergence_window) {
                if slope.abs() < schedule.convergence_tol {
                    break;
                }
            }

            let update_m = prepare_update(&grad_m, schedule, step)?;
            let update_f = prepare_update(&grad_f, schedule, step)?;
            if update_m.is_none() && update_f.is_none() {
                break; // flat gradient everywhere, nothing to do
            }

            let trial_m = apply_update(&u_m, update_m.as_ref(), schedule)?;
            let trial_f = apply_update(&u_f, update_f.as_ref(), schedule)?;

            if min_interior_jacobian(&trial_m) <= 0.0 || min_interior_jacobian(&trial_f) <= 0.0 {
                step *= 0.5;
                if step < MIN_GRADIENT_STEP_VOX {
                    return Err(Error::RegistrationFailure(format!(
                        "gradient step underflow at level {level} iteration {iteration}: \
                         updates keep folding the deformation"
                    )));
                }
                continue;
            }
            u_m = trial_m;
            u_f = trial_f;
        }

        trace.push(level_trace);
        half_fixed = Some(u_f);
        half_moving = Some(u_m);
    }

    let u_f = half_fixed.expect("at least one level");
    let u_m = half_moving.expect("at least one level");
    let inv_f = invert_field(&u_f)?;
    let inv_m = invert_field(&u_m)?;
    let forward = compose_fields(&u_m, &inv_f)?;
    let inverse = compose_fields(&u_f, &inv_m)?;
    let pair = DiffeoPair::new(forward, inverse)?;

    Ok(SynResult {
        pair,
        metric_trace: trace,
        final_metric,
    })
}

fn add_scaled<T: Real>(acc: &mut Field3<T>, other: &Field3<T>, w: f64) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        for d in 0..3 {
            a[d] = T::of_f64(a[d].as_f64() + w * b[d].as_f64());
        }
    }
}

/// Smooth the raw gradient and rescale it so its largest displacement is
/// `step` voxels. `None` when the gradient vanishes.
fn prepare_update<T: Real>(
    grad: &Field3<T>,
    schedule: &RegistrationSchedule,
    step: f64,
) -> Result<Option<Field3<T>>> {
    let smoothed = smooth_field(grad, schedule.update_field_sigma_voxels);
    let max_norm = smoothed.max_voxel_norm();
    if !max_norm.is_finite() {
        return Err(Error::NumericalFailure("non-finite metric gradient".into()));
    }
    if max_norm < MIN_GRADIENT_NORM_VOX {
        return Ok(None);
    }
    Ok(Some(smoothed.scaled(step / max_norm)))
}

fn apply_update<T: Real>(
    half: &Field3<T>,
    update: Option<&Field3<T>>,
    schedule: &RegistrationSchedule,
) -> Result<Field3<T>> {
    let composed = match update {
        Some(u) => {
            let exp = exp_field(u, EXP_MIN_SQUARINGS)?;
            compose_fields(half, &exp)?
        }
        None => half.clone(),
    };
    Ok(smooth_field(&composed, schedule.total_field_sigma_voxels))
}
