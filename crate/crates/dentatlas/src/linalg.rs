//! Small dense linear algebra helpers: principal logarithm and exponential
//! of 3x3 matrices, used for log-Euclidean averaging of affine transforms.

use nalgebra::Matrix3;

use crate::error::{Error, Result};

const SERIES_TOL: f64 = 1e-15;
const MAX_SQRT_STEPS: usize = 40;
const MAX_SERIES_TERMS: usize = 80;

/// Matrix exponential by scaling and squaring with a truncated Taylor
/// series on the scaled matrix.
pub fn mat_exp(a: &Matrix3<f64>) -> Matrix3<f64> {
    let norm = a.abs().max();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a * 0.5f64.powi(squarings);
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for k in 1..MAX_SERIES_TERMS {
        term = term * scaled / k as f64;
        sum += term;
        if term.abs().max() < SERIES_TOL {
            break;
        }
    }
    for _ in 0..squarings {
        sum *= sum;
    }
    sum
}

/// Principal matrix logarithm via inverse scaling and squaring:
/// Denman–Beavers square roots until close to the identity, then the
/// `log(I + X)` series. Fails when the square-root iteration cannot
/// converge (e.g. non-positive real eigenvalues).
pub fn mat_log(a: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if a.determinant() <= 0.0 {
        return Err(Error::AveragingFailure(format!(
            "matrix log requires positive determinant, got {}",
            a.determinant()
        )));
    }
    let mut current = *a;
    let mut halvings = 0u32;
    while (current - Matrix3::identity()).abs().max() > 0.25 {
        current = denman_beavers_sqrt(&current)?;
        halvings += 1;
        if halvings as usize > MAX_SQRT_STEPS {
            return Err(Error::AveragingFailure(
                "matrix log: square-root iteration did not approach identity".into(),
            ));
        }
    }
    let x = current - Matrix3::identity();
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::zeros();
    for k in 1..MAX_SERIES_TERMS {
        term *= x;
        let contrib = term * (if k % 2 == 1 { 1.0 } else { -1.0 } / k as f64);
        sum += contrib;
        if contrib.abs().max() < SERIES_TOL {
            break;
        }
    }
    Ok(sum * 2.0f64.powi(halvings as i32))
}

/// Denman–Beavers iteration for the principal square root.
fn denman_beavers_sqrt(a: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let mut y = *a;
    let mut z = Matrix3::identity();
    for _ in 0..100 {
        let y_inv = y.try_inverse().ok_or_else(|| {
            Error::AveragingFailure("matrix log: singular iterate in square root".into())
        })?;
        let z_inv = z.try_inverse().ok_or_else(|| {
            Error::AveragingFailure("matrix log: singular iterate in square root".into())
        })?;
        let y_next = (y + z_inv) * 0.5;
        let z_next = (z + y_inv) * 0.5;
        let delta = (y_next - y).abs().max();
        y = y_next;
        z = z_next;
        if delta < 1e-14 {
            return Ok(y);
        }
    }
    let residual = (y * y - a).abs().max();
    if residual < 1e-10 {
        Ok(y)
    } else {
        Err(Error::AveragingFailure(format!(
            "matrix square root did not converge (residual {residual:.2e})"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn exp_of_zero_is_identity_and_log_of_identity_is_zero() {
        assert!((mat_exp(&Matrix3::zeros()) - Matrix3::identity()).abs().max() < 1e-15);
        assert!(mat_log(&Matrix3::identity()).unwrap().abs().max() < 1e-15);
    }

    #[test]
    fn log_exp_round_trip_on_rotation_and_shear() {
        let rot = nalgebra::Rotation3::from_scaled_axis(Vector3::new(0.2, -0.4, 0.6)).into_inner();
        let shear = Matrix3::new(1.1, 0.2, 0.0, 0.0, 0.95, -0.1, 0.05, 0.0, 1.02);
        for m in [rot, shear] {
            let l = mat_log(&m).unwrap();
            let back = mat_exp(&l);
            assert!(
                (back - m).abs().max() < 1e-12,
                "round trip error {}",
                (back - m).abs().max()
            );
        }
    }

    #[test]
    fn log_of_rotation_is_scaled_skew_generator() {
        let theta = 0.5f64;
        let rot = nalgebra::Rotation3::from_scaled_axis(Vector3::new(0.0, 0.0, theta)).into_inner();
        let l = mat_log(&rot).unwrap();
        assert!((l[(1, 0)] - theta).abs() < 1e-12);
        assert!((l[(0, 1)] + theta).abs() < 1e-12);
        assert!(l[(0, 0)].abs() < 1e-12 && l[(2, 2)].abs() < 1e-12);
    }

    #[test]
    fn log_rejects_negative_determinant() {
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(mat_log(&reflect).is_err());
    }
}
