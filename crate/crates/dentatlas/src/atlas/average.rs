//! Averaging of transforms and fields for the template shape update.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::field::Field3;
use crate::linalg::{mat_exp, mat_log};
use crate::num::Real;
use crate::register::AffineTransform;

/// Log-Euclidean mean of affine transforms: translations average
/// arithmetically, linear parts through the matrix logarithm. Transforms
/// are first re-centred onto the first transform's centre.
pub fn average_affine_transforms(transforms: &[AffineTransform]) -> Result<AffineTransform> {
    if transforms.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot average zero transforms".into(),
        ));
    }
    let center = transforms[0].center;
    let mut log_sum = Matrix3::<f64>::zeros();
    let mut t_sum = Vector3::<f64>::zeros();
    for t in transforms {
        t.validate()?;
        let recentred = AffineTransform::from_map(&t.to_map(), center);
        log_sum += mat_log(&recentred.linear)?;
        t_sum += recentred.translation;
    }
    let n = transforms.len() as f64;
    let mean = AffineTransform {
        linear: mat_exp(&(log_sum / n)),
        translation: t_sum / n,
        center,
    };
    mean.validate()
        .map_err(|e| Error::AveragingFailure(format!("mean affine invalid: {e}")))?;
    Ok(mean)
}

/// Voxelwise vector mean, accumulated in f64 in a fixed order.
pub fn average_displacement_fields<T: Real>(fields: &[Field3<T>]) -> Result<Field3<T>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot average zero fields".into()))?;
    for f in fields {
        first
            .geometry()
            .check_same(f.geometry(), "average_displacement_fields")?;
    }
    let n = fields.len() as f64;
    let len = first.data().len();
    let mut out = Field3::zeros(first.geometry().clone());
    for i in 0..len {
        let mut acc = [0.0f64; 3];
        for f in fields {
            let v = f.vector_at(i);
            acc[0] += v[0];
            acc[1] += v[1];
            acc[2] += v[2];
        }
        out.data_mut()[i] = [
            T::of_f64(acc[0] / n),
            T::of_f64(acc[1] / n),
            T::of_f64(acc[2] / n),
        ];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Geometry;
    use nalgebra::Point3;

    #[test]
    fn mean_of_identities_is_identity() {
        let ts = vec![AffineTransform::identity(); 3];
        let mean = average_affine_transforms(&ts).unwrap();
        assert!((mean.linear - Matrix3::identity()).abs().max() < 1e-12);
        assert!(mean.translation.norm() < 1e-12);
    }

    #[test]
    fn pure_translations_average_arithmetically() {
        let make = |t: [f64; 3]| AffineTransform {
            linear: Matrix3::identity(),
            translation: Vector3::new(t[0], t[1], t[2]),
            center: Point3::origin(),
        };
        let mean =
            average_affine_transforms(&[make([2.0, 0.0, -4.0]), make([0.0, 1.0, 2.0])]).unwrap();
        assert!((mean.translation - Vector3::new(1.0, 0.5, -1.0)).norm() < 1e-12);
        assert!((mean.linear - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn opposite_rotations_cancel_in_log_space() {
        let theta = 30.0f64.to_radians();
        let rot = |a: f64| AffineTransform {
            linear: nalgebra::Rotation3::from_scaled_axis(Vector3::new(0.0, 0.0, a)).into_inner(),
            translation: Vector3::zeros(),
            center: Point3::origin(),
        };
        let mean = average_affine_transforms(&[rot(theta), rot(-theta)]).unwrap();
        assert!(
            (mean.linear - Matrix3::identity()).abs().max() < 1e-10,
            "residual {}",
            (mean.linear - Matrix3::identity()).abs().max()
        );
    }

    #[test]
    fn field_mean_cancels_and_matches_brute_force() {
        let geom = Geometry::unit([6, 5, 4]);
        let f = Field3::<f32>::from_fn(geom.clone(), |p| {
            [
                (p[0] as f32) * 0.1,
                (p[1] as f32) * -0.2,
                (p[2] as f32) * 0.3,
            ]
        });
        let neg = f.scaled(-1.0);
        let mean = average_displacement_fields(&[f.clone(), neg]).unwrap();
        assert!(mean.max_voxel_norm() < 1e-12);

        let g = Field3::<f32>::from_fn(geom, |p| {
            [
                ((p[0] * 7 + p[1]) % 5) as f32 * 0.25,
                ((p[1] * 3 + p[2]) % 7) as f32 * -0.1,
                ((p[2] * 11 + p[0]) % 3) as f32 * 0.5,
            ]
        });
        let mean = average_displacement_fields(&[f.clone(), g.clone()]).unwrap();
        for i in 0..mean.data().len() {
            let a = f.vector_at(i);
            let b = g.vector_at(i);
            let m = mean.vector_at(i);
            for d in 0..3 {
                assert!((m[d] - (a[d] + b[d]) / 2.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn identical_fields_average_to_themselves() {
        let geom = Geometry::unit([4, 4, 4]);
        let f = Field3::<f32>::from_fn(geom, |p| [p[0] as f32, 0.0, -(p[2] as f32)]);
        let mean = average_displacement_fields(&[f.clone(), f.clone(), f.clone()]).unwrap();
        assert_eq!(mean.data(), f.data());
    }
}
