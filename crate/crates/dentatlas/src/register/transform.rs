//! Linear spatial transforms: rigid and affine maps about a centre point.

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Resolved point map `x -> linear·x + offset` (centre already folded in).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub linear: Matrix3<f64>,
    pub offset: Vector3<f64>,
}

impl AffineMap {
    pub fn identity() -> Self {
        AffineMap {
            linear: Matrix3::identity(),
            offset: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.linear * Vector3::new(p[0], p[1], p[2]) + self.offset;
        [v.x, v.y, v.z]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineMap) -> AffineMap {
        AffineMap {
            linear: self.linear * other.linear,
            offset: self.linear * other.offset + self.offset,
        }
    }

    pub fn inverse(&self) -> Result<AffineMap> {
        let inv = self
            .linear
            .try_inverse()
            .ok_or_else(|| Error::NumericalFailure("singular affine map".into()))?;
        Ok(AffineMap {
            linear: inv,
            offset: -(inv * self.offset),
        })
    }
}

/// Rigid transform: rotation about `center`, then translation.
/// Maps `x -> R(x - c) + c + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub center: Point3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            center: Point3::origin(),
        }
    }

    pub fn to_map(&self) -> AffineMap {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let c = self.center.coords;
        AffineMap {
            linear: r,
            offset: c + self.translation - r * c,
        }
    }

    /// Verify the rotation is orthonormal with positive determinant.
    pub fn validate(&self) -> Result<()> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "rigid rotation not orthonormal (max deviation {err:.2e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(
                "rigid rotation must have determinant +1".into(),
            ));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(())
    }
}

/// Affine transform about a centre: `x -> A(x - c) + c + t`, `det A > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub center: Point3<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            linear: Matrix3::identity(),
            translation: Vector3::zeros(),
            center: Point3::origin(),
        }
    }

    pub fn to_map(&self) -> AffineMap {
        let c = self.center.coords;
        AffineMap {
            linear: self.linear,
            offset: c + self.translation - self.linear * c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.linear.iter().all(|v| v.is_finite())
            || !self.translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidArgument("non-finite affine entries".into()));
        }
        if self.linear.determinant() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "affine determinant must be positive, got {}",
                self.linear.determinant()
            )));
        }
        Ok(())
    }

    /// Rebuild from a resolved map, reusing the given centre.
    pub fn from_map(map: &AffineMap, center: Point3<f64>) -> Self {
        // t = offset - c + A c
        let t = map.offset - center.coords + map.linear * center.coords;
        AffineTransform {
            linear: map.linear,
            translation: t,
            center,
        }
    }
}

/// Either linear transform kind, as returned by `register_linear`.
#[derive(Debug, Clone)]
pub enum LinearTransform {
    Rigid(RigidTransform),
    Affine(AffineTransform),
}

impl LinearTransform {
    pub fn to_map(&self) -> AffineMap {
        match self {
            LinearTransform::Rigid(t) => t.to_map(),
            LinearTransform::Affine(t) => t.to_map(),
        }
    }

    pub fn identity() -> Self {
        LinearTransform::Rigid(RigidTransform::identity())
    }

    pub fn as_affine(&self, center: Point3<f64>) -> AffineTransform {
        AffineTransform::from_map(&self.to_map(), center)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn rigid_map_rotates_about_center() {
        let t = RigidTransform {
            rotation: UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, FRAC_PI_2)),
            translation: Vector3::new(1.0, 0.0, 0.0),
            center: Point3::new(10.0, 10.0, 0.0),
        };
        let m = t.to_map();
        // the centre itself only translates
        let c = m.apply([10.0, 10.0, 0.0]);
        assert!((c[0] - 11.0).abs() < 1e-12 && (c[1] - 10.0).abs() < 1e-12);
        // a point one unit +x of centre maps one unit +y of the shifted centre
        let p = m.apply([11.0, 10.0, 0.0]);
        assert!((p[0] - 11.0).abs() < 1e-12 && (p[1] - 11.0).abs() < 1e-12);
    }

    #[test]
    fn map_inverse_round_trips() {
        let t = AffineTransform {
            linear: Matrix3::new(1.1, 0.05, 0.0, -0.02, 0.95, 0.1, 0.0, 0.03, 1.02),
            translation: Vector3::new(2.0, -1.0, 0.5),
            center: Point3::new(1.0, 2.0, 3.0),
        };
        t.validate().unwrap();
        let m = t.to_map();
        let inv = m.inverse().unwrap();
        let p = [3.2, -1.5, 7.0];
        let q = inv.apply(m.apply(p));
        for d in 0..3 {
            assert!((q[d] - p[d]).abs() < 1e-10);
        }
    }

    #[test]
    fn affine_from_map_round_trips() {
        let t = AffineTransform {
            linear: Matrix3::new(1.05, 0.0, 0.02, 0.0, 0.9, 0.0, -0.01, 0.0, 1.0),
            translation: Vector3::new(0.5, 0.25, -0.75),
            center: Point3::new(5.0, 6.0, 7.0),
        };
        let rebuilt = AffineTransform::from_map(&t.to_map(), t.center);
        assert!((rebuilt.linear - t.linear).abs().max() < 1e-12);
        assert!((rebuilt.translation - t.translation).norm() < 1e-12);
    }

    #[test]
    fn negative_determinant_is_rejected() {
        let t = AffineTransform {
            linear: Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
            center: Point3::origin(),
        };
        assert!(t.validate().is_err());
    }
}
