//! JSON serialization of linear transforms:
//! `{type, matrix (row-major), translation, center}`.

use std::path::Path;

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::{AffineTransform, LinearTransform, RigidTransform};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformRecord {
    #[serde(rename = "type")]
    kind: String,
    /// Row-major 3x3 linear part.
    matrix: [f64; 9],
    translation: [f64; 3],
    center: [f64; 3],
}

fn to_record(t: &LinearTransform) -> TransformRecord {
    let (kind, linear, translation, center) = match t {
        LinearTransform::Rigid(r) => (
            "rigid",
            r.rotation.to_rotation_matrix().into_inner(),
            r.translation,
            r.center,
        ),
        LinearTransform::Affine(a) => ("affine", a.linear, a.translation, a.center),
    };
    let mut matrix = [0.0; 9];
    for row in 0..3 {
        for col in 0..3 {
            matrix[row * 3 + col] = linear[(row, col)];
        }
    }
    TransformRecord {
        kind: kind.to_string(),
        matrix,
        translation: [translation.x, translation.y, translation.z],
        center: [center.x, center.y, center.z],
    }
}

fn from_record(r: TransformRecord) -> Result<LinearTransform> {
    let m = Matrix3::new(
        r.matrix[0], r.matrix[1], r.matrix[2], //
        r.matrix[3], r.matrix[4], r.matrix[5], //
        r.matrix[6], r.matrix[7], r.matrix[8],
    );
    let translation = Vector3::new(r.translation[0], r.translation[1], r.translation[2]);
    let center = Point3::new(r.center[0], r.center[1], r.center[2]);
    match r.kind.as_str() {
        "rigid" => {
            let rigid = RigidTransform {
                rotation: UnitQuaternion::from_matrix(&m),
                translation,
                center,
            };
            rigid.validate()?;
            // the stored matrix must itself be orthonormal, not merely
            // projectable onto a rotation
            let err = (m.transpose() * m - Matrix3::identity()).abs().max();
            if err > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "rigid matrix not orthonormal (deviation {err:.2e})"
                )));
            }
            Ok(LinearTransform::Rigid(rigid))
        }
        "affine" => {
            let affine = AffineTransform {
                linear: m,
                translation,
                center,
            };
            affine.validate()?;
            Ok(LinearTransform::Affine(affine))
        }
        other => Err(Error::Config(format!("unknown transform type {other:?}"))),
    }
}

pub fn transform_to_json(t: &LinearTransform) -> Result<String> {
    serde_json::to_string_pretty(&to_record(t))
        .map_err(|e| Error::Config(format!("transform serialization: {e}")))
}

pub fn transform_from_json(json: &str) -> Result<LinearTransform> {
    let record: TransformRecord = serde_json::from_str(json)
        .map_err(|e| Error::Config(format!("transform parse: {e}")))?;
    from_record(record)
}

pub fn write_transform(path: &Path, t: &LinearTransform) -> Result<()> {
    std::fs::write(path, transform_to_json(t)?)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_transform(path: &Path) -> Result<LinearTransform> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    transform_from_json(&text)
}
