//! On-disk formats for corresponded shape sets and PCA shape models:
//! a JSON header plus little-endian f64 binary blobs referenced from it.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Point3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shape::{CorrespondedShapeSet, ShapeModel};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeSetHeader {
    n_subjects: usize,
    n_vertices: usize,
    source_ids: Vec<String>,
    triangles: Vec<[u32; 3]>,
    /// Blob of n_subjects x n_vertices x 3 little-endian f64, row-major.
    shapes_blob: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeModelHeader {
    n_vertices: usize,
    n_modes: usize,
    eigenvalues: Vec<f64>,
    explained_variance_ratio: Vec<f64>,
    triangles: Vec<[u32; 3]>,
    /// 3m little-endian f64.
    mean_blob: String,
    /// 3m x k little-endian f64, column-major (one mode after another).
    modes_blob: String,
}

fn write_f64_blob(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_f64_blob(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::format(
            path.display().to_string(),
            format!("blob is {} bytes, expected {}", bytes.len(), expected * 8),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

/// Write `<stem>.json` + `<stem>.shapes.f64` under `dir`.
pub fn write_shape_set(dir: &Path, stem: &str, set: &CorrespondedShapeSet) -> Result<()> {
    let blob_name = format!("{stem}.shapes.f64");
    let header = ShapeSetHeader {
        n_subjects: set.n_subjects(),
        n_vertices: set.n_vertices(),
        source_ids: set.source_ids.clone(),
        triangles: set.topology.clone(),
        shapes_blob: blob_name.clone(),
    };
    write_f64_blob(
        &dir.join(&blob_name),
        set.shapes
            .iter()
            .flat_map(|s| s.iter().flat_map(|p| [p.x, p.y, p.z])),
    )?;
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&header)
            .map_err(|e| Error::Config(format!("shape set serialization: {e}")))?,
    )
    .map_err(|e| Error::io(json_path.display().to_string(), e))
}

pub fn read_shape_set(json_path: &Path) -> Result<CorrespondedShapeSet> {
    let text = std::fs::read_to_string(json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let header: ShapeSetHeader = serde_json::from_str(&text)
        .map_err(|e| Error::format(json_path.display().to_string(), e.to_string()))?;
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let values = read_f64_blob(
        &dir.join(&header.shapes_blob),
        header.n_subjects * header.n_vertices * 3,
    )?;
    let mut shapes = Vec::with_capacity(header.n_subjects);
    for s in 0..header.n_subjects {
        let base = s * header.n_vertices * 3;
        shapes.push(
            (0..header.n_vertices)
                .map(|i| {
                    Point3::new(
                        values[base + 3 * i],
                        values[base + 3 * i + 1],
                        values[base + 3 * i + 2],
                    )
                })
                .collect(),
        );
    }
    CorrespondedShapeSet::new(header.triangles, shapes, header.source_ids)
}

/// Write `<stem>.json`, `<stem>.mean.f64` and `<stem>.modes.f64` under `dir`.
pub fn write_shape_model(dir: &Path, stem: &str, model: &ShapeModel) -> Result<()> {
    let mean_blob = format!("{stem}.mean.f64");
    let modes_blob = format!("{stem}.modes.f64");
    let header = ShapeModelHeader {
        n_vertices: model.n_vertices(),
        n_modes: model.n_modes(),
        eigenvalues: model.eigenvalues.clone(),
        explained_variance_ratio: model.explained_variance_ratio.clone(),
        triangles: model.topology.clone(),
        mean_blob: mean_blob.clone(),
        modes_blob: modes_blob.clone(),
    };
    write_f64_blob(&dir.join(&mean_blob), model.mean.iter().copied())?;
    write_f64_blob(
        &dir.join(&modes_blob),
        (0..model.n_modes()).flat_map(|k| model.modes.column(k).iter().copied().collect::<Vec<_>>()),
    )?;
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&header)
            .map_err(|e| Error::Config(format!("model serialization: {e}")))?,
    )
    .map_err(|e| Error::io(json_path.display().to_string(), e))
}

pub fn read_shape_model(json_path: &Path) -> Result<ShapeModel> {
    let text = std::fs::read_to_string(json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let header: ShapeModelHeader = serde_json::from_str(&text)
        .map_err(|e| Error::format(json_path.display().to_string(), e.to_string()))?;
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let d = header.n_vertices * 3;
    let mean = DVector::from_vec(read_f64_blob(&dir.join(&header.mean_blob), d)?);
    let mode_values = read_f64_blob(&dir.join(&header.modes_blob), d * header.n_modes)?;
    let modes = DMatrix::from_column_slice(d, header.n_modes, &mode_values);
    if header.eigenvalues.len() != header.n_modes
        || header.explained_variance_ratio.len() != header.n_modes
    {
        return Err(Error::format(
            json_path.display().to_string(),
            "eigenvalue/ratio counts disagree with n_modes",
        ));
    }
    Ok(ShapeModel {
        mean,
        modes,
        eigenvalues: header.eigenvalues,
        explained_variance_ratio: header.explained_variance_ratio,
        topology: header.triangles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::pca_fit;
    use tempfile::tempdir;

    fn sample_set() -> CorrespondedShapeSet {
        let shapes: Vec<Vec<Point3<f64>>> = (0..4)
            .map(|s| {
                (0..12)
                    .map(|i| {
                        Point3::new(
                            i as f64 + 0.1 * s as f64,
                            (i * i % 7) as f64,
                            -(s as f64) + 0.25 * i as f64,
                        )
                    })
                    .collect()
            })
            .collect();
        CorrespondedShapeSet::new(
            vec![[0, 1, 2], [2, 3, 4]],
            shapes,
            (0..4).map(|i| format!("s{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn shape_set_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let set = sample_set();
        write_shape_set(dir.path(), "teeth", &set).unwrap();
        let back = read_shape_set(&dir.path().join("teeth.json")).unwrap();
        assert_eq!(back.topology, set.topology);
        assert_eq!(back.source_ids, set.source_ids);
        for (a, b) in back.shapes.iter().zip(&set.shapes) {
            assert_eq!(a, b); // f64 blobs are bit-exact
        }
    }

    #[test]
    fn shape_model_round_trip_preserves_modes_exactly() {
        let dir = tempdir().unwrap();
        let model = pca_fit(&sample_set()).unwrap();
        write_shape_model(dir.path(), "model", &model).unwrap();
        let back = read_shape_model(&dir.path().join("model.json")).unwrap();
        assert_eq!(back.mean, model.mean);
        assert_eq!(back.modes, model.modes);
        assert_eq!(back.eigenvalues, model.eigenvalues);
        assert_eq!(back.topology, model.topology);
    }

    #[test]
    fn wrong_blob_size_is_rejected() {
        let dir = tempdir().unwrap();
        let set = sample_set();
        write_shape_set(dir.path(), "teeth", &set).unwrap();
        let blob = dir.path().join("teeth.shapes.f64");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_shape_set(&dir.path().join("teeth.json")).is_err());
    }
}
