//! ASCII PLY mesh writer/reader: vertex x/y/z float properties plus a face
//! vertex_indices list.

use std::io::Write;
use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::shape::SurfaceMesh;

pub fn write_mesh(path: &Path, mesh: &SurfaceMesh) -> Result<()> {
    let display = path.display().to_string();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str(&format!("element face {}\n", mesh.triangles.len()));
    out.push_str("property list uchar int vertex_indices\n");
    out.push_str("end_header\n");
    for v in &mesh.vertices {
        out.push_str(&format!("{} {} {}\n", v.x as f32, v.y as f32, v.z as f32));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(&display, e))
}

pub fn read_mesh(path: &Path) -> Result<SurfaceMesh> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut lines = text.lines();

    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::format(&display, "missing ply magic"));
    }
    let mut n_vertices = None;
    let mut n_faces = None;
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "ascii", _] => {}
            ["element", "vertex", n] => {
                n_vertices = Some(n.parse::<usize>().map_err(|_| {
                    Error::format(&display, "bad vertex count")
                })?)
            }
            ["element", "face", n] => {
                n_faces = Some(n.parse::<usize>().map_err(|_| {
                    Error::format(&display, "bad face count")
                })?)
            }
            ["format", ..] => {
                return Err(Error::format(&display, "only ascii 1.0 PLY is supported"))
            }
            _ => {} // property declarations, comments
        }
    }
    let n_vertices = n_vertices.ok_or_else(|| Error::format(&display, "no vertex element"))?;
    let n_faces = n_faces.ok_or_else(|| Error::format(&display, "no face element"))?;

    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(&display, "truncated vertex list"))?;
        let nums: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&display, "bad vertex line"))?;
        if nums.len() != 3 {
            return Err(Error::format(&display, "vertex line needs 3 coordinates"));
        }
        vertices.push(Point3::new(nums[0], nums[1], nums[2]));
    }
    let mut triangles = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(&display, "truncated face list"))?;
        let nums: Vec<i64> = line
            .split_whitespace()
            .map(|t| t.parse::<i64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&display, "bad face line"))?;
        if nums.first() != Some(&3) || nums.len() != 4 {
            return Err(Error::format(&display, "only triangle faces are supported"));
        }
        triangles.push([nums[1] as u32, nums[2] as u32, nums[3] as u32]);
    }
    SurfaceMesh::new(vertices, triangles, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_topology_and_f32_coordinates() {
        let mesh = SurfaceMesh::new(
            vec![
                Point3::new(0.125, 0.5, -1.75),
                Point3::new(2.0, 0.0, 0.0),
                Point3::new(0.0, 3.0, 0.0),
                Point3::new(0.0, 0.0, 4.5),
            ],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
            None,
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ply");
        write_mesh(&path, &mesh).unwrap();
        let back = read_mesh(&path).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            // coordinates are serialized at f32 precision
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn empty_mesh_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        write_mesh(&path, &SurfaceMesh::empty()).unwrap();
        let back = read_mesh(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(&path, "solid nope\n").unwrap();
        assert!(read_mesh(&path).is_err());
        std::fs::write(&path, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(read_mesh(&path).is_err());
    }
}
