//! Triangle surface meshes in physical mm coordinates.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};
use crate::register::AffineMap;

use super::kdtree::KdTree;

/// Minimum triangle area kept by cleanup, mm².
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    /// Optional per-vertex tooth label.
    pub labels: Option<Vec<u16>>,
}

impl SurfaceMesh {
    pub fn new(
        vertices: Vec<Point3<f64>>,
        triangles: Vec<[u32; 3]>,
        labels: Option<Vec<u16>>,
    ) -> Result<Self> {
        let n = vertices.len() as u32;
        for t in &triangles {
            if t.iter().any(|&i| i >= n) {
                return Err(Error::InvalidArgument(format!(
                    "triangle {t:?} references vertex beyond {n}"
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != vertices.len() {
                return Err(Error::InvalidArgument(
                    "per-vertex label count differs from vertex count".into(),
                ));
            }
        }
        if vertices
            .iter()
            .any(|v| !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()))
        {
            return Err(Error::InvalidArgument("non-finite mesh vertex".into()));
        }
        Ok(SurfaceMesh {
            vertices,
            triangles,
            labels,
        })
    }

    pub fn empty() -> Self {
        SurfaceMesh {
            vertices: Vec::new(),
            triangles: Vec::new(),
            labels: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_points(&self, t: [u32; 3]) -> [Point3<f64>; 3] {
        [
            self.vertices[t[0] as usize],
            self.vertices[t[1] as usize],
            self.vertices[t[2] as usize],
        ]
    }

    pub fn triangle_area(&self, t: [u32; 3]) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|&t| self.triangle_area(t)).sum()
    }

    /// Signed volume via the divergence theorem; positive for outward
    /// orientation of a closed surface.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&t| {
                let [a, b, c] = self.triangle_points(t);
                a.coords.dot(&b.coords.cross(&c.coords)) / 6.0
            })
            .sum()
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.vertices.is_empty() {
            return None;
        }
        let sum = self
            .vertices
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.vertices.len() as f64))
    }

    /// Drop degenerate (area below [`MIN_TRIANGLE_AREA`]) and duplicate
    /// triangles (same vertex set).
    pub fn cleaned(&self) -> SurfaceMesh {
        let mut seen = std::collections::HashSet::new();
        let triangles = self
            .triangles
            .iter()
            .copied()
            .filter(|&t| {
                if self.triangle_area(t) < MIN_TRIANGLE_AREA {
                    return false;
                }
                let mut key = t;
                key.sort_unstable();
                seen.insert(key)
            })
            .collect();
        SurfaceMesh {
            vertices: self.vertices.clone(),
            triangles,
            labels: self.labels.clone(),
        }
    }

    /// `V - E + F` with `E` counted over unique undirected edges.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Counts of (boundary edges, non-manifold edges, consistently oriented
    /// interior edges). A watertight consistently oriented mesh has zero
    /// boundary and non-manifold edges.
    pub fn edge_statistics(&self) -> EdgeStats {
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *directed.entry((a, b)).or_insert(0) += 1;
            }
        }
        let mut stats = EdgeStats::default();
        let mut visited = std::collections::HashSet::new();
        for (&(a, b), &count) in &directed {
            let key = (a.min(b), a.max(b));
            if !visited.insert(key) {
                continue;
            }
            let reverse = directed.get(&(b, a)).copied().unwrap_or(0);
            let total = count + reverse;
            if total == 1 {
                stats.boundary += 1;
            } else if total == 2 && count == 1 && reverse == 1 {
                stats.oriented_interior += 1;
            } else {
                stats.non_manifold += 1;
            }
        }
        stats
    }

    pub fn transformed(&self, map: &AffineMap) -> SurfaceMesh {
        let vertices = self
            .vertices
            .iter()
            .map(|p| {
                let q = map.apply([p.x, p.y, p.z]);
                Point3::new(q[0], q[1], q[2])
            })
            .collect();
        SurfaceMesh {
            vertices,
            triangles: self.triangles.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Concatenate meshes, offsetting indices; labels merge when all parts
    /// carry them.
    pub fn merged<'a>(parts: impl IntoIterator<Item = &'a SurfaceMesh>) -> SurfaceMesh {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut labels: Option<Vec<u16>> = Some(Vec::new());
        for part in parts {
            let offset = vertices.len() as u32;
            vertices.extend_from_slice(&part.vertices);
            triangles.extend(
                part.triangles
                    .iter()
                    .map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]),
            );
            match (&mut labels, &part.labels) {
                (Some(acc), Some(l)) => acc.extend_from_slice(l),
                _ => labels = None,
            }
        }
        SurfaceMesh {
            vertices,
            triangles,
            labels,
        }
    }

    /// Area-weighted vertex normals (normalized; zero where undefined).
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = self.triangle_points(*t);
            let n = (b - a).cross(&(c - a)); // length ∝ area
            for &i in t {
                normals[i as usize] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }

    /// Deterministic vertex subsample: at most `max_points`, evenly strided
    /// in index order.
    pub fn subsampled_vertices(&self, max_points: usize) -> Vec<Point3<f64>> {
        let n = self.vertices.len();
        if n <= max_points || max_points == 0 {
            return self.vertices.clone();
        }
        let stride = n as f64 / max_points as f64;
        (0..max_points)
            .map(|i| self.vertices[(i as f64 * stride) as usize])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EdgeStats {
    pub boundary: usize,
    pub non_manifold: usize,
    pub oriented_interior: usize,
}

impl EdgeStats {
    pub fn is_watertight_oriented(&self) -> bool {
        self.boundary == 0 && self.non_manifold == 0
    }
}

/// Closest point on triangle `(a, b, c)` to `p` (Ericson, Real-Time
/// Collision Detection §5.1.5).
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Accelerated point-to-surface projection: kd-tree over triangle
/// centroids; the true minimum is taken over the `k` nearest candidate
/// triangles.
pub struct SurfaceProjector<'a> {
    mesh: &'a SurfaceMesh,
    tree: KdTree,
    candidates: usize,
}

impl<'a> SurfaceProjector<'a> {
    pub fn new(mesh: &'a SurfaceMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::DegenerateInput(
                "cannot project onto an empty mesh".into(),
            ));
        }
        let centroids: Vec<Point3<f64>> = mesh
            .triangles
            .iter()
            .map(|&t| {
                let [a, b, c] = mesh.triangle_points(t);
                Point3::from((a.coords + b.coords + c.coords) / 3.0)
            })
            .collect();
        Ok(SurfaceProjector {
            mesh,
            tree: KdTree::build(&centroids),
            candidates: 24,
        })
    }

    /// Closest surface point and its distance.
    pub fn project(&self, p: &Point3<f64>) -> (Point3<f64>, f64) {
        let mut best = (Point3::origin(), f64::INFINITY);
        for (tri_idx, _) in self.tree.k_nearest(p, self.candidates) {
            let [a, b, c] = self.mesh.triangle_points(self.mesh.triangles[tri_idx]);
            let q = closest_point_on_triangle(p, &a, &b, &c);
            let d = (q - p).norm();
            if d < best.1 {
                best = (q, d);
            }
        }
        best
    }
}

/// Mean of the two directed mean vertex-to-surface distances.
pub fn symmetric_surface_distance(a: &SurfaceMesh, b: &SurfaceMesh) -> Result<f64> {
    let pa = SurfaceProjector::new(a)?;
    let pb = SurfaceProjector::new(b)?;
    let mean_to = |verts: &[Point3<f64>], proj: &SurfaceProjector| -> f64 {
        let total: f64 = verts.iter().map(|v| proj.project(v).1).sum();
        total / verts.len() as f64
    };
    Ok(0.5 * (mean_to(&a.vertices, &pb) + mean_to(&b.vertices, &pa)))
}
