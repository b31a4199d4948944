//! PCA shape models over corresponded vertex sets.

use nalgebra::{DMatrix, DVector, Point3};

use crate::error::{Error, Result};

/// Shapes with shared topology: one vertex list per subject, identical
/// counts and ordering.
#[derive(Debug, Clone)]
pub struct CorrespondedShapeSet {
    /// Triangles shared by every subject.
    pub topology: Vec<[u32; 3]>,
    /// `n_subjects` shapes, each `n_vertices` points in mm.
    pub shapes: Vec<Vec<Point3<f64>>>,
    pub source_ids: Vec<String>,
}

impl CorrespondedShapeSet {
    pub fn new(
        topology: Vec<[u32; 3]>,
        shapes: Vec<Vec<Point3<f64>>>,
        source_ids: Vec<String>,
    ) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::InvalidArgument("no shapes".into()));
        }
        let n_vertices = shapes[0].len();
        if n_vertices == 0 {
            return Err(Error::InvalidArgument("shapes have no vertices".into()));
        }
        for (i, s) in shapes.iter().enumerate() {
            if s.len() != n_vertices {
                return Err(Error::InvalidArgument(format!(
                    "shape {i} has {} vertices, expected {n_vertices}",
                    s.len()
                )));
            }
            if s.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
                return Err(Error::InvalidArgument(format!("shape {i} has non-finite vertices")));
            }
        }
        if source_ids.len() != shapes.len() {
            return Err(Error::InvalidArgument(
                "source id count differs from shape count".into(),
            ));
        }
        for t in &topology {
            if t.iter().any(|&v| v as usize >= n_vertices) {
                return Err(Error::InvalidArgument(format!(
                    "topology references vertex {} beyond {n_vertices}",
                    t.iter().max().unwrap()
                )));
            }
        }
        Ok(CorrespondedShapeSet {
            topology,
            shapes,
            source_ids,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.shapes.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.shapes[0].len()
    }

    /// Flatten shape `i` to a 3m vector (x0, y0, z0, x1, ...).
    pub fn shape_vector(&self, i: usize) -> DVector<f64> {
        flatten(&self.shapes[i])
    }
}

pub fn flatten(points: &[Point3<f64>]) -> DVector<f64> {
    let mut v = DVector::zeros(points.len() * 3);
    for (i, p) in points.iter().enumerate() {
        v[3 * i] = p.x;
        v[3 * i + 1] = p.y;
        v[3 * i + 2] = p.z;
    }
    v
}

pub fn unflatten(v: &DVector<f64>) -> Vec<Point3<f64>> {
    (0..v.len() / 3)
        .map(|i| Point3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]))
        .collect()
}

/// Linear shape model: mean + orthonormal variation modes.
#[derive(Debug, Clone)]
pub struct ShapeModel {
    /// Mean shape, 3m vector.
    pub mean: DVector<f64>,
    /// Orthonormal modes, 3m x k, columns sorted by descending eigenvalue.
    pub modes: DMatrix<f64>,
    /// Descending non-negative eigenvalues of the (n-1)-normalized
    /// covariance, one per retained mode.
    pub eigenvalues: Vec<f64>,
    /// Per-mode fraction of the total variance; sums to <= 1.
    pub explained_variance_ratio: Vec<f64>,
    /// Topology carried along for synthesizing meshes.
    pub topology: Vec<[u32; 3]>,
}

/// Eigenvalues below this fraction of the largest are treated as numerical
/// noise and dropped.
const EIGENVALUE_FLOOR_RATIO: f64 = 1e-10;

/// Fit a PCA model via the n x n Gram-matrix trick.
pub fn pca_fit(shapes: &CorrespondedShapeSet) -> Result<ShapeModel> {
    let n = shapes.n_subjects();
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "PCA needs at least 2 shapes, got {n}"
        )));
    }
    let d = shapes.n_vertices() * 3;

    let mut mean = DVector::<f64>::zeros(d);
    for i in 0..n {
        mean += shapes.shape_vector(i);
    }
    mean /= n as f64;

    // centered data, rows = subjects
    let mut x = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        let row = shapes.shape_vector(i) - &mean;
        x.row_mut(i).copy_from(&row.transpose());
    }

    // Gram matrix G = X Xᵀ / (n-1); eigvecs v of G lift to covariance
    // eigvecs u = Xᵀ v / sqrt((n-1)·λ)
    let gram = &x * x.transpose() / (n as f64 - 1.0);
    let total_variance = gram.trace();
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let mut kept: Vec<usize> = Vec::new();
    for &i in order.iter().take(n - 1) {
        let l = eig.eigenvalues[i];
        if l > EIGENVALUE_FLOOR_RATIO * lambda_max && l > 0.0 {
            kept.push(i);
        }
    }

    let k = kept.len();
    let mut modes = DMatrix::<f64>::zeros(d, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (col, &i) in kept.iter().enumerate() {
        let l = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        let u = x.transpose() * v / ((n as f64 - 1.0) * l).sqrt();
        modes.set_column(col, &u);
        eigenvalues.push(l);
    }

    let explained_variance_ratio = if total_variance > 0.0 {
        eigenvalues.iter().map(|l| l / total_variance).collect()
    } else {
        vec![0.0; k]
    };

    Ok(ShapeModel {
        mean,
        modes,
        eigenvalues,
        explained_variance_ratio,
        topology: shapes.topology.clone(),
    })
}

impl ShapeModel {
    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.mean.len() / 3
    }

    /// Max deviation of modesᵀ·modes from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.n_modes();
        if k == 0 {
            return 0.0;
        }
        let gram = self.modes.transpose() * &self.modes;
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// `mean + Σ cᵢ·sqrt(λᵢ)·modeᵢ` with coefficients in SD units.
    pub fn synthesize(&self, coeffs_sd: &[f64]) -> Result<DVector<f64>> {
        if coeffs_sd.len() > self.n_modes() {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients for a {}-mode model",
                coeffs_sd.len(),
                self.n_modes()
            )));
        }
        let mut out = self.mean.clone();
        for (i, &c) in coeffs_sd.iter().enumerate() {
            if c != 0.0 {
                out += self.modes.column(i) * (c * self.eigenvalues[i].sqrt());
            }
        }
        Ok(out)
    }

    pub fn synthesize_points(&self, coeffs_sd: &[f64]) -> Result<Vec<Point3<f64>>> {
        Ok(unflatten(&self.synthesize(coeffs_sd)?))
    }

    /// Project a shape onto the modes; coefficients in SD units.
    pub fn project(&self, shape: &DVector<f64>) -> Result<Vec<f64>> {
        if shape.len() != self.mean.len() {
            return Err(Error::InvalidArgument(format!(
                "shape length {} does not match model {}",
                shape.len(),
                self.mean.len()
            )));
        }
        let centered = shape - &self.mean;
        Ok((0..self.n_modes())
            .map(|i| self.modes.column(i).dot(&centered) / self.eigenvalues[i].sqrt())
            .collect())
    }

    /// Smallest k whose cumulative explained-variance ratio reaches
    /// `threshold`.
    pub fn explained_variance_report(&self, threshold: f64) -> Result<usize> {
        let mut cumulative = 0.0;
        for (i, r) in self.explained_variance_ratio.iter().enumerate() {
            cumulative += r;
            if cumulative >= threshold {
                return Ok(i + 1);
            }
        }
        Err(Error::ThresholdNotReachable {
            threshold,
            captured: cumulative,
        })
    }
}
