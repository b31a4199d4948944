//! Coherent point drift: non-rigid Gaussian-mixture EM registration of a
//! template point set onto a target point set.
//!
//! Template points are mixture centroids moving coherently as `T = Y + GW`,
//! with `G` the Gaussian kernel gram matrix of width `beta`. The E-step
//! computes posteriors with a uniform outlier component of weight `w`; the
//! M-step solves `(G + λσ²·d(P1)⁻¹)·W = d(P1)⁻¹·P·X − Y` and re-estimates
//! `σ²`. Both sets are normalized internally to the target's centroid and
//! RMS radius.

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::kdtree::KdTree;

/// CPD hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpdConfig {
    /// Gaussian kernel width in mm; `None` picks 2.0 x the mean
    /// nearest-neighbour spacing of the template points.
    pub beta: Option<f64>,
    /// Motion-coherence regularization weight.
    pub lambda: f64,
    /// Uniform outlier weight in `[0, 1)`.
    pub outlier_weight: f64,
    pub max_em_iterations: usize,
    /// Termination threshold on the change of the penalized objective.
    pub tolerance: f64,
    /// Upper bound on CPD control points; larger sets are subsampled and
    /// remaining vertices ride along through the learned kernel motion.
    pub max_points: usize,
}

impl Default for CpdConfig {
    fn default() -> Self {
        CpdConfig {
            beta: None,
            lambda: 3.0,
            outlier_weight: 0.1,
            max_em_iterations: 150,
            tolerance: 1e-8,
            max_points: 3000,
        }
    }
}

impl CpdConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return Err(Error::Config(format!("cpd beta must be positive, got {b}")));
            }
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "cpd lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.outlier_weight) {
            return Err(Error::Config(format!(
                "cpd outlier weight must lie in [0, 1), got {}",
                self.outlier_weight
            )));
        }
        if self.max_em_iterations == 0 || self.max_points == 0 {
            return Err(Error::Config("cpd iteration/point limits must be positive".into()));
        }
        Ok(())
    }
}

/// Result of a CPD run. Holds everything needed to transport additional
/// points through the learned coherent motion.
#[derive(Debug, Clone)]
pub struct CpdResult {
    /// Template points after the recovered motion, original scale.
    pub moved: Vec<Point3<f64>>,
    /// Posterior correspondence matrix, rows = template points, columns =
    /// target points.
    pub posterior: DMatrix<f64>,
    /// Penalized objective per EM iteration (non-increasing).
    pub objective_trace: Vec<f64>,
    /// Final mixture variance (normalized units).
    pub sigma2: f64,
    control: Vec<Vector3<f64>>,
    weights: DMatrix<f64>,
    beta: f64,
    norm_center: Vector3<f64>,
    norm_scale: f64,
}

impl CpdResult {
    /// Move arbitrary points through the learned kernel motion:
    /// `p -> p + Σ_j exp(-|p-y_j|²/2β²)·W_j` (in normalized coordinates).
    pub fn transport(&self, points: &[Point3<f64>]) -> Vec<Point3<f64>> {
        let inv_two_beta2 = 1.0 / (2.0 * self.beta * self.beta);
        points
            .iter()
            .map(|p| {
                let q = (p.coords - self.norm_center) / self.norm_scale;
                let mut delta = Vector3::zeros();
                for (j, y) in self.control.iter().enumerate() {
                    let g = (-(q - y).norm_squared() * inv_two_beta2).exp();
                    delta += g * Vector3::new(
                        self.weights[(j, 0)],
                        self.weights[(j, 1)],
                        self.weights[(j, 2)],
                    );
                }
                Point3::from((q + delta) * self.norm_scale + self.norm_center)
            })
            .collect()
    }

    /// Hard correspondence: for each template point, the target index with
    /// the largest posterior.
    pub fn argmax_correspondence(&self) -> Vec<usize> {
        (0..self.posterior.nrows())
            .map(|m| {
                let row = self.posterior.row(m);
                let mut best = (0usize, f64::NEG_INFINITY);
                for (n, &v) in row.iter().enumerate() {
                    if v > best.1 {
                        best = (n, v);
                    }
                }
                best.0
            })
            .collect()
    }
}

/// Mean distance to the nearest other point.
pub fn mean_nearest_neighbor_spacing(points: &[Point3<f64>]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let tree = KdTree::build(points);
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let two = tree.k_nearest(p, 2);
        let d2 = two
            .iter()
            .find(|(j, _)| *j != i)
            .map(|(_, d2)| *d2)
            .unwrap_or(0.0);
        total += d2.sqrt();
    }
    total / points.len() as f64
}

pub fn cpd_nonrigid(
    template: &[Point3<f64>],
    target: &[Point3<f64>],
    cfg: &CpdConfig,
) -> Result<CpdResult> {
    cfg.validate()?;
    if template.is_empty() || target.is_empty() {
        return Err(Error::DegenerateInput("cpd needs nonempty point sets".into()));
    }

    let m = template.len();
    let n = target.len();

    // normalize both sets by the target's centroid and RMS radius
    let center = target
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords)
        / n as f64;
    let scale = {
        let s: f64 = target
            .iter()
            .map(|p| (p.coords - center).norm_squared())
            .sum::<f64>()
            / n as f64;
        s.sqrt().max(1e-12)
    };
    let y: Vec<Vector3<f64>> = template
        .iter()
        .map(|p| (p.coords - center) / scale)
        .collect();
    let x: Vec<Vector3<f64>> = target
        .iter()
        .map(|p| (p.coords - center) / scale)
        .collect();

    let beta = cfg
        .beta
        .unwrap_or_else(|| 2.0 * mean_nearest_neighbor_spacing(template))
        / scale;
    let lambda = cfg.lambda;
    let w = cfg.outlier_weight;

    // kernel gram matrix with a tiny ridge for numerical definiteness
    let inv_two_beta2 = 1.0 / (2.0 * beta * beta);
    let mut g = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = (-(y[i] - y[j]).norm_squared() * inv_two_beta2).exp();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    for i in 0..m {
        g[(i, i)] += 1e-9;
    }

    let mut sigma2 = {
        let mut s = 0.0;
        for yi in &y {
            for xj in &x {
                s += (yi - xj).norm_squared();
            }
        }
        s / (3.0 * m as f64 * n as f64)
    };

    let mut weights = DMatrix::<f64>::zeros(m, 3);
    let mut moved: Vec<Vector3<f64>> = y.clone();
    let mut posterior = DMatrix::<f64>::zeros(m, n);
    let mut trace: Vec<f64> = Vec::new();

    for _ in 0..cfg.max_em_iterations {
        // E-step
        let c = (2.0 * std::f64::consts::PI * sigma2).powf(1.5) * w * m as f64
            / ((1.0 - w) * n as f64);
        let mut neg_log_lik = 0.0;
        for j in 0..n {
            let mut denom = c;
            for i in 0..m {
                let p = (-(moved[i] - x[j]).norm_squared() / (2.0 * sigma2)).exp();
                posterior[(i, j)] = p;
                denom += p;
            }
            if denom <= 0.0 || !denom.is_finite() {
                return Err(Error::NumericalFailure(
                    "cpd posterior denominator collapsed".into(),
                ));
            }
            for i in 0..m {
                posterior[(i, j)] /= denom;
            }
            neg_log_lik -= denom.ln();
        }
        neg_log_lik += n as f64 * 1.5 * sigma2.ln();
        let penalty = 0.5 * lambda * (weights.transpose() * &g * &weights).trace();
        let objective = neg_log_lik + penalty;
        let converged_by_tol = trace
            .last()
            .is_some_and(|prev| (prev - objective).abs() < cfg.tolerance);
        trace.push(objective);
        if converged_by_tol {
            break;
        }

        // M-step: (G + λσ² D⁻¹) W = D⁻¹ P X − Y with D = diag(P1)
        let p1: DVector<f64> = posterior.column_sum();
        let pt1: DVector<f64> = posterior.row_sum().transpose();
        let np: f64 = p1.sum();
        if np <= 0.0 {
            return Err(Error::NumericalFailure("cpd lost all correspondences".into()));
        }
        let mut system = g.clone();
        for i in 0..m {
            system[(i, i)] += lambda * sigma2 / p1[i].max(1e-12);
        }
        let mut rhs = DMatrix::<f64>::zeros(m, 3);
        for i in 0..m {
            let mut px = Vector3::zeros();
            for j in 0..n {
                px += posterior[(i, j)] * x[j];
            }
            let d_inv = 1.0 / p1[i].max(1e-12);
            let v = px * d_inv - y[i];
            rhs[(i, 0)] = v.x;
            rhs[(i, 1)] = v.y;
            rhs[(i, 2)] = v.z;
        }
        weights = match system.clone().cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => system
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::NumericalFailure("cpd M-step system is singular".into()))?,
        };
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("cpd produced non-finite motion".into()));
        }

        for i in 0..m {
            let gw = {
                let mut acc = Vector3::zeros();
                for j in 0..m {
                    acc += g[(i, j)]
                        * Vector3::new(weights[(j, 0)], weights[(j, 1)], weights[(j, 2)]);
                }
                acc
            };
            moved[i] = y[i] + gw;
        }

        // σ² update
        let mut xpx = 0.0;
        for j in 0..n {
            xpx += pt1[j] * x[j].norm_squared();
        }
        let mut cross = 0.0;
        let mut tdt = 0.0;
        for i in 0..m {
            let mut px = Vector3::zeros();
            for j in 0..n {
                px += posterior[(i, j)] * x[j];
            }
            cross += px.dot(&moved[i]);
            tdt += p1[i] * moved[i].norm_squared();
        }
        sigma2 = (xpx - 2.0 * cross + tdt) / (3.0 * np);
        if !sigma2.is_finite() {
            return Err(Error::NumericalFailure("cpd variance diverged".into()));
        }
        if sigma2 < 1e-12 {
            sigma2 = 1e-12;
            break; // variance collapse: converged
        }
    }

    Ok(CpdResult {
        moved: moved
            .iter()
            .map(|v| Point3::from(v * scale + center))
            .collect(),
        posterior,
        objective_trace: trace,
        sigma2,
        control: y,
        weights,
        beta,
        norm_center: center,
        norm_scale: scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_points(n_side: usize, jitter_seed: u64) -> Vec<Point3<f64>> {
        let mut state = jitter_seed;
        let mut next = move || {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            (z ^ (z >> 31)) as f64 / u64::MAX as f64 - 0.5
        };
        let mut pts = Vec::new();
        for k in 0..n_side {
            for j in 0..n_side {
                for i in 0..n_side {
                    pts.push(Point3::new(
                        i as f64 + 0.3 * next(),
                        j as f64 + 0.3 * next(),
                        k as f64 + 0.3 * next(),
                    ));
                }
            }
        }
        pts
    }

    fn bbox_diagonal(pts: &[Point3<f64>]) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in pts {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt()
    }

    #[test]
    fn self_registration_is_identity_matching() {
        let pts = grid_points(5, 3);
        let diag = bbox_diagonal(&pts);
        let r = cpd_nonrigid(&pts, &pts, &CpdConfig::default()).unwrap();
        for (a, b) in r.moved.iter().zip(&pts) {
            assert!((a - b).norm() < 1e-3 * diag);
        }
        let matches = r.argmax_correspondence();
        for (m, &n) in matches.iter().enumerate() {
            assert_eq!(m, n, "template point {m} matched {n}");
        }
    }

    #[test]
    fn objective_is_monotone_non_increasing() {
        let template = grid_points(5, 3);
        let target: Vec<Point3<f64>> = grid_points(5, 3)
            .into_iter()
            .map(|p| {
                Point3::new(
                    p.x + 0.2 * (0.8 * p.y).sin(),
                    p.y + 0.15 * (0.6 * p.z).cos(),
                    p.z + 0.2 * (0.7 * p.x).sin(),
                )
            })
            .collect();
        let r = cpd_nonrigid(&template, &target, &CpdConfig::default()).unwrap();
        for w in r.objective_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-10,
                "objective increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn smooth_deformation_is_recovered() {
        let template = grid_points(6, 7);
        let diag = bbox_diagonal(&template);
        // known smooth displacement (Gaussian bump, amplitude 5% of bbox)
        let amp = 0.05 * diag;
        let deform = |p: &Point3<f64>| {
            let c = Vector3::new(2.5, 2.5, 2.5);
            let d: Vector3<f64> = p.coords - c;
            let g = (-d.norm_squared() / 8.0).exp();
            Point3::new(p.x + amp * g, p.y - 0.6 * amp * g, p.z + 0.4 * amp * g)
        };
        let target: Vec<Point3<f64>> = template.iter().map(&deform).collect();
        let r = cpd_nonrigid(&template, &target, &CpdConfig::default()).unwrap();
        // tracked correspondences: moved template point i should land on
        // deform(template[i])
        let mut total = 0.0;
        for (i, p) in template.iter().enumerate() {
            total += (r.moved[i] - deform(p)).norm();
        }
        let mean = total / template.len() as f64;
        assert!(
            mean < 0.01 * diag,
            "mean correspondence error {mean} vs 1% of diagonal {}",
            0.01 * diag
        );
    }

    #[test]
    fn outliers_do_not_break_inlier_correspondence() {
        let template = grid_points(5, 11);
        let mut target = template.clone();
        // 10% uniform outliers appended after the true counterparts
        let n_out = template.len() / 10;
        let mut state = 77u64;
        let mut next = move || {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            (z ^ (z >> 31)) as f64 / u64::MAX as f64
        };
        for _ in 0..n_out {
            target.push(Point3::new(next() * 6.0 - 1.0, next() * 6.0 - 1.0, next() * 6.0 - 1.0));
        }
        let cfg = CpdConfig {
            outlier_weight: 0.1,
            ..CpdConfig::default()
        };
        let r = cpd_nonrigid(&template, &target, &cfg).unwrap();
        let matches = r.argmax_correspondence();
        let correct = matches
            .iter()
            .enumerate()
            .filter(|&(m, &n)| m == n)
            .count();
        let accuracy = correct as f64 / template.len() as f64;
        assert!(accuracy >= 0.95, "inlier accuracy {accuracy}");
    }
}
