//! Rigid mesh-to-mesh alignment: principal-axes initialization followed by
//! point-to-plane ICP.

use nalgebra::{Matrix3, Matrix6, Point3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::register::{AffineMap, RigidTransform};

use super::kdtree::KdTree;
use super::mesh::SurfaceMesh;

const MAX_ICP_ITERATIONS: usize = 100;
const RMS_CONVERGENCE_MM: f64 = 1e-6;
const MAX_RMS_INCREASES: usize = 5;
const INIT_SAMPLE_POINTS: usize = 500;

/// Rigid transform taking `subject` onto `template` (no scaling).
///
/// Initialization aligns centroids and principal axes, trying the four
/// det-+1 sign combinations and keeping the one with the smallest symmetric
/// nearest-neighbour distance; point-to-plane ICP then refines against the
/// template's vertices and normals.
pub fn rigid_align_to_template(
    subject: &SurfaceMesh,
    template: &SurfaceMesh,
) -> Result<RigidTransform> {
    if subject.vertices.is_empty() || template.vertices.is_empty() {
        return Err(Error::DegenerateInput(
            "rigid alignment needs nonempty meshes".into(),
        ));
    }
    let template_tree = KdTree::build(&template.vertices);
    let template_normals = template.vertex_normals();
    // rough object size for the translation trust region
    let spread = {
        let c = centroid_of(&template.vertices);
        let mean_sq: f64 = template
            .vertices
            .iter()
            .map(|p| (p - c).norm_squared())
            .sum::<f64>()
            / template.vertices.len() as f64;
        mean_sq.sqrt().max(1e-6)
    };

    let mut map = principal_axes_init(subject, template, &template_tree)?;

    let mut prev_rms = f64::INFINITY;
    let mut increases = 0usize;
    for _ in 0..MAX_ICP_ITERATIONS {
        // accumulate the 6x6 point-to-plane normal equations
        let mut ata = Matrix6::<f64>::zeros();
        let mut atb = Vector6::<f64>::zeros();
        let mut sq_sum = 0.0f64;
        let n = subject.vertices.len();
        for v in &subject.vertices {
            let p = apply(&map, v);
            let (qi, _) = template_tree.nearest(&p).expect("nonempty template");
            let q = template.vertices[qi];
            let nrm = template_normals[qi];
            if nrm.norm_squared() == 0.0 {
                continue;
            }
            let r = nrm.dot(&(p - q));
            sq_sum += r * r;
            let jac_rot = p.coords.cross(&nrm);
            let mut j = Vector6::zeros();
            j.fixed_rows_mut::<3>(0).copy_from(&jac_rot);
            j.fixed_rows_mut::<3>(3).copy_from(&nrm);
            ata += j * j.transpose();
            atb -= j * r;
        }
        let rms = (sq_sum / n as f64).sqrt();
        if (prev_rms - rms).abs() < RMS_CONVERGENCE_MM {
            break;
        }
        if rms > prev_rms {
            increases += 1;
            if increases >= MAX_RMS_INCREASES {
                return Err(Error::AlignmentFailure(format!(
                    "ICP diverged: rms grew {MAX_RMS_INCREASES} consecutive iterations \
                     (last {rms:.4} mm)"
                )));
            }
        } else {
            increases = 0;
        }
        prev_rms = rms;

        // near-symmetric shapes leave rotations about their own axis
        // unconstrained; damping pins those null directions at zero update
        let damping = 1e-9 * ata.trace().max(1e-12);
        let mut damped = ata;
        for d in 0..6 {
            damped[(d, d)] += damping;
        }
        let x = damped.lu().solve(&atb).ok_or_else(|| {
            Error::AlignmentFailure("singular point-to-plane system".into())
        })?;
        let mut omega = Vector3::new(x[0], x[1], x[2]);
        let mut t = Vector3::new(x[3], x[4], x[5]);
        // trust region: the point-to-plane step is a linearization, so cap
        // it instead of letting small meshes overshoot and oscillate
        let max_angle = 0.2;
        let max_shift = 0.25 * spread;
        let scale = (max_angle / omega.norm().max(1e-12))
            .min(max_shift / t.norm().max(1e-12))
            .min(1.0);
        omega *= scale;
        t *= scale;
        let delta = AffineMap {
            linear: UnitQuaternion::from_scaled_axis(omega)
                .to_rotation_matrix()
                .into_inner(),
            offset: t,
        };
        map = delta.compose(&map);
    }

    // re-orthonormalize the accumulated rotation
    let rotation = UnitQuaternion::from_matrix(&map.linear);
    let center = template.centroid().unwrap_or_else(Point3::origin);
    let r = rotation.to_rotation_matrix().into_inner();
    // x -> R(x - c) + c + t must equal R x + offset, so t = offset - c + R c
    let translation = map.offset + r * center.coords - center.coords;
    let rigid = RigidTransform {
        rotation,
        translation,
        center,
    };
    rigid.validate()?;
    Ok(rigid)
}

fn apply(map: &AffineMap, p: &Point3<f64>) -> Point3<f64> {
    let q = map.apply([p.x, p.y, p.z]);
    Point3::new(q[0], q[1], q[2])
}

fn centroid_of(points: &[Point3<f64>]) -> Point3<f64> {
    let sum = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Point3::from(sum / points.len() as f64)
}

fn covariance(points: &[Point3<f64>], c: &Point3<f64>) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for p in points {
        let d = p - c;
        m += d * d.transpose();
    }
    m / points.len() as f64
}

/// Sorted principal axes (descending eigenvalue), right-handed.
fn principal_axes(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = nalgebra::SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut axes = Matrix3::zeros();
    for (col, &src) in order.iter().enumerate() {
        axes.set_column(col, &eig.eigenvectors.column(src));
    }
    if axes.determinant() < 0.0 {
        let flipped = -axes.column(2).clone_owned();
        axes.set_column(2, &flipped);
    }
    axes
}

fn principal_axes_init(
    subject: &SurfaceMesh,
    template: &SurfaceMesh,
    template_tree: &KdTree,
) -> Result<AffineMap> {
    let cs = centroid_of(&subject.vertices);
    let ct = centroid_of(&template.vertices);
    let axes_s = principal_axes(&covariance(&subject.vertices, &cs));
    let axes_t = principal_axes(&covariance(&template.vertices, &ct));

    let subject_sample = subject.subsampled_vertices(INIT_SAMPLE_POINTS);
    let template_sample = template.subsampled_vertices(INIT_SAMPLE_POINTS);
    let subject_tree = KdTree::build(&subject.vertices);

    let mut best: Option<(f64, AffineMap)> = None;
    // four proper sign combinations of the axis correspondence, plus the
    // centroid-only candidate (wins when the subject is already aligned and
    // near-degenerate principal axes would flip it away)
    let mut candidates: Vec<Matrix3<f64>> = vec![Matrix3::identity()];
    for signs in [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]] {
        let s = Matrix3::from_diagonal(&Vector3::new(signs[0], signs[1], signs[2]));
        candidates.push(axes_t * s * axes_s.transpose());
    }
    for r in candidates {
        let map = AffineMap {
            linear: r,
            offset: ct.coords - r * cs.coords,
        };
        let inv = map.inverse()?;
        // symmetric nearest-neighbour distance on the subsamples
        let mut total = 0.0;
        for v in &subject_sample {
            let p = apply(&map, v);
            total += template_tree.nearest(&p).map_or(0.0, |(_, d2)| d2.sqrt());
        }
        for v in &template_sample {
            let p = apply(&inv, v);
            total += subject_tree.nearest(&p).map_or(0.0, |(_, d2)| d2.sqrt());
        }
        if best.as_ref().map_or(true, |(d, _)| total < *d) {
            best = Some((total, map));
        }
    }
    Ok(best.expect("four candidates evaluated").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Geometry;
    use crate::shape::mc::extract_surface;
    use crate::volgrid::Grid3;

    /// An asymmetric blob: three fused balls of different sizes.
    fn test_mesh() -> SurfaceMesh {
        let geom = Geometry::unit([36, 30, 26]);
        let g: Grid3<f64> = Grid3::from_fn(geom, |p| {
            let d = |c: [f64; 3], r: f64| {
                let dx = p[0] as f64 - c[0];
                let dy = p[1] as f64 - c[1];
                let dz = p[2] as f64 - c[2];
                r - (dx * dx + dy * dy + dz * dz).sqrt()
            };
            let v = d([12.0, 14.0, 12.0], 7.0)
                .max(d([22.0, 15.0, 13.0], 5.0))
                .max(d([17.0, 19.0, 15.0], 4.0));
            v.max(0.0).min(1.0)
        });
        extract_surface(&g, 0.5).unwrap()
    }

    fn known_motion() -> RigidTransform {
        RigidTransform {
            rotation: UnitQuaternion::from_scaled_axis(Vector3::new(
                0.0,
                10.0f64.to_radians(),
                0.0,
            )),
            translation: Vector3::new(3.0, -2.0, 4.0),
            center: Point3::new(17.0, 15.0, 13.0),
        }
    }

    #[test]
    fn self_alignment_is_identity() {
        let m = test_mesh();
        let t = rigid_align_to_template(&m, &m).unwrap();
        assert!(t.rotation.angle() < 1e-4, "angle {}", t.rotation.angle());
        let map = t.to_map();
        let moved = apply(&map, &Point3::new(17.0, 15.0, 13.0));
        assert!((moved - Point3::new(17.0, 15.0, 13.0)).norm() < 1e-4);
    }

    #[test]
    fn known_rigid_motion_is_recovered() {
        let template = test_mesh();
        let motion = known_motion();
        let subject = template.transformed(&motion.to_map());
        // aligning the moved mesh back onto the template recovers the
        // inverse motion
        let recovered = rigid_align_to_template(&subject, &template).unwrap();
        let composed = recovered.to_map().compose(&motion.to_map());
        // composed should be the identity
        let angle = UnitQuaternion::from_matrix(&composed.linear).angle();
        assert!(angle < 0.1f64.to_radians(), "residual angle {angle}");
        let drift = apply(&composed, &Point3::new(17.0, 15.0, 13.0))
            - Point3::new(17.0, 15.0, 13.0);
        assert!(drift.norm() < 0.05, "residual drift {} mm", drift.norm());
    }

    #[test]
    fn alignment_is_scale_free() {
        let template = test_mesh();
        let c = centroid_of(&template.vertices);
        let scale_map = AffineMap {
            linear: Matrix3::identity() * 1.2,
            offset: c.coords - 1.2 * c.coords,
        };
        let subject = template.transformed(&scale_map);
        let t = rigid_align_to_template(&subject, &template).unwrap();
        // the recovered transform is rigid by construction: its linear part
        // has unit determinant even though the subject is 1.2x larger
        let det = t.to_map().linear.determinant();
        assert!((det - 1.0).abs() < 1e-9);
    }

    #[test]
    fn left_invariance_under_pre_rotation() {
        let template = test_mesh();
        let motion = known_motion();
        let subject = template.transformed(&motion.to_map());
        let base = rigid_align_to_template(&subject, &template).unwrap();

        let pre = RigidTransform {
            rotation: UnitQuaternion::from_scaled_axis(Vector3::new(0.1, -0.05, 0.15)),
            translation: Vector3::new(1.0, 2.0, -1.0),
            center: Point3::new(17.0, 15.0, 13.0),
        };
        let subject2 = subject.transformed(&pre.to_map());
        let recovered = rigid_align_to_template(&subject2, &template).unwrap();
        // argmin equivariance: recovered2 ∘ pre == recovered (within ICP
        // tolerance)
        let lhs = recovered.to_map().compose(&pre.to_map());
        let rhs = base.to_map();
        let rot_diff = UnitQuaternion::from_matrix(&(lhs.linear * rhs.linear.transpose())).angle();
        assert!(rot_diff < 0.01, "rotation difference {rot_diff}");
        let p = Point3::new(20.0, 12.0, 10.0);
        assert!((apply(&lhs, &p) - apply(&rhs, &p)).norm() < 0.3);
    }
}
