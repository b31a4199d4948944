//! Randomized phantom subjects: the template pushed through a smooth
//! analytic deformation (Gaussian bumps + small per-tooth rigid-like
//! jitter), with additive intensity noise and exact ground truth.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::Field3;
use crate::geom::Geometry;
use crate::volgrid::Grid3;
use crate::{DisplacementField, LabelGrid, VolumeGrid};

use super::template::PhantomTemplate;

/// One Gaussian displacement bump.
#[derive(Debug, Clone)]
pub struct Bump {
    pub center: Point3<f64>,
    pub sigma_mm: f64,
    pub amplitude_mm: Vector3<f64>,
}

/// Small-angle per-tooth rigid-like jitter, windowed around the tooth.
/// The displacement `w(x)·(ω × (x − c) + d)` is linear in `(ω, d)`, so a
/// negated parameter set yields the exactly negated field.
#[derive(Debug, Clone)]
pub struct ToothJitter {
    pub center: Point3<f64>,
    pub window_sigma_mm: f64,
    pub omega: Vector3<f64>,
    pub shift_mm: Vector3<f64>,
}

/// Analytic generative displacement `g`; the subject image is the template
/// sampled at `x + g(x)`.
#[derive(Debug, Clone)]
pub struct DeformationParams {
    pub bumps: Vec<Bump>,
    pub jitters: Vec<ToothJitter>,
    /// Antithetic sign: the whole field is multiplied by ±1.
    pub sign: f64,
}

const CUTOFF_SIGMAS: f64 = 4.0;

impl DeformationParams {
    /// Exact displacement at a physical position (mm).
    pub fn displacement(&self, pos: [f64; 3]) -> [f64; 3] {
        let p = Vector3::new(pos[0], pos[1], pos[2]);
        let mut u = Vector3::zeros();
        for b in &self.bumps {
            let d = p - b.center.coords;
            let r2 = d.norm_squared();
            let cutoff = CUTOFF_SIGMAS * b.sigma_mm;
            if r2 > cutoff * cutoff {
                continue;
            }
            u += b.amplitude_mm * (-r2 / (2.0 * b.sigma_mm * b.sigma_mm)).exp();
        }
        for j in &self.jitters {
            let d = p - j.center.coords;
            let r2 = d.norm_squared();
            let cutoff = CUTOFF_SIGMAS * j.window_sigma_mm;
            if r2 > cutoff * cutoff {
                continue;
            }
            let w = (-r2 / (2.0 * j.window_sigma_mm * j.window_sigma_mm)).exp();
            u += w * (j.omega.cross(&d) + j.shift_mm);
        }
        let u = u * self.sign;
        [u.x, u.y, u.z]
    }

    /// Exact Jacobian `∂g/∂x` at a physical position.
    pub fn gradient(&self, pos: [f64; 3]) -> Matrix3<f64> {
        let p = Vector3::new(pos[0], pos[1], pos[2]);
        let mut grad = Matrix3::zeros();
        for b in &self.bumps {
            let d = p - b.center.coords;
            let r2 = d.norm_squared();
            let cutoff = CUTOFF_SIGMAS * b.sigma_mm;
            if r2 > cutoff * cutoff {
                continue;
            }
            let s2 = b.sigma_mm * b.sigma_mm;
            let w = (-r2 / (2.0 * s2)).exp();
            // d/dx_j of a_i · w = a_i · w · (−d_j/σ²)
            grad += b.amplitude_mm * (d.transpose() * (-w / s2));
        }
        for j in &self.jitters {
            let d = p - j.center.coords;
            let r2 = d.norm_squared();
            let cutoff = CUTOFF_SIGMAS * j.window_sigma_mm;
            if r2 > cutoff * cutoff {
                continue;
            }
            let s2 = j.window_sigma_mm * j.window_sigma_mm;
            let w = (-r2 / (2.0 * s2)).exp();
            let linear = j.omega.cross(&d) + j.shift_mm;
            let skew = Matrix3::new(
                0.0, -j.omega.z, j.omega.y, //
                j.omega.z, 0.0, -j.omega.x, //
                -j.omega.y, j.omega.x, 0.0,
            );
            grad += linear * (d.transpose() * (-w / s2)) + skew * w;
        }
        grad * self.sign
    }

    /// Minimum of `det(I + ∂g/∂x)` over all voxel centres.
    pub fn min_jacobian(&self, geom: &Geometry) -> f64 {
        let indices: Vec<[usize; 3]> = geom.iter_indices().collect();
        indices
            .par_iter()
            .map(|&p| {
                let m = Matrix3::identity() + self.gradient(geom.position(p));
                m.determinant()
            })
            .reduce(|| f64::INFINITY, f64::min)
    }

    /// Largest displacement magnitude over voxel centres, mm.
    pub fn max_magnitude(&self, geom: &Geometry) -> f64 {
        let indices: Vec<[usize; 3]> = geom.iter_indices().collect();
        indices
            .par_iter()
            .map(|&p| {
                let u = self.displacement(geom.position(p));
                (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
            })
            .reduce(|| 0.0, f64::max)
    }
}

/// A deformed, noisy subject with exact ground truth.
#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub id: String,
    pub intensity: VolumeGrid,
    pub labels: LabelGrid,
    /// Ground-truth forward field on the template grid: registering the
    /// template (fixed) to this subject (moving) should recover it.
    pub forward_field: DisplacementField,
    /// The analytic generative displacement.
    pub generative: DeformationParams,
    /// Template mesh vertices transported to subject space by the exact
    /// analytic map, per tooth.
    pub tracked: BTreeMap<u16, Vec<Point3<f64>>>,
    pub seed: u64,
    pub amplitude_voxels: f64,
    pub noise_sigma: f64,
}

const MAX_DEFORMATION_RETRIES: usize = 20;
const JACOBIAN_MARGIN: f64 = 0.05;

/// Generate one subject (positive antithetic sign).
pub fn synthesize_subject(
    template: &PhantomTemplate,
    seed: u64,
    amplitude_voxels: f64,
    noise_sigma: f64,
) -> Result<PhantomSubject> {
    synthesize_signed(template, seed, amplitude_voxels, noise_sigma, 1.0, None)
}

/// Generate a subject with an explicit antithetic sign. `shared_params`
/// reuses an already-drawn deformation (the antithetic partner).
pub fn synthesize_signed(
    template: &PhantomTemplate,
    seed: u64,
    amplitude_voxels: f64,
    noise_sigma: f64,
    sign: f64,
    shared_params: Option<&DeformationParams>,
) -> Result<PhantomSubject> {
    let geom = template.labels.geometry().clone();
    let params = match shared_params {
        Some(p) => {
            let mut p = p.clone();
            p.sign = sign;
            p
        }
        None => draw_deformation(template, seed, amplitude_voxels, sign)?,
    };

    let [nx, ny, _] = geom.dims;
    let slab = nx * ny;

    // subject channels: template sampled at x + g(x)
    let mut intensity_data = vec![0.0f32; geom.voxel_count()];
    let mut label_data = vec![0u16; geom.voxel_count()];
    intensity_data
        .par_chunks_mut(slab)
        .zip(label_data.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(k, (int_out, lab_out))| {
            for j in 0..ny {
                for i in 0..nx {
                    let x = geom.position([i, j, k]);
                    let g = params.displacement(x);
                    let p = [x[0] + g[0], x[1] + g[1], x[2] + g[2]];
                    int_out[i + nx * j] = template.intensity.sample_trilinear_pos(p) as f32;
                    lab_out[i + nx * j] = template.labels.sample_nearest_pos(p).unwrap_or(0);
                }
            }
        });

    // additive Gaussian intensity noise
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::InvalidArgument(format!("bad noise sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4E01_5E00);
        for v in &mut intensity_data {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    let intensity = Grid3::new(geom.clone(), intensity_data)?;
    let labels = Grid3::new(geom.clone(), label_data)?;

    let forward_field = ground_truth_forward_field(&params, &geom);

    // exact vertex transport: solve y + g(y) = p per template vertex
    let mut tracked = BTreeMap::new();
    for (label, mesh) in &template.meshes {
        let pts: Vec<Point3<f64>> = mesh
            .vertices
            .iter()
            .map(|p| {
                let mut y = [p.x, p.y, p.z];
                for _ in 0..80 {
                    let g = params.displacement(y);
                    let next = [p.x - g[0], p.y - g[1], p.z - g[2]];
                    let delta = ((next[0] - y[0]).powi(2)
                        + (next[1] - y[1]).powi(2)
                        + (next[2] - y[2]).powi(2))
                    .sqrt();
                    y = next;
                    if delta < 1e-10 {
                        break;
                    }
                }
                Point3::new(y[0], y[1], y[2])
            })
            .collect();
        tracked.insert(*label, pts);
    }

    Ok(PhantomSubject {
        id: format!("subject-{seed:04x}"),
        intensity,
        labels,
        forward_field,
        generative: params,
        tracked,
        seed,
        amplitude_voxels,
        noise_sigma,
    })
}

/// Draw bumps + jitters, rescale to the requested peak amplitude, and
/// retry with fresh randomness until the Jacobian stays positive.
fn draw_deformation(
    template: &PhantomTemplate,
    seed: u64,
    amplitude_voxels: f64,
    sign: f64,
) -> Result<DeformationParams> {
    let geom = template.labels.geometry();
    let mean_spacing =
        (geom.spacing[0] + geom.spacing[1] + geom.spacing[2]) / 3.0;
    let amplitude_mm = amplitude_voxels * mean_spacing;
    let (lo, hi) = geom.physical_bounds();

    for retry in 0..MAX_DEFORMATION_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xDEF0_0000 + retry as u64));
        let mut bumps = Vec::with_capacity(10);
        for _ in 0..10 {
            let center = Point3::new(
                rng.random_range(lo[0]..hi[0]),
                rng.random_range(lo[1]..hi[1]),
                rng.random_range(lo[2]..hi[2]),
            );
            let sigma_vox = rng.random_range(8.0..16.0);
            let dir = random_unit(&mut rng);
            let magnitude = amplitude_mm * rng.random_range(0.3..1.0);
            bumps.push(Bump {
                center,
                sigma_mm: sigma_vox * mean_spacing,
                amplitude_mm: dir * magnitude,
            });
        }
        let mut jitters = Vec::with_capacity(template.teeth.len());
        for tooth in &template.teeth {
            jitters.push(ToothJitter {
                center: tooth.center,
                window_sigma_mm: 2.5 * tooth.r_tangent.max(tooth.r_normal),
                omega: random_unit(&mut rng) * rng.random_range(0.0..0.02),
                shift_mm: random_unit(&mut rng) * rng.random_range(0.0..0.3 * mean_spacing),
            });
        }
        let mut params = DeformationParams {
            bumps,
            jitters,
            sign: 1.0,
        };

        // normalize the peak displacement to the requested amplitude
        let peak = params.max_magnitude(geom);
        if peak > 0.0 && amplitude_mm > 0.0 {
            let factor = amplitude_mm / peak;
            for b in &mut params.bumps {
                b.amplitude_mm *= factor;
            }
            for j in &mut params.jitters {
                j.omega *= factor;
                j.shift_mm *= factor;
            }
        } else if amplitude_mm == 0.0 {
            for b in &mut params.bumps {
                b.amplitude_mm = Vector3::zeros();
            }
            for j in &mut params.jitters {
                j.omega = Vector3::zeros();
                j.shift_mm = Vector3::zeros();
            }
        }

        if params.min_jacobian(geom) > JACOBIAN_MARGIN {
            params.sign = sign;
            return Ok(params);
        }
    }
    Err(Error::GenerationFailure(format!(
        "deformation kept folding after {MAX_DEFORMATION_RETRIES} retries \
         (amplitude {amplitude_voxels} voxels)"
    )))
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Per-voxel fixed-point solve of `u(x) = −g(x + u(x))` with the analytic
/// field; this is the displacement a template→subject registration should
/// recover.
fn ground_truth_forward_field(params: &DeformationParams, geom: &Geometry) -> DisplacementField {
    let [nx, ny, _] = geom.dims;
    let slab = nx * ny;
    let mean_spacing = (geom.spacing[0] + geom.spacing[1] + geom.spacing[2]) / 3.0;
    let tol = 1e-4 * mean_spacing;
    let mut data = vec![[0.0f32; 3]; geom.voxel_count()];
    data.par_chunks_mut(slab).enumerate().for_each(|(k, out)| {
        for j in 0..ny {
            for i in 0..nx {
                let x = geom.position([i, j, k]);
                let mut u = [0.0f64; 3];
                for _ in 0..60 {
                    let g = params.displacement([x[0] + u[0], x[1] + u[1], x[2] + u[2]]);
                    let next = [-g[0], -g[1], -g[2]];
                    let delta = ((next[0] - u[0]).powi(2)
                        + (next[1] - u[1]).powi(2)
                        + (next[2] - u[2]).powi(2))
                    .sqrt();
                    u = next;
                    if delta < tol {
                        break;
                    }
                }
                out[i + nx * j] = [u[0] as f32, u[1] as f32, u[2] as f32];
            }
        }
    });
    Field3::new(geom.clone(), data).expect("sized to geometry")
}

/// Antithetic cohort: subjects `2i` and `2i+1` share one deformation draw
/// with opposite signs, so the cohort-mean generative field is exactly
/// zero. Noise stays independent per subject.
pub fn cohort(
    template: &PhantomTemplate,
    n: usize,
    base_seed: u64,
    amplitude_voxels: f64,
    noise_sigma: f64,
) -> Result<Vec<PhantomSubject>> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "antithetic cohort size must be even and positive, got {n}"
        )));
    }
    let mut subjects = Vec::with_capacity(n);
    for pair in 0..n / 2 {
        let pair_seed = base_seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(pair as u64 + 1);
        let first = synthesize_signed(
            template,
            pair_seed,
            amplitude_voxels,
            noise_sigma,
            1.0,
            None,
        )?;
        let second = synthesize_signed(
            template,
            pair_seed ^ 0xFFFF,
            amplitude_voxels,
            noise_sigma,
            -1.0,
            Some(&first.generative),
        )?;
        let mut first = first;
        first.id = format!("subject-{:02}", 2 * pair);
        let mut second = second;
        second.id = format!("subject-{:02}", 2 * pair + 1);
        subjects.push(first);
        subjects.push(second);
    }
    Ok(subjects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_template;

    fn small_template() -> PhantomTemplate {
        generate_template(42, [64, 64, 64], [0.4; 3]).unwrap()
    }

    #[test]
    fn zero_amplitude_zero_noise_reproduces_template() {
        let t = small_template();
        let s = synthesize_subject(&t, 9, 0.0, 0.0).unwrap();
        assert_eq!(s.labels.data(), t.labels.data());
        // trilinear sampling at exact voxel centres is bitwise
        assert_eq!(s.intensity.data(), t.intensity.data());
        assert!(s.forward_field.max_voxel_norm() < 1e-9);
    }

    #[test]
    fn accepted_subjects_have_positive_jacobian_everywhere() {
        let t = small_template();
        let s = synthesize_subject(&t, 11, 2.0, 0.0).unwrap();
        let min_jac = s.generative.min_jacobian(t.labels.geometry());
        assert!(min_jac > 0.0, "min jacobian {min_jac}");
        // and the stored forward field inverts the generative map:
        // u(x) + g(x + u(x)) = 0
        let geom = t.labels.geometry();
        let mut worst = 0.0f64;
        for p in [[10usize, 20, 30], [32, 32, 32], [50, 40, 20]] {
            let x = geom.position(p);
            let u = s
                .forward_field
                .vector_at(geom.linear_index(p[0], p[1], p[2]));
            let g = s.generative.displacement([x[0] + u[0], x[1] + u[1], x[2] + u[2]]);
            let r = ((u[0] + g[0]).powi(2) + (u[1] + g[1]).powi(2) + (u[2] + g[2]).powi(2)).sqrt();
            worst = worst.max(r / 0.4);
        }
        assert!(worst < 1e-3, "forward-field residual {worst} voxels");
    }

    #[test]
    fn subject_is_deterministic_for_a_seed() {
        let t = small_template();
        let a = synthesize_subject(&t, 5, 1.5, 0.05).unwrap();
        let b = synthesize_subject(&t, 5, 1.5, 0.05).unwrap();
        assert_eq!(a.intensity.data(), b.intensity.data());
        assert_eq!(a.labels.data(), b.labels.data());
        assert_eq!(a.forward_field.data(), b.forward_field.data());
    }

    #[test]
    fn antithetic_pair_has_exactly_cancelling_fields() {
        let t = small_template();
        let pair = cohort(&t, 2, 77, 2.0, 0.0).unwrap();
        let geom = t.labels.geometry();
        for p in geom.iter_indices().step_by(97) {
            let x = geom.position(p);
            let ga = pair[0].generative.displacement(x);
            let gb = pair[1].generative.displacement(x);
            for d in 0..3 {
                assert_eq!(ga[d], -gb[d], "component {d} at {p:?}");
            }
        }
    }

    #[test]
    fn cohort_mean_generative_field_is_zero_and_labels_complete() {
        let t = small_template();
        let subjects = cohort(&t, 4, 123, 2.0, 0.0).unwrap();
        let geom = t.labels.geometry();
        let mut worst = 0.0f64;
        for p in geom.iter_indices().step_by(53) {
            let x = geom.position(p);
            let mut mean = [0.0f64; 3];
            for s in &subjects {
                let g = s.generative.displacement(x);
                for d in 0..3 {
                    mean[d] += g[d] / subjects.len() as f64;
                }
            }
            worst = worst.max((mean[0].powi(2) + mean[1].powi(2) + mean[2].powi(2)).sqrt());
        }
        assert!(worst < 1e-9 * 0.4, "mean generative field {worst} mm");

        // every subject keeps all 28 tooth labels
        for s in &subjects {
            let mut present = std::collections::BTreeSet::new();
            for &l in s.labels.data() {
                if l != 0 {
                    present.insert(l);
                }
            }
            assert_eq!(present.len(), 28, "{}", s.id);
        }
    }

    #[test]
    fn odd_cohort_size_is_rejected() {
        let t = small_template();
        assert!(cohort(&t, 3, 1, 1.0, 0.0).is_err());
    }
}
