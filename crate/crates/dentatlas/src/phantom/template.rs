//! Synthetic dental template: 28 superellipsoid teeth (squarish crowns,
//! tapered roots) placed along two elliptical arch curves, with a two-level
//! enamel/dentin intensity pattern over a smooth background.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::Geometry;
use crate::shape::{extract_label_surface, SurfaceMesh};
use crate::volgrid::{Grid3, LabelGrid, VolumeGrid, LOWER_ARCH_ORDER, UPPER_ARCH_ORDER};

/// One synthetic tooth: a crown+root union in a local orthonormal frame.
#[derive(Debug, Clone)]
pub struct ToothShape {
    pub label: u16,
    /// Base point of the tooth on the arch curve (mm).
    pub center: Point3<f64>,
    /// Local axes: arch tangent, horizontal normal, crown direction.
    pub tangent: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub up: Vector3<f64>,
    /// Semi-axes (mm): tangent, normal radii; crown and root heights.
    pub r_tangent: f64,
    pub r_normal: f64,
    pub crown_height: f64,
    pub root_height: f64,
}

impl ToothShape {
    /// Implicit membership test at a physical position.
    pub fn contains(&self, pos: &Point3<f64>) -> bool {
        let d = pos - self.center;
        let u = d.dot(&self.tangent);
        let v = d.dot(&self.normal);
        let w = d.dot(&self.up);
        self.crown_value(u, v, w) <= 1.0 || self.root_value(u, v, w) <= 1.0
    }

    /// True when the position falls in the crown component.
    pub fn in_crown(&self, pos: &Point3<f64>) -> bool {
        let d = pos - self.center;
        self.crown_value(d.dot(&self.tangent), d.dot(&self.normal), d.dot(&self.up)) <= 1.0
    }

    fn crown_value(&self, u: f64, v: f64, w: f64) -> f64 {
        // squarish superellipsoid spanning w in [0, crown_height]
        let h = self.crown_height * 0.5;
        let a = (u / self.r_tangent).abs();
        let b = (v / self.r_normal).abs();
        let c = ((w - h) / h).abs();
        a.powi(4) + b.powi(4) + c.powi(4)
    }

    fn root_value(&self, u: f64, v: f64, w: f64) -> f64 {
        // ellipsoid narrowing with depth, spanning w in [-root_height, 0]
        if w > 0.0 {
            return f64::INFINITY;
        }
        let depth = (-w / self.root_height).clamp(0.0, 1.0);
        let taper = 1.0 - 0.55 * depth;
        let rt = 0.78 * self.r_tangent * taper;
        let rn = 0.78 * self.r_normal * taper;
        let h = self.root_height * 0.5;
        (u / rt).powi(2) + (v / rn).powi(2) + ((w + h) / h).powi(2)
    }

    /// Conservative world-space half-extent for voxel scanning (mm).
    pub fn bound_radius(&self) -> f64 {
        self.r_tangent
            .max(self.r_normal)
            .max(self.crown_height)
            .max(self.root_height)
            + 1.0
    }
}

/// Hidden ground-truth template of the synthetic cohort.
#[derive(Debug, Clone)]
pub struct PhantomTemplate {
    pub intensity: VolumeGrid,
    pub labels: LabelGrid,
    /// Ground-truth surface mesh per tooth, canonical vertex order.
    pub meshes: BTreeMap<u16, SurfaceMesh>,
    pub teeth: Vec<ToothShape>,
    pub seed: u64,
}

const MAX_LAYOUT_ATTEMPTS: usize = 5;

/// Deterministically generate the template for a seed; retries with a wider
/// arch and smaller teeth when the layout self-intersects.
pub fn generate_template(
    seed: u64,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<PhantomTemplate> {
    let geom = Geometry::new(dims, spacing, [0.0; 3])?;
    let mut last_overlap = 0usize;
    for attempt in 0..MAX_LAYOUT_ATTEMPTS {
        let widen = 1.07f64.powi(attempt as i32);
        let shrink = 0.95f64.powi(attempt as i32);
        let teeth = layout_teeth(seed, attempt as u64, &geom, widen, shrink);
        match voxelize(&geom, &teeth, seed) {
            Ok((labels, intensity)) => {
                let mut meshes = BTreeMap::new();
                for tooth in &teeth {
                    let mesh = extract_label_surface(&labels, tooth.label)?;
                    if mesh.is_empty() {
                        return Err(Error::GenerationFailure(format!(
                            "tooth {} produced no surface at {dims:?} voxels",
                            tooth.label
                        )));
                    }
                    meshes.insert(tooth.label, mesh);
                }
                return Ok(PhantomTemplate {
                    intensity,
                    labels,
                    meshes,
                    teeth,
                    seed,
                });
            }
            Err(overlaps) => last_overlap = overlaps,
        }
    }
    Err(Error::GenerationFailure(format!(
        "teeth still overlap after {MAX_LAYOUT_ATTEMPTS} arch widenings ({last_overlap} voxels)"
    )))
}

fn layout_teeth(
    seed: u64,
    attempt: u64,
    geom: &Geometry,
    widen: f64,
    shrink: f64,
) -> Vec<ToothShape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xA5A5_0000 + attempt));
    let [nx, ny, nz] = geom.dims;
    let (sx, sy, sz) = (geom.spacing[0], geom.spacing[1], geom.spacing[2]);
    let mm = |v: f64, s: f64| v * s;

    let cx = mm(0.5 * nx as f64, sx);
    let cy = mm(0.54 * ny as f64, sy);
    let half_width = mm(0.30 * nx as f64 * widen, sx);
    let depth = mm(0.34 * ny as f64 * widen, sy);
    let z_upper = mm(0.60 * nz as f64, sz);
    let z_lower = mm(0.40 * nz as f64, sz);

    let mut teeth = Vec::with_capacity(28);
    for (arch, base_z, up_sign) in [
        (&UPPER_ARCH_ORDER, z_upper, -1.0f64),
        (&LOWER_ARCH_ORDER, z_lower, 1.0f64),
    ] {
        // arch curve: half ellipse opening towards +y
        let positions: Vec<(Point3<f64>, Vector3<f64>)> = (0..14)
            .map(|i| {
                let theta = (-75.0 + 150.0 * i as f64 / 13.0).to_radians();
                let p = Point3::new(
                    cx + half_width * theta.sin(),
                    cy - depth * theta.cos(),
                    base_z,
                );
                let t = Vector3::new(half_width * theta.cos(), depth * theta.sin(), 0.0).normalize();
                (p, t)
            })
            .collect();
        let mean_gap = {
            let mut total = 0.0;
            for w in positions.windows(2) {
                total += (w[1].0 - w[0].0).norm();
            }
            total / 13.0
        };
        for (i, &label) in arch.iter().enumerate() {
            let (center, tangent) = positions[i];
            let kind_scale = match label % 10 {
                6 | 7 => 1.15,
                4 | 5 => 1.0,
                3 => 0.95,
                _ => 0.85,
            };
            let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0.92..1.08);
            let r_t = 0.38 * mean_gap * kind_scale * shrink * jitter(&mut rng);
            let r_n = r_t * 1.2 * jitter(&mut rng);
            let crown_height = 2.0 * r_t * jitter(&mut rng);
            let root_height = 2.6 * r_t * jitter(&mut rng);
            let up = Vector3::new(0.0, 0.0, up_sign);
            let normal = tangent.cross(&up).normalize();
            teeth.push(ToothShape {
                label,
                center,
                tangent,
                normal,
                up,
                r_tangent: r_t,
                r_normal: r_n,
                crown_height,
                root_height,
            });
        }
    }
    teeth
}

/// Rasterize teeth into label + intensity grids. Returns the number of
/// overlapping voxels as the error value when teeth collide.
fn voxelize(
    geom: &Geometry,
    teeth: &[ToothShape],
    seed: u64,
) -> std::result::Result<(LabelGrid, VolumeGrid), usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1E77);
    let [nx, ny, nz] = geom.dims;
    let mut labels = Grid3::filled(geom.clone(), 0u16);
    let mut crown_mask = vec![false; geom.voxel_count()];
    let mut overlaps = 0usize;

    for tooth in teeth {
        let r = tooth.bound_radius();
        let lo = geom.continuous_index([
            tooth.center.x - r,
            tooth.center.y - r,
            tooth.center.z - r,
        ]);
        let hi = geom.continuous_index([
            tooth.center.x + r,
            tooth.center.y + r,
            tooth.center.z + r,
        ]);
        let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
        let (i0, i1) = (clamp(lo[0].floor(), nx), clamp(hi[0].ceil(), nx));
        let (j0, j1) = (clamp(lo[1].floor(), ny), clamp(hi[1].ceil(), ny));
        let (k0, k1) = (clamp(lo[2].floor(), nz), clamp(hi[2].ceil(), nz));
        for k in k0..=k1 {
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let pos = geom.position([i, j, k]);
                    let p = Point3::new(pos[0], pos[1], pos[2]);
                    if tooth.contains(&p) {
                        let idx = geom.linear_index(i, j, k);
                        if labels.data()[idx] != 0 {
                            overlaps += 1;
                        } else {
                            labels.data_mut()[idx] = tooth.label;
                            crown_mask[idx] = tooth.in_crown(&p);
                        }
                    }
                }
            }
        }
    }
    if overlaps > 0 {
        return Err(overlaps);
    }

    // two-level tooth intensities with per-tooth jitter, smooth background
    let mut enamel = BTreeMap::new();
    let mut dentin = BTreeMap::new();
    for tooth in teeth {
        enamel.insert(tooth.label, 0.82 + rng.random_range(-0.05..0.05));
        dentin.insert(tooth.label, 0.55 + rng.random_range(-0.04..0.04));
    }
    let [sx, sy, sz] = geom.spacing;
    let extent = [nx as f64 * sx, ny as f64 * sy, nz as f64 * sz];
    let mut intensity = Grid3::filled(geom.clone(), 0.0f32);
    for (idx, p) in geom.iter_indices().enumerate() {
        let label = labels.data()[idx];
        let value = if label != 0 {
            if crown_mask[idx] {
                enamel[&label]
            } else {
                dentin[&label]
            }
        } else {
            let pos = geom.position(p);
            let wave = (std::f64::consts::TAU * 1.3 * pos[0] / extent[0]).sin()
                * (std::f64::consts::TAU * 1.1 * pos[1] / extent[1]).sin()
                + (std::f64::consts::TAU * 0.9 * pos[2] / extent[2]).sin();
            0.10 + 0.05 * wave
        };
        intensity.data_mut()[idx] = value.clamp(0.0, 1.0) as f32;
    }
    Ok((labels, intensity))
}
