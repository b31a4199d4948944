//! Dense displacement fields and the operators on them: warping,
//! composition, inversion, Jacobians and the scaling-and-squaring
//! exponential.
//!
//! A field stores one mm-displacement vector per voxel of its geometry.
//! `out(x) = v(x + u(x))` is the warping convention everywhere: the field
//! lives on the *output* grid and tells each output voxel where to sample.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{v3_add, Geometry};
use crate::num::{Element, Real};
use crate::register::AffineMap;
use crate::volgrid::Grid3;

/// Dense per-voxel displacement vectors in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3<T: Real> {
    geom: Geometry,
    data: Vec<[T; 3]>,
}

impl<T: Real> Field3<T> {
    pub fn new(geom: Geometry, data: Vec<[T; 3]>) -> Result<Self> {
        if data.len() != geom.voxel_count() {
            return Err(Error::InvalidArgument(format!(
                "field length {} does not match dims {:?}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Field3 { geom, data })
    }

    pub fn zeros(geom: Geometry) -> Self {
        let n = geom.voxel_count();
        Field3 {
            geom,
            data: vec![[T::zero(); 3]; n],
        }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut([usize; 3]) -> [T; 3]) -> Self {
        let [nx, ny, nz] = geom.dims;
        let mut data = Vec::with_capacity(geom.voxel_count());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f([i, j, k]));
                }
            }
        }
        Field3 { geom, data }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn data(&self) -> &[[T; 3]] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [[T; 3]] {
        &mut self.data
    }

    /// Displacement vector at a voxel, as f64.
    #[inline]
    pub fn vector_at(&self, idx: usize) -> [f64; 3] {
        let v = self.data[idx];
        [v[0].as_f64(), v[1].as_f64(), v[2].as_f64()]
    }

    /// Trilinear sample of the vector field at a continuous voxel index of
    /// its own geometry. Corners are clamped to the grid (constant
    /// extension), so fields stay well-behaved under composition and
    /// fixed-point inversion near the boundary.
    pub fn sample_trilinear_ci(&self, ci: [f64; 3]) -> [f64; 3] {
        let x0 = ci[0].floor();
        let y0 = ci[1].floor();
        let z0 = ci[2].floor();
        let fx = ci[0] - x0;
        let fy = ci[1] - y0;
        let fz = ci[2] - z0;
        let (xi, yi, zi) = (x0 as i64, y0 as i64, z0 as i64);
        let [nx, ny, nz] = self.geom.dims;
        let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        let mut acc = [0.0f64; 3];
        for dz in 0..2i64 {
            let wz = if dz == 0 { 1.0 - fz } else { fz };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2i64 {
                let wy = if dy == 0 { 1.0 - fy } else { fy };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2i64 {
                    let wx = if dx == 0 { 1.0 - fx } else { fx };
                    if wx == 0.0 {
                        continue;
                    }
                    let w = wx * wy * wz;
                    let v = self.data[self.geom.linear_index(
                        clamp(xi + dx, nx),
                        clamp(yi + dy, ny),
                        clamp(zi + dz, nz),
                    )];
                    acc[0] += w * v[0].as_f64();
                    acc[1] += w * v[1].as_f64();
                    acc[2] += w * v[2].as_f64();
                }
            }
        }
        acc
    }

    pub fn sample_trilinear_pos(&self, pos: [f64; 3]) -> [f64; 3] {
        self.sample_trilinear_ci(self.geom.continuous_index(pos))
    }

    /// Euclidean norm of a displacement in voxel units.
    #[inline]
    pub fn voxel_norm(&self, idx: usize) -> f64 {
        let v = self.vector_at(idx);
        let s = self.geom.spacing;
        let x = v[0] / s[0];
        let y = v[1] / s[1];
        let z = v[2] / s[2];
        (x * x + y * y + z * z).sqrt()
    }

    /// Largest per-voxel displacement norm, in voxel units.
    pub fn max_voxel_norm(&self) -> f64 {
        (0..self.data.len())
            .map(|i| self.voxel_norm(i))
            .fold(0.0, f64::max)
    }

    /// Mean per-voxel displacement norm, in voxel units, optionally
    /// restricted to a foreground mask.
    pub fn mean_voxel_norm(&self, mask: Option<&[bool]>) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..self.data.len() {
            if mask.map_or(true, |m| m[i]) {
                total += self.voxel_norm(i);
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    pub fn scaled(&self, s: f64) -> Field3<T> {
        let data = self
            .data
            .iter()
            .map(|v| {
                [
                    T::of_f64(v[0].as_f64() * s),
                    T::of_f64(v[1].as_f64() * s),
                    T::of_f64(v[2].as_f64() * s),
                ]
            })
            .collect();
        Field3 {
            geom: self.geom.clone(),
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.iter().all(|c| c.is_finite()))
    }

    /// Convert storage precision.
    pub fn cast<U: Real>(&self) -> Field3<U> {
        Field3 {
            geom: self.geom.clone(),
            data: self
                .data
                .iter()
                .map(|v| {
                    [
                        U::of_f64(v[0].as_f64()),
                        U::of_f64(v[1].as_f64()),
                        U::of_f64(v[2].as_f64()),
                    ]
                })
                .collect(),
        }
    }
}

/// Trilinearly resample a field onto a new geometry (vectors are mm, so
/// values carry over unchanged).
pub fn resample_field<T: Real>(f: &Field3<T>, target: &Geometry) -> Field3<T> {
    Field3::from_fn(target.clone(), |idx| {
        let v = f.sample_trilinear_pos(target.position(idx));
        [T::of_f64(v[0]), T::of_f64(v[1]), T::of_f64(v[2])]
    })
}

/// Warp a scalar volume: `out(x) = v(x + u(x))`, trilinear, zero outside.
/// The output lives on the field's geometry.
pub fn warp_volume<T: Real + Element>(v: &Grid3<T>, field: &Field3<T>) -> Grid3<T> {
    warp_volume_composed(v, field, None)
}

/// Warp with an optional linear map applied after the displacement:
/// `out(x) = v(L(x + u(x)))`. Sampling happens once, at the composed
/// position, so no intermediate resampling error accumulates.
pub fn warp_volume_composed<T: Real + Element>(
    v: &Grid3<T>,
    field: &Field3<T>,
    linear: Option<&AffineMap>,
) -> Grid3<T> {
    let geom = field.geometry().clone();
    let [nx, ny, _] = geom.dims;
    let slab = nx * ny;
    let mut data = vec![T::zero(); geom.voxel_count()];
    data.par_chunks_mut(slab).enumerate().for_each(|(k, out)| {
        for j in 0..ny {
            for i in 0..nx {
                let idx = geom.linear_index(i, j, k);
                let x = geom.position([i, j, k]);
                let mut p = v3_add(x, field.vector_at(idx));
                if let Some(l) = linear {
                    p = l.apply(p);
                }
                out[i + nx * j] = T::of_f64(v.sample_trilinear_pos(p));
            }
        }
    });
    Grid3::new(geom, data).expect("sized to geometry")
}

/// Warp a label grid with nearest-neighbour sampling: `out(x) = l(L(x + u(x)))`.
pub fn warp_labels_composed<T: Real>(
    l: &Grid3<u16>,
    field: &Field3<T>,
    linear: Option<&AffineMap>,
) -> Grid3<u16> {
    let geom = field.geometry().clone();
    Grid3::from_fn(geom.clone(), |idx| {
        let x = geom.position(idx);
        let lin = geom.linear_index(idx[0], idx[1], idx[2]);
        let mut p = v3_add(x, field.vector_at(lin));
        if let Some(t) = linear {
            p = t.apply(p);
        }
        l.sample_nearest_pos(p).unwrap_or(0)
    })
}

/// Resample a volume through a linear map only: `out(x) = v(L(x))` on `target`.
pub fn resample_volume_linear<T: Real + Element>(
    v: &Grid3<T>,
    linear: &AffineMap,
    target: &Geometry,
) -> Grid3<T> {
    let [nx, ny, _] = target.dims;
    let slab = nx * ny;
    let mut data = vec![T::zero(); target.voxel_count()];
    data.par_chunks_mut(slab).enumerate().for_each(|(k, out)| {
        for j in 0..ny {
            for i in 0..nx {
                let p = linear.apply(target.position([i, j, k]));
                out[i + nx * j] = T::of_f64(v.sample_trilinear_pos(p));
            }
        }
    });
    Grid3::new(target.clone(), data).expect("sized to geometry")
}

/// Compose two fields on the same grid: `(u1 ∘ u2)(x) = u2(x) + u1(x + u2(x))`.
pub fn compose_fields<T: Real>(u1: &Field3<T>, u2: &Field3<T>) -> Result<Field3<T>> {
    u1.geometry()
        .check_same(u2.geometry(), "compose_fields")?;
    let geom = u1.geometry().clone();
    let [nx, ny, _] = geom.dims;
    let slab = nx * ny;
    let mut data = vec![[T::zero(); 3]; geom.voxel_count()];
    data.par_chunks_mut(slab).enumerate().for_each(|(k, out)| {
        for j in 0..ny {
            for i in 0..nx {
                let idx = geom.linear_index(i, j, k);
                let x = geom.position([i, j, k]);
                let u2v = u2.vector_at(idx);
                let u1v = u1.sample_trilinear_pos(v3_add(x, u2v));
                out[i + nx * j] = [
                    T::of_f64(u2v[0] + u1v[0]),
                    T::of_f64(u2v[1] + u1v[1]),
                    T::of_f64(u2v[2] + u1v[2]),
                ];
            }
        }
    });
    Field3::new(geom, data)
}

/// Fixed-point inversion: seeks `v` with `v(x) = -u(x + v(x))`.
///
/// Iterates until the max update drops below 0.01 voxel or 50 iterations,
/// then verifies the round-trip residual `max |v + u∘(id+v)|` is below
/// 0.5 voxel; otherwise fails with the residual attached.
pub fn invert_field<T: Real>(u: &Field3<T>) -> Result<Field3<T>> {
    const MAX_ITER: usize = 50;
    const UPDATE_TOL_VOX: f64 = 0.01;
    const RESIDUAL_LIMIT_VOX: f64 = 0.5;

    let geom = u.geometry().clone();
    let spacing = geom.spacing;
    let [nx, ny, _] = geom.dims;
    let slab = nx * ny;
    let mut v: Vec<[f64; 3]> = vec![[0.0; 3]; geom.voxel_count()];
    let mut iterations = 0;
    for _ in 0..MAX_ITER {
        iterations += 1;
        let mut next = vec![[0.0f64; 3]; v.len()];
        next.par_chunks_mut(slab).enumerate().for_each(|(k, out)| {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = geom.linear_index(i, j, k);
                    let x = geom.position([i, j, k]);
                    let s = u.sample_trilinear_pos(v3_add(x, v[idx]));
                    out[i + nx * j] = [-s[0], -s[1], -s[2]];
                }
            }
        });
        let mut max_update = 0.0f64;
        for (a, b) in v.iter().zip(&next) {
            let dx = (a[0] - b[0]) / spacing[0];
            let dy = (a[1] - b[1]) / spacing[1];
            let dz = (a[2] - b[2]) / spacing[2];
            max_update = max_update.max((dx * dx + dy * dy + dz * dz).sqrt());
        }
        v = next;
        if max_update < UPDATE_TOL_VOX {
            break;
        }
    }

    let inverse = Field3::new(
        geom.clone(),
        v.iter()
            .map(|w| [T::of_f64(w[0]), T::of_f64(w[1]), T::of_f64(w[2])])
            .collect(),
    )?;

    let residual = composition_residual_vox(u, &inverse);
    if residual >= RESIDUAL_LIMIT_VOX {
        return Err(Error::InversionFailure {
            residual_voxels: residual,
            iterations,
        });
    }
    Ok(inverse)
}

/// Max voxel-norm of `inv + u∘(id+inv)`, i.e. how far `u ∘ inv` is from the
/// identity.
pub fn composition_residual_vox<T: Real>(u: &Field3<T>, inv: &Field3<T>) -> f64 {
    let geom = u.geometry();
    let spacing = geom.spacing;
    let mut worst = 0.0f64;
    for (idx, p) in geom.iter_indices().enumerate() {
        let x = geom.position(p);
        let vi = inv.vector_at(idx);
        let s = u.sample_trilinear_pos(v3_add(x, vi));
        let rx = (vi[0] + s[0]) / spacing[0];
        let ry = (vi[1] + s[1]) / spacing[1];
        let rz = (vi[2] + s[2]) / spacing[2];
        worst = worst.max((rx * rx + ry * ry + rz * rz).sqrt());
    }
    worst
}

/// Jacobian determinant of `id + u` per voxel: central differences in the
/// interior, one-sided at boundaries, physical units.
pub fn jacobian_determinant<T: Real>(u: &Field3<T>) -> Grid3<T> {
    let geom = u.geometry().clone();
    let dims = geom.dims;
    let spacing = geom.spacing;
    Grid3::from_fn(geom.clone(), |p| {
        // rows: displacement component, cols: derivative axis
        let mut m = [[0.0f64; 3]; 3];
        for axis in 0..3 {
            let (prev, next, h) = if p[axis] == 0 {
                (0i64, 1i64, spacing[axis])
            } else if p[axis] == dims[axis] - 1 {
                (-1i64, 0i64, spacing[axis])
            } else {
                (-1i64, 1i64, 2.0 * spacing[axis])
            };
            let mut q = [p[0] as i64, p[1] as i64, p[2] as i64];
            q[axis] = p[axis] as i64 + next;
            let hi = u.vector_at(geom.linear_index(q[0] as usize, q[1] as usize, q[2] as usize));
            q[axis] = p[axis] as i64 + prev;
            let lo = u.vector_at(geom.linear_index(q[0] as usize, q[1] as usize, q[2] as usize));
            for c in 0..3 {
                m[c][axis] = (hi[c] - lo[c]) / h;
            }
        }
        for d in 0..3 {
            m[d][d] += 1.0;
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        T::of_f64(det)
    })
}

/// Minimum Jacobian determinant over interior voxels (all voxels when a
/// dimension is too thin to have an interior).
pub fn min_interior_jacobian<T: Real>(u: &Field3<T>) -> f64 {
    let det = jacobian_determinant(u);
    let [nx, ny, nz] = det.dims();
    let mut min = f64::INFINITY;
    let interior = |n: usize, i: usize| n < 3 || (i > 0 && i < n - 1);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if interior(nx, i) && interior(ny, j) && interior(nz, k) {
                    min = min.min(det.at(i, j, k).as_f64());
                }
            }
        }
    }
    min
}

/// Exponential of a (small) update field by scaling and squaring, with at
/// least `min_squarings` squarings and more when the field is large.
pub fn exp_field<T: Real>(u: &Field3<T>, min_squarings: u32) -> Result<Field3<T>> {
    let max_norm = u.max_voxel_norm();
    let extra = if max_norm > 0.25 {
        (max_norm / 0.25).log2().ceil() as u32
    } else {
        0
    };
    let squarings = min_squarings.max(4).max(extra);
    let mut v = u.scaled(0.5f64.powi(squarings as i32));
    for _ in 0..squarings {
        v = compose_fields(&v, &v)?;
    }
    Ok(v)
}

/// Forward/inverse displacement pair of a diffeomorphic registration.
///
/// `forward` maps the fixed grid into moving space (`moving(x + fwd(x))`
/// resamples the moving image onto the fixed grid); `inverse` goes the
/// other way. Construction verifies both round-trip residuals and the
/// Jacobian positivity of the forward map.
#[derive(Debug, Clone)]
pub struct DiffeoPair<T: Real> {
    pub forward: Field3<T>,
    pub inverse: Field3<T>,
}

impl<T: Real> DiffeoPair<T> {
    pub fn new(forward: Field3<T>, inverse: Field3<T>) -> Result<Self> {
        forward
            .geometry()
            .check_same(inverse.geometry(), "DiffeoPair")?;
        let pair = DiffeoPair { forward, inverse };
        pair.validate()?;
        Ok(pair)
    }

    /// Max round-trip residual of forward∘inverse and inverse∘forward,
    /// in voxels.
    pub fn round_trip_residual_vox(&self) -> f64 {
        composition_residual_vox(&self.forward, &self.inverse)
            .max(composition_residual_vox(&self.inverse, &self.forward))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.forward.is_finite() || !self.inverse.is_finite() {
            return Err(Error::NumericalFailure(
                "diffeo pair contains non-finite displacements".into(),
            ));
        }
        let residual = self.round_trip_residual_vox();
        if residual >= 0.5 {
            return Err(Error::InversionFailure {
                residual_voxels: residual,
                iterations: 0,
            });
        }
        let min_jac = min_interior_jacobian(&self.forward);
        if min_jac <= 0.0 {
            return Err(Error::NumericalFailure(format!(
                "forward map is not diffeomorphic: min interior Jacobian {min_jac}"
            )));
        }
        Ok(())
    }
}
