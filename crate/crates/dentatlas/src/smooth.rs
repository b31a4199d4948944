//! Separable Gaussian smoothing for grids and vector fields.
//!
//! Sigma is expressed in voxels. Kernels are truncated at `ceil(3σ)` taps
//! per side and renormalized over the in-domain support at boundaries, so
//! constant inputs stay constant everywhere.

use rayon::prelude::*;

use crate::field::Field3;
use crate::num::{Element, Real};
use crate::volgrid::Grid3;

/// Half-kernel weights `w[0..=r]` with `w[t] = exp(-t²/2σ²)`, normalized so
/// the full symmetric kernel sums to 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let mut w: Vec<f64> = (0..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w[0] + 2.0 * w[1..].iter().sum::<f64>();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// One separable pass along `axis` over an f64 channel. `out` and `input`
/// are distinct buffers of identical layout. Boundary taps are clipped and
/// the weight sum renormalized. Rows are processed contiguously so the
/// inner loops vectorize; all writes are disjoint, keeping the result
/// independent of scheduling.
fn axis_pass(input: &[f64], out: &mut [f64], dims: [usize; 3], axis: usize, half: &[f64]) {
    let [nx, ny, nz] = dims;
    let radius = half.len() as i64 - 1;
    let slab = nx * ny;
    let weight = |t: i64| half[t.unsigned_abs() as usize];

    match axis {
        0 => {
            out.par_chunks_mut(nx).enumerate().for_each(|(row, line)| {
                let src = &input[row * nx..row * nx + nx];
                for (i, o) in line.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for t in -radius..=radius {
                        let p = i as i64 + t;
                        if p < 0 || p >= nx as i64 {
                            continue;
                        }
                        let w = weight(t);
                        acc += w * src[p as usize];
                        wsum += w;
                    }
                    *o = acc / wsum;
                }
            });
        }
        1 => {
            out.par_chunks_mut(slab).enumerate().for_each(|(k, slab_out)| {
                let src = &input[k * slab..(k + 1) * slab];
                for j in 0..ny {
                    let dst = &mut slab_out[j * nx..j * nx + nx];
                    dst.fill(0.0);
                    let mut wsum = 0.0;
                    for t in -radius..=radius {
                        let p = j as i64 + t;
                        if p < 0 || p >= ny as i64 {
                            continue;
                        }
                        let w = weight(t);
                        wsum += w;
                        let row = &src[p as usize * nx..p as usize * nx + nx];
                        for i in 0..nx {
                            dst[i] += w * row[i];
                        }
                    }
                    for v in dst.iter_mut() {
                        *v /= wsum;
                    }
                }
            });
        }
        _ => {
            let out_ptr = SendPtr(out.as_mut_ptr());
            (0..ny).into_par_iter().for_each(|j| {
                let out_ptr = &out_ptr;
                let base = j * nx;
                // safety: rows (j, k) for distinct j are disjoint slices
                let row_out = |k: usize| unsafe {
                    std::slice::from_raw_parts_mut(out_ptr.0.add(base + k * slab), nx)
                };
                for k in 0..nz {
                    let dst = row_out(k);
                    dst.fill(0.0);
                    let mut wsum = 0.0;
                    for t in -radius..=radius {
                        let p = k as i64 + t;
                        if p < 0 || p >= nz as i64 {
                            continue;
                        }
                        let w = weight(t);
                        wsum += w;
                        let row = &input[base + p as usize * slab..base + p as usize * slab + nx];
                        for i in 0..nx {
                            dst[i] += w * row[i];
                        }
                    }
                    for v in dst.iter_mut() {
                        *v /= wsum;
                    }
                }
            });
        }
    }
}

/// Raw pointer wrapper for disjoint parallel row writes.
struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

fn smooth_channel(values: &mut Vec<f64>, dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let half = gaussian_kernel(sigma);
    let mut tmp = vec![0.0f64; values.len()];
    axis_pass(values, &mut tmp, dims, 0, &half);
    axis_pass(&tmp, values, dims, 1, &half);
    axis_pass(values, &mut tmp, dims, 2, &half);
    values.copy_from_slice(&tmp);
}

/// Gaussian-smooth a scalar grid with sigma in voxels.
pub fn smooth_grid<T: Real + Element>(g: &Grid3<T>, sigma_voxels: f64) -> Grid3<T> {
    if sigma_voxels <= 0.0 {
        return g.clone();
    }
    let mut channel: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
    smooth_channel(&mut channel, g.dims(), sigma_voxels);
    let data = channel.into_iter().map(T::of_f64).collect();
    g.with_data(data).expect("same length")
}

/// Gaussian-smooth a vector field componentwise with sigma in voxels.
pub fn smooth_field<T: Real>(f: &Field3<T>, sigma_voxels: f64) -> Field3<T> {
    if sigma_voxels <= 0.0 {
        return f.clone();
    }
    let n = f.geometry().voxel_count();
    let dims = f.geometry().dims;
    let mut out = f.clone();
    for c in 0..3 {
        let mut channel: Vec<f64> = (0..n).map(|i| f.data()[i][c].as_f64()).collect();
        smooth_channel(&mut channel, dims, sigma_voxels);
        for (i, v) in channel.into_iter().enumerate() {
            out.data_mut()[i][c] = T::of_f64(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Geometry;

    #[test]
    fn kernel_is_normalized_and_peaked() {
        let w = gaussian_kernel(2.0);
        assert_eq!(w.len(), 7);
        let total = w[0] + 2.0 * w[1..].iter().sum::<f64>();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(w[0] > w[1] && w[1] > w[6]);
    }

    #[test]
    fn constant_volume_is_invariant_even_at_boundaries() {
        let g: Grid3<f64> = Grid3::filled(Geometry::unit([8, 7, 6]), 3.25);
        let s = smooth_grid(&g, 2.5);
        for v in s.data() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_reduces_variance_of_noise() {
        let geom = Geometry::unit([16, 16, 16]);
        let g: Grid3<f64> = Grid3::from_fn(geom, |p| {
            let h = p[0].wrapping_mul(73856093) ^ p[1].wrapping_mul(19349663) ^ p[2].wrapping_mul(83492791);
            (h % 1000) as f64 / 1000.0
        });
        let s = smooth_grid(&g, 1.5);
        let var = |d: &[f64]| {
            let m = d.iter().sum::<f64>() / d.len() as f64;
            d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d.len() as f64
        };
        assert!(var(s.data()) < 0.3 * var(g.data()));
    }

    #[test]
    fn sigma_zero_is_identity() {
        let geom = Geometry::unit([5, 5, 5]);
        let g: Grid3<f32> = Grid3::from_fn(geom, |p| (p[0] * p[1] + p[2]) as f32);
        assert_eq!(smooth_grid(&g, 0.0).data(), g.data());
    }
}
