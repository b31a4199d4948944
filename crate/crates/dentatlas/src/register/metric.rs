//! Similarity metrics: global Pearson correlation and windowed local
//! normalized cross-correlation with its analytic gradient.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::Field3;
use crate::num::{Element, Real};
use crate::volgrid::Grid3;

/// Pearson correlation of two same-geometry volumes, accumulated in f64 in
/// linear voxel order. Errors when either volume is constant.
pub fn global_correlation<T: Real + Element>(a: &Grid3<T>, b: &Grid3<T>) -> Result<f64> {
    a.geometry()
        .check_same(b.geometry(), "global_correlation")?;
    let n = a.data().len() as f64;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        sa += x.as_f64();
        sb += y.as_f64();
    }
    let ma = sa / n;
    let mb = sb / n;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let da = x.as_f64() - ma;
        let db = y.as_f64() - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::DegenerateInput(
            "constant volume in correlation".into(),
        ));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Result of `local_cc`: the mean windowed CC over valid windows and its
/// analytic gradient with respect to the sampling positions of `b`.
#[derive(Debug, Clone)]
pub struct LocalCcResult<T: Real> {
    /// Mean of `CC(x) = sAB² / (sAA·sBB)` over windows with both variances
    /// above threshold; 0 when no window qualifies.
    pub metric: f64,
    /// d(metric)/d(displacement of b) per voxel, mm⁻¹-scaled (moving a
    /// sampling position of `b` by `δ` mm changes the metric by `grad·δ`).
    pub gradient: Field3<T>,
    /// Fraction of voxels whose window passed the variance threshold.
    pub valid_fraction: f64,
}

/// Variance-sum threshold below which a window is considered flat.
/// Intensities are assumed roughly unit scale (the pipeline normalizes to
/// [0,1]); prefix-difference cancellation noise sits around 1e-13.
const VARIANCE_EPS: f64 = 1e-8;

/// Windowed normalized cross-correlation with analytic gradient.
///
/// `CC(x) = (Σ_w ĀB̄)² / (Σ_w Ā²·Σ_w B̄²)` over the `(2r+1)³` box window
/// centred at `x` (clipped at the grid boundary), with window-demeaned
/// values. The gradient at voxel `j` accumulates `∂CC(x)/∂b_j` over every
/// window containing `j` via box sums, then chains through the central-
/// difference spatial gradient of `b` (zero outside the grid, matching the
/// derivative of trilinear resampling).
pub fn local_cc<T: Real + Element>(
    a: &Grid3<T>,
    b: &Grid3<T>,
    radius: usize,
) -> Result<LocalCcResult<T>> {
    let bundle = cc_core(a, b, radius, false)?;
    Ok(LocalCcResult {
        metric: bundle.metric,
        gradient: bundle.gradient_b,
        valid_fraction: bundle.valid_fraction,
    })
}

/// Both directions at once: the metric is symmetric, the window sums are
/// shared, and the two gradients reuse the same coefficient fields, so this
/// is much cheaper than two `local_cc` calls.
pub struct BidirectionalCc<T: Real> {
    pub metric: f64,
    /// d(metric)/d(sampling positions of b).
    pub gradient_b: Field3<T>,
    /// d(metric)/d(sampling positions of a).
    pub gradient_a: Field3<T>,
    pub valid_fraction: f64,
}

pub fn local_cc_bidirectional<T: Real + Element>(
    a: &Grid3<T>,
    b: &Grid3<T>,
    radius: usize,
) -> Result<BidirectionalCc<T>> {
    let bundle = cc_core(a, b, radius, true)?;
    Ok(BidirectionalCc {
        metric: bundle.metric,
        gradient_b: bundle.gradient_b,
        gradient_a: bundle.gradient_a.expect("requested"),
        valid_fraction: bundle.valid_fraction,
    })
}

struct CcBundle<T: Real> {
    metric: f64,
    gradient_b: Field3<T>,
    gradient_a: Option<Field3<T>>,
    valid_fraction: f64,
}

fn cc_core<T: Real + Element>(
    a: &Grid3<T>,
    b: &Grid3<T>,
    radius: usize,
    want_grad_a: bool,
) -> Result<CcBundle<T>> {
    a.geometry().check_same(b.geometry(), "local_cc")?;
    if radius == 0 {
        return Err(Error::InvalidArgument("cc window radius must be >= 1".into()));
    }
    let geom = a.geometry().clone();
    let dims = geom.dims;
    let n = geom.voxel_count();

    let av: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let bv: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();

    // Window sums of a, b, a², b², ab and the window voxel count.
    let sa = box_sum(&av, dims, radius);
    let sb = box_sum(&bv, dims, radius);
    let saa = box_sum_sq(&av, dims, radius);
    let sbb = box_sum_sq(&bv, dims, radius);
    let sab = box_sum_prod(&av, &bv, dims, radius);
    let counts = window_counts(dims, radius);

    // Per-window coefficient fields:
    //   ∂CC/∂b_j = F·(a_j − meanA) − G_b·(b_j − meanB),
    //   ∂CC/∂a_j = F·(b_j − meanB) − G_a·(a_j − meanA),
    // with F = 2·cov/(varA·varB), G_b = 2·cov²/(varA·varB²),
    // G_a = 2·cov²/(varA²·varB).
    let mut f_field = vec![0.0f64; n];
    let mut fma = vec![0.0f64; n];
    let mut gb_field = vec![0.0f64; n];
    let mut gbmb = vec![0.0f64; n];
    let mut fmb = if want_grad_a { vec![0.0f64; n] } else { Vec::new() };
    let mut ga_field = if want_grad_a { vec![0.0f64; n] } else { Vec::new() };
    let mut gama = if want_grad_a { vec![0.0f64; n] } else { Vec::new() };
    let mut metric_sum = 0.0f64;
    let mut valid = 0usize;
    for i in 0..n {
        let cnt = counts[i];
        let var_a = saa[i] - sa[i] * sa[i] / cnt;
        let var_b = sbb[i] - sb[i] * sb[i] / cnt;
        if var_a > VARIANCE_EPS && var_b > VARIANCE_EPS {
            let cov = sab[i] - sa[i] * sb[i] / cnt;
            metric_sum += cov * cov / (var_a * var_b);
            valid += 1;
            let mean_a = sa[i] / cnt;
            let mean_b = sb[i] / cnt;
            let f = 2.0 * cov / (var_a * var_b);
            f_field[i] = f;
            fma[i] = f * mean_a;
            let gb = 2.0 * cov * cov / (var_a * var_b * var_b);
            gb_field[i] = gb;
            gbmb[i] = gb * mean_b;
            if want_grad_a {
                fmb[i] = f * mean_b;
                let ga = 2.0 * cov * cov / (var_a * var_a * var_b);
                ga_field[i] = ga;
                gama[i] = ga * mean_a;
            }
        }
    }

    if valid == 0 {
        return Ok(CcBundle {
            metric: 0.0,
            gradient_b: Field3::zeros(geom.clone()),
            gradient_a: want_grad_a.then(|| Field3::zeros(geom)),
            valid_fraction: 0.0,
        });
    }
    let metric = metric_sum / valid as f64;
    let inv_valid = 1.0 / valid as f64;

    // Accumulate window contributions onto voxels: the set of windows
    // containing voxel j is the box window centred at j.
    let bf = box_sum(&f_field, dims, radius);
    let bfma = box_sum(&fma, dims, radius);
    let bgb = box_sum(&gb_field, dims, radius);
    let bgbmb = box_sum(&gbmb, dims, radius);
    let gradient_b = assemble_gradient(
        &geom, &av, &bv, b, &bf, &bfma, &bgb, &bgbmb, inv_valid,
    )?;

    let gradient_a = if want_grad_a {
        let bfmb = box_sum(&fmb, dims, radius);
        let bga = box_sum(&ga_field, dims, radius);
        let bgama = box_sum(&gama, dims, radius);
        Some(assemble_gradient(
            &geom, &bv, &av, a, &bf, &bfmb, &bga, &bgama, inv_valid,
        )?)
    } else {
        None
    };

    Ok(CcBundle {
        metric,
        gradient_b,
        gradient_a,
        valid_fraction: valid as f64 / n as f64,
    })
}

/// Gradient scalar `(other_j·ΣF − Σ(F·mean_other) − own_j·ΣG + Σ(G·mean_own))/N`
/// chained through the central-difference spatial gradient of `own`.
#[allow(clippy::too_many_arguments)]
fn assemble_gradient<T: Real + Element>(
    geom: &crate::geom::Geometry,
    other: &[f64],
    own: &[f64],
    own_grid: &Grid3<T>,
    bf: &[f64],
    bf_mean_other: &[f64],
    bg: &[f64],
    bg_mean_own: &[f64],
    inv_valid: f64,
) -> Result<Field3<T>> {
    let [nx, ny, _nz] = geom.dims;
    let spacing = geom.spacing;
    let slab = nx * ny;
    let n = geom.voxel_count();
    let mut grad = vec![[T::zero(); 3]; n];
    grad.par_chunks_mut(slab).enumerate().for_each(|(k, out)| {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * j + slab * k;
                let scalar = (other[idx] * bf[idx] - bf_mean_other[idx]
                    - own[idx] * bg[idx]
                    + bg_mean_own[idx])
                    * inv_valid;
                // central differences in physical units, zero outside
                let p = [i as i64, j as i64, k as i64];
                let mut v = [T::zero(); 3];
                for d in 0..3 {
                    let mut hi = p;
                    hi[d] += 1;
                    let mut lo = p;
                    lo[d] -= 1;
                    let vh = own_grid.get(hi[0], hi[1], hi[2]).map_or(0.0, |x| x.as_f64());
                    let vl = own_grid.get(lo[0], lo[1], lo[2]).map_or(0.0, |x| x.as_f64());
                    v[d] = T::of_f64(scalar * (vh - vl) / (2.0 * spacing[d]));
                }
                out[i + nx * j] = v;
            }
        }
    });
    Field3::new(geom.clone(), grad)
}

/// Separable box sum over the clipped `(2r+1)³` window.
fn box_sum(values: &[f64], dims: [usize; 3], radius: usize) -> Vec<f64> {
    let mut cur = values.to_vec();
    let mut tmp = vec![0.0f64; values.len()];
    for axis in 0..3 {
        box_axis(&cur, &mut tmp, dims, axis, radius);
        std::mem::swap(&mut cur, &mut tmp);
    }
    cur
}

fn box_sum_sq(values: &[f64], dims: [usize; 3], radius: usize) -> Vec<f64> {
    let sq: Vec<f64> = values.iter().map(|v| v * v).collect();
    box_sum(&sq, dims, radius)
}

fn box_sum_prod(a: &[f64], b: &[f64], dims: [usize; 3], radius: usize) -> Vec<f64> {
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    box_sum(&prod, dims, radius)
}

/// One clipped box-sum pass along `axis`, sliding-window over contiguous
/// rows. Each output line is produced sequentially (deterministic); lines
/// are independent and run in parallel.
fn box_axis(input: &[f64], out: &mut [f64], dims: [usize; 3], axis: usize, radius: usize) {
    let [nx, ny, nz] = dims;
    let slab = nx * ny;
    let r = radius;
    match axis {
        0 => {
            // slide along x within each contiguous row
            out.par_chunks_mut(nx).enumerate().for_each(|(row, line)| {
                let src = &input[row * nx..row * nx + nx];
                let mut acc = 0.0;
                for v in &src[..(r + 1).min(nx)] {
                    acc += v;
                }
                line[0] = acc;
                for i in 1..nx {
                    if i + r < nx {
                        acc += src[i + r];
                    }
                    if i >= r + 1 {
                        acc -= src[i - r - 1];
                    }
                    line[i] = acc;
                }
            });
        }
        1 => {
            // per z-slab, slide whole x-rows along y
            out.par_chunks_mut(slab).enumerate().for_each(|(k, slab_out)| {
                let src = &input[k * slab..(k + 1) * slab];
                let row = |j: usize| &src[j * nx..j * nx + nx];
                slab_out[..nx].fill(0.0);
                for t in 0..(r + 1).min(ny) {
                    let rt = row(t);
                    for i in 0..nx {
                        slab_out[i] += rt[i];
                    }
                }
                for j in 1..ny {
                    let (done, rest) = slab_out.split_at_mut(j * nx);
                    let prev = &done[(j - 1) * nx..];
                    let cur = &mut rest[..nx];
                    cur.copy_from_slice(prev);
                    if j + r < ny {
                        let add = row(j + r);
                        for i in 0..nx {
                            cur[i] += add[i];
                        }
                    }
                    if j >= r + 1 {
                        let sub = row(j - r - 1);
                        for i in 0..nx {
                            cur[i] -= sub[i];
                        }
                    }
                }
            });
        }
        _ => {
            // per y-row, slide a local accumulator row along z
            let out_ptr = SendPtr(out.as_mut_ptr());
            (0..ny).into_par_iter().for_each(|j| {
                let out_ptr = &out_ptr;
                let base = j * nx;
                let row_in = |k: usize| &input[base + k * slab..base + k * slab + nx];
                // safety: rows (j, k) for distinct j are disjoint slices
                let row_out = |k: usize| unsafe {
                    std::slice::from_raw_parts_mut(out_ptr.0.add(base + k * slab), nx)
                };
                let mut acc = vec![0.0f64; nx];
                for t in 0..(r + 1).min(nz) {
                    let rt = row_in(t);
                    for i in 0..nx {
                        acc[i] += rt[i];
                    }
                }
                row_out(0).copy_from_slice(&acc);
                for k in 1..nz {
                    if k + r < nz {
                        let add = row_in(k + r);
                        for i in 0..nx {
                            acc[i] += add[i];
                        }
                    }
                    if k >= r + 1 {
                        let sub = row_in(k - r - 1);
                        for i in 0..nx {
                            acc[i] -= sub[i];
                        }
                    }
                    row_out(k).copy_from_slice(&acc);
                }
            });
        }
    }
}

/// Raw pointer wrapper for disjoint parallel row writes.
struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

/// Voxels per clipped window, as f64 (product of per-axis extents).
fn window_counts(dims: [usize; 3], radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let per_axis = |n: usize| -> Vec<f64> {
        (0..n as i64)
            .map(|i| ((i + r).min(n as i64 - 1) - (i - r).max(0) + 1) as f64)
            .collect()
    };
    let cx = per_axis(dims[0]);
    let cy = per_axis(dims[1]);
    let cz = per_axis(dims[2]);
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out.push(cx[i] * cy[j] * cz[k]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::warp_volume;
    use crate::geom::Geometry;

    fn smooth_random(dims: [usize; 3], seed: u64) -> Grid3<f64> {
        let geom = Geometry::unit(dims);
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^= z >> 31;
            z as f64 / u64::MAX as f64
        };
        let noise = Grid3::from_fn(geom, |_| next());
        crate::smooth::smooth_grid(&noise, 1.5)
    }

    #[test]
    fn pearson_self_is_one_and_negation_is_minus_one() {
        let a = smooth_random([10, 10, 10], 3);
        assert!((global_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = a.map(|v| 2.0 - v);
        assert!((global_correlation(&a, &b).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_matches_two_pass_oracle() {
        let a = smooth_random([8, 9, 10], 5);
        let b = smooth_random([8, 9, 10], 11);
        let got = global_correlation(&a, &b).unwrap();
        // independent straightforward implementation
        let n = a.data().len() as f64;
        let ma = a.data().iter().sum::<f64>() / n;
        let mb = b.data().iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut da2 = 0.0;
        let mut db2 = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            num += (x - ma) * (y - mb);
            da2 += (x - ma) * (x - ma);
            db2 += (y - mb) * (y - mb);
        }
        let expect = num / (da2 * db2).sqrt();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn pearson_rejects_constant_input() {
        let geom = Geometry::unit([4, 4, 4]);
        let a: Grid3<f64> = Grid3::filled(geom.clone(), 1.0);
        let b = smooth_random([4, 4, 4], 1);
        assert!(global_correlation(&a, &b).is_err());
    }

    #[test]
    fn local_cc_self_scores_one_with_zero_gradient() {
        let a = smooth_random([16, 16, 16], 7);
        let r = local_cc(&a, &a, 3).unwrap();
        assert!((r.metric - 1.0).abs() < 1e-9, "metric {}", r.metric);
        assert!(r.gradient.max_voxel_norm() < 1e-6);
        assert!(r.valid_fraction > 0.99);
    }

    #[test]
    fn local_cc_is_invariant_to_affine_intensity_maps() {
        let a = smooth_random([14, 14, 14], 9);
        let b = a.map(|v| 2.0 * v + 5.0);
        let r = local_cc(&a, &b, 3).unwrap();
        assert!((r.metric - 1.0).abs() < 1e-9, "metric {}", r.metric);
    }

    #[test]
    fn local_cc_gradient_matches_finite_differences() {
        // Finite-difference oracle: perturb the displacement of b at a
        // single voxel along one axis, rewarp, recompute the metric.
        let dims = [12, 12, 12];
        let a = smooth_random(dims, 21);
        let b = smooth_random(dims, 22);
        let geom = a.geometry().clone();
        let radius = 2;
        let analytic = local_cc(&a, &b, radius).unwrap();

        // trilinear sampling has a kink at integer positions, so the
        // central difference converges to the analytic value only
        // first-order in h; h must be small, and f64 headroom keeps the
        // cancellation harmless
        let h = 5e-4; // voxels; spacing is 1 mm here
        let probes = [
            ([6usize, 6usize, 6usize], 0usize),
            ([3, 7, 5], 1),
            ([8, 4, 9], 2),
            ([2, 2, 2], 0),
            ([10, 6, 3], 2),
        ];
        for (p, axis) in probes {
            let metric_at = |delta: f64| {
                let mut field = Field3::<f64>::zeros(geom.clone());
                let idx = geom.linear_index(p[0], p[1], p[2]);
                field.data_mut()[idx][axis] = delta;
                let warped = warp_volume(&b, &field);
                local_cc(&a, &warped, radius).unwrap().metric
            };
            let fd = (metric_at(h) - metric_at(-h)) / (2.0 * h);
            let idx = geom.linear_index(p[0], p[1], p[2]);
            let got = analytic.gradient.vector_at(idx)[axis];
            let denom = fd.abs().max(1e-8);
            assert!(
                (got - fd).abs() / denom < 1e-3,
                "probe {p:?} axis {axis}: analytic {got:.3e} vs fd {fd:.3e}"
            );
        }
    }

    #[test]
    fn sliding_box_sum_matches_brute_force() {
        let dims = [7usize, 5, 9];
        let n = dims[0] * dims[1] * dims[2];
        let values: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 101) as f64 / 7.0).collect();
        for radius in [1usize, 2, 4] {
            let got = box_sum(&values, dims, radius);
            let r = radius as i64;
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let mut expect = 0.0;
                        for dz in -r..=r {
                            for dy in -r..=r {
                                for dx in -r..=r {
                                    let (x, y, z) =
                                        (i as i64 + dx, j as i64 + dy, k as i64 + dz);
                                    if x >= 0
                                        && y >= 0
                                        && z >= 0
                                        && (x as usize) < dims[0]
                                        && (y as usize) < dims[1]
                                        && (z as usize) < dims[2]
                                    {
                                        expect += values
                                            [x as usize + dims[0] * (y as usize + dims[1] * z as usize)];
                                    }
                                }
                            }
                        }
                        let idx = i + dims[0] * (j + dims[1] * k);
                        assert!(
                            (got[idx] - expect).abs() < 1e-9,
                            "radius {radius} at ({i},{j},{k}): {} vs {expect}",
                            got[idx]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn flat_windows_are_excluded_not_errors() {
        let geom = Geometry::unit([12, 12, 12]);
        // flat everywhere except a small textured corner
        let a: Grid3<f64> = Grid3::from_fn(geom.clone(), |p| {
            if p[0] < 5 && p[1] < 5 && p[2] < 5 {
                (p[0] * 3 + p[1] * 7 + p[2]) as f64 / 10.0
            } else {
                0.0
            }
        });
        let r = local_cc(&a, &a, 2).unwrap();
        assert!(r.valid_fraction < 1.0 && r.valid_fraction > 0.0);
        assert!((r.metric - 1.0).abs() < 1e-9);
    }
}
