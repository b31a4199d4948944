//! Resampling, normalization and the segmentation-guided enhancement
//! operators (crop, dilate, mask, reassign).

use crate::error::{Error, Result};
use crate::geom::{Geometry, VoxelBox};
use crate::num::{Element, Real};

use super::grid::Grid3;

/// Resample a scalar volume to a new voxel spacing by trilinear
/// interpolation. Output dims are `ceil(dim · spacing / target)` per axis,
/// the origin is preserved, and samples outside the input domain read 0.
pub fn resample_trilinear<T: Real + Element>(
    v: &Grid3<T>,
    target_spacing: [f64; 3],
) -> Result<Grid3<T>> {
    let geom = target_geometry(v.geometry(), target_spacing)?;
    Ok(resample_to_geometry(v, &geom))
}

/// Resample a label grid to a new voxel spacing by nearest-neighbour
/// sampling; outside reads become background (0).
pub fn resample_labels(l: &Grid3<u16>, target_spacing: [f64; 3]) -> Result<Grid3<u16>> {
    let geom = target_geometry(l.geometry(), target_spacing)?;
    Ok(resample_labels_to_geometry(l, &geom))
}

fn target_geometry(input: &Geometry, target_spacing: [f64; 3]) -> Result<Geometry> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let mut dims = [0usize; 3];
    for d in 0..3 {
        let extent = input.dims[d] as f64 * input.spacing[d];
        dims[d] = ((extent / target_spacing[d]).ceil() as usize).max(1);
    }
    Geometry::new(dims, target_spacing, input.origin)
}

/// Trilinear resampling onto an arbitrary target geometry.
pub fn resample_to_geometry<T: Real + Element>(v: &Grid3<T>, target: &Geometry) -> Grid3<T> {
    Grid3::from_fn(target.clone(), |idx| {
        let pos = target.position(idx);
        T::of_f64(v.sample_trilinear_pos(pos))
    })
}

/// Nearest-neighbour resampling onto an arbitrary target geometry.
pub fn resample_labels_to_geometry(l: &Grid3<u16>, target: &Geometry) -> Grid3<u16> {
    Grid3::from_fn(target.clone(), |idx| {
        let pos = target.position(idx);
        l.sample_nearest_pos(pos).unwrap_or(0)
    })
}

/// Min-max normalize to `[0, 1]`. Errors on constant input.
pub fn normalize_intensity<T: Real + Element>(v: &Grid3<T>) -> Result<Grid3<T>> {
    let (lo, hi) = v.value_range()?;
    if !(hi > lo) {
        return Err(Error::DegenerateInput(format!(
            "constant volume (value {lo}) cannot be normalized"
        )));
    }
    let range = hi - lo;
    Ok(v.map(|x| T::of_f64((x.as_f64() - lo) / range)))
}

/// Tightest inclusive voxel box containing every nonzero label.
pub fn bounding_box_of_labels(l: &Grid3<u16>) -> Result<VoxelBox> {
    let [nx, ny, nz] = l.dims();
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    let data = l.data();
    let mut idx = 0usize;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if data[idx] != 0 {
                    any = true;
                    let p = [i, j, k];
                    for d in 0..3 {
                        min[d] = min[d].min(p[d]);
                        max[d] = max[d].max(p[d]);
                    }
                }
                idx += 1;
            }
        }
    }
    if !any {
        return Err(Error::EmptyForeground);
    }
    VoxelBox::new(min, max)
}

/// Crop to `bounds` expanded by `margin` voxels per side (clamped to the
/// grid). The origin shifts so retained voxels keep their physical
/// coordinates.
pub fn crop_with_margin<T: Element>(
    g: &Grid3<T>,
    bounds: &VoxelBox,
    margin: usize,
) -> Result<Grid3<T>> {
    let dims = g.dims();
    if !bounds.fits_within(dims) {
        return Err(Error::InvalidArgument(format!(
            "crop box {bounds:?} exceeds grid dims {dims:?}"
        )));
    }
    let region = bounds.expanded_clamped(margin, dims);
    let size = region.size();
    let spacing = g.spacing();
    let origin = g.origin();
    let new_origin = [
        origin[0] + region.min[0] as f64 * spacing[0],
        origin[1] + region.min[1] as f64 * spacing[1],
        origin[2] + region.min[2] as f64 * spacing[2],
    ];
    let geom = Geometry::new(size, spacing, new_origin)?;
    let mut data = Vec::with_capacity(geom.voxel_count());
    for k in region.min[2]..=region.max[2] {
        for j in region.min[1]..=region.max[1] {
            let row_start = g.geometry().linear_index(region.min[0], j, k);
            data.extend_from_slice(&g.data()[row_start..row_start + size[0]]);
        }
    }
    Grid3::new(geom, data)
}

/// Integer offsets with Euclidean norm at most `radius` (voxel units).
pub fn ball_offsets(radius: usize) -> Vec<[i64; 3]> {
    let r = radius as i64;
    let r2 = r * r;
    let mut offsets = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r2 {
                    offsets.push([dx, dy, dz]);
                }
            }
        }
    }
    offsets
}

/// Morphological dilation of the nonzero set with a Euclidean ball of
/// `radius` voxels. Returns a binary grid (1 = foreground).
///
/// The ball offsets are enumerated once; they are stamped only from
/// boundary foreground voxels, which yields the identical set because the
/// ball at an interior voxel is covered by the balls of its face
/// neighbours (integer radius >= 1).
pub fn dilate_labels(l: &Grid3<u16>, radius: usize) -> Grid3<u16> {
    let binary = l.map(|v| if v != 0 { 1u16 } else { 0u16 });
    if radius == 0 {
        return binary;
    }
    let offsets = ball_offsets(radius);
    let [nx, ny, nz] = l.dims();
    let mut out = binary.clone();
    let geom = l.geometry().clone();
    let src = binary.data();
    let out_data = out.data_mut();
    let mut idx = 0usize;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if src[idx] != 0 && is_boundary_fg(&binary, i, j, k) {
                    for o in &offsets {
                        let (x, y, z) = (i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]);
                        if x >= 0
                            && y >= 0
                            && z >= 0
                            && x < nx as i64
                            && y < ny as i64
                            && z < nz as i64
                        {
                            out_data[geom.linear_index(x as usize, y as usize, z as usize)] = 1;
                        }
                    }
                }
                idx += 1;
            }
        }
    }
    out
}

#[inline]
fn is_boundary_fg(binary: &Grid3<u16>, i: usize, j: usize, k: usize) -> bool {
    let (i, j, k) = (i as i64, j as i64, k as i64);
    for (dx, dy, dz) in [
        (-1, 0, 0),
        (1, 0, 0),
        (0, -1, 0),
        (0, 1, 0),
        (0, 0, -1),
        (0, 0, 1),
    ] {
        match binary.get(i + dx, j + dy, k + dz) {
            Some(0) | None => return true,
            _ => {}
        }
    }
    false
}

/// Keep voxel values where `mask` is nonzero, zero elsewhere.
pub fn mask_by_labels<T: Real + Element>(v: &Grid3<T>, mask: &Grid3<u16>) -> Result<Grid3<T>> {
    v.geometry().check_same(mask.geometry(), "mask_by_labels")?;
    let data = v
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&x, &m)| if m != 0 { x } else { T::zero() })
        .collect();
    v.with_data(data)
}

/// Replace each nonzero label with its table intensity; background becomes 0.
pub fn reassign_label_intensities(
    l: &Grid3<u16>,
    table: &std::collections::BTreeMap<u16, f64>,
) -> Result<Grid3<f32>> {
    let mut data = Vec::with_capacity(l.geometry().voxel_count());
    for &label in l.data() {
        if label == 0 {
            data.push(0.0f32);
        } else {
            match table.get(&label) {
                Some(&v) => data.push(v as f32),
                None => return Err(Error::MissingLabel(label)),
            }
        }
    }
    l.with_data(data)
}
