//! Grid geometry: voxel counts, physical spacing and origin.
//!
//! Conventions used throughout the crate:
//! - voxel `(i, j, k)` is centred at `origin + (i·sx, j·sy, k·sz)` in mm,
//! - linear data layout is x-fastest: `index = i + nx·(j + ny·k)`,
//! - geometry arithmetic is always `f64`, independent of the voxel type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical placement of a 3D voxel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Voxel counts `(nx, ny, nz)`, each at least 1.
    pub dims: [usize; 3],
    /// Voxel size in mm per axis, strictly positive.
    pub spacing: [f64; 3],
    /// Physical position of voxel (0,0,0) in mm.
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid origin must be finite, got {origin:?}"
            )));
        }
        Ok(Geometry {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit geometry helper: spacing 1 mm, origin 0.
    pub fn unit(dims: [usize; 3]) -> Self {
        Geometry {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    #[inline]
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Physical position (mm) of a voxel centre.
    #[inline]
    pub fn position(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + idx[0] as f64 * self.spacing[0],
            self.origin[1] + idx[1] as f64 * self.spacing[1],
            self.origin[2] + idx[2] as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a physical position (mm).
    #[inline]
    pub fn continuous_index(&self, pos: [f64; 3]) -> [f64; 3] {
        [
            (pos[0] - self.origin[0]) / self.spacing[0],
            (pos[1] - self.origin[1]) / self.spacing[1],
            (pos[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Exact equality of dims, spacing and origin.
    pub fn same_as(&self, other: &Geometry) -> bool {
        self == other
    }

    pub fn check_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )))
        }
    }

    /// Physical bounding box of the voxel centres: `[origin, origin + (dims-1)*spacing]`.
    pub fn physical_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let lo = self.origin;
        let hi = [
            self.origin[0] + (self.dims[0] - 1) as f64 * self.spacing[0],
            self.origin[1] + (self.dims[1] - 1) as f64 * self.spacing[1],
            self.origin[2] + (self.dims[2] - 1) as f64 * self.spacing[2],
        ];
        (lo, hi)
    }

    /// Iterate voxel indices in linear-memory order (x fastest).
    pub fn iter_indices(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |k| (0..ny).flat_map(move |j| (0..nx).map(move |i| [i, j, k])))
    }
}

/// Inclusive axis-aligned voxel index box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl VoxelBox {
    pub fn new(min: [usize; 3], max: [usize; 3]) -> Result<Self> {
        if (0..3).any(|d| min[d] > max[d]) {
            return Err(Error::InvalidArgument(format!(
                "voxel box min {min:?} exceeds max {max:?}"
            )));
        }
        Ok(VoxelBox { min, max })
    }

    #[inline]
    pub fn size(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    pub fn contains(&self, idx: [usize; 3]) -> bool {
        (0..3).all(|d| idx[d] >= self.min[d] && idx[d] <= self.max[d])
    }

    /// Expand by `margin` voxels per side, clamped to `dims`.
    pub fn expanded_clamped(&self, margin: usize, dims: [usize; 3]) -> VoxelBox {
        let mut min = [0usize; 3];
        let mut max = [0usize; 3];
        for d in 0..3 {
            min[d] = self.min[d].saturating_sub(margin);
            max[d] = (self.max[d] + margin).min(dims[d] - 1);
        }
        VoxelBox { min, max }
    }

    pub fn fits_within(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|d| self.max[d] < dims[d])
    }
}

// Small [f64; 3] vector helpers; nalgebra stays on the mesh/transform side.

#[inline(always)]
pub(crate) fn v3_add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_nonpositive_spacing() {
        assert!(Geometry::new([0, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([4, 4, 4], [1.0, -0.5, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([4, 4, 4], [1.0; 3], [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn position_and_continuous_index_are_inverse() {
        let g = Geometry::new([5, 6, 7], [0.5, 0.25, 2.0], [10.0, -3.0, 0.5]).unwrap();
        let p = g.position([2, 3, 4]);
        assert_eq!(p, [11.0, -2.25, 8.5]);
        assert_eq!(g.continuous_index(p), [2.0, 3.0, 4.0]);
    }

    #[test]
    fn box_expansion_clamps_at_grid_edges() {
        let b = VoxelBox::new([1, 1, 1], [2, 2, 2]).unwrap();
        let e = b.expanded_clamped(3, [10, 10, 4]);
        assert_eq!(e.min, [0, 0, 0]);
        assert_eq!(e.max, [5, 5, 3]);
    }
}
