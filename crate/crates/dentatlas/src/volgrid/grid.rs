//! Generic 3D voxel grid.

use crate::error::{Error, Result};
use crate::geom::Geometry;
use crate::num::{Element, Real};

/// A dense 3D grid of voxels with physical geometry.
///
/// `T` is the per-voxel element: `f32`/`f64` for scalar images, `u16` for
/// label maps, `[T; 3]` for vector fields. Data is x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T: Element> {
    geom: Geometry,
    data: Vec<T>,
}

impl<T: Element> Grid3<T> {
    pub fn new(geom: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geom.voxel_count() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                geom.dims,
                geom.voxel_count()
            )));
        }
        Ok(Grid3 { geom, data })
    }

    pub fn filled(geom: Geometry, value: T) -> Self {
        let n = geom.voxel_count();
        Grid3 {
            geom,
            data: vec![value; n],
        }
    }

    /// Build by evaluating `f` at every voxel index, in linear order.
    pub fn from_fn(geom: Geometry, mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let [nx, ny, nz] = geom.dims;
        let mut data = Vec::with_capacity(geom.voxel_count());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f([i, j, k]));
                }
            }
        }
        Grid3 { geom, data }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    #[inline]
    pub fn origin(&self) -> [f64; 3] {
        self.geom.origin
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.geom.linear_index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: T) {
        let idx = self.geom.linear_index(i, j, k);
        self.data[idx] = value;
    }

    #[inline]
    pub fn get(&self, i: i64, j: i64, k: i64) -> Option<T> {
        let [nx, ny, nz] = self.geom.dims;
        if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
            None
        } else {
            Some(self.data[self.geom.linear_index(i as usize, j as usize, k as usize)])
        }
    }

    /// Replace the data vector, keeping geometry. Lengths must match.
    pub fn with_data<U: Element>(&self, data: Vec<U>) -> Result<Grid3<U>> {
        Grid3::new(self.geom.clone(), data)
    }

    /// Map every voxel through `f`, preserving geometry.
    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            geom: self.geom.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T: Real + Element> Grid3<T> {
    /// All values finite?
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NumericalFailure(format!(
                "{what}: grid contains non-finite values"
            )))
        }
    }

    /// Min and max voxel value. Errors on NaN.
    pub fn value_range(&self) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.data {
            let v = v.as_f64();
            if v.is_nan() {
                return Err(Error::NumericalFailure("NaN voxel value".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok((lo, hi))
    }

    /// Trilinear sample at a continuous voxel index; out-of-range corner
    /// reads contribute 0. Weights and the sum are computed in `f64`.
    #[inline]
    pub fn sample_trilinear_ci(&self, ci: [f64; 3]) -> f64 {
        let x0 = ci[0].floor();
        let y0 = ci[1].floor();
        let z0 = ci[2].floor();
        let fx = ci[0] - x0;
        let fy = ci[1] - y0;
        let fz = ci[2] - z0;
        let (xi, yi, zi) = (x0 as i64, y0 as i64, z0 as i64);

        let mut acc = 0.0f64;
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
                    if let Some(v) = self.get(xi + dx, yi + dy, zi + dz) {
                        acc += wx * wy * wz * v.as_f64();
                    }
                }
            }
        }
        acc
    }

    /// Trilinear sample at a physical position (mm).
    #[inline]
    pub fn sample_trilinear_pos(&self, pos: [f64; 3]) -> f64 {
        self.sample_trilinear_ci(self.geom.continuous_index(pos))
    }
}

impl<T: Element> Grid3<T> {
    /// Nearest-neighbour sample at a continuous voxel index; `None` when the
    /// rounded index falls outside the grid. Ties round half away from zero.
    #[inline]
    pub fn sample_nearest_ci(&self, ci: [f64; 3]) -> Option<T> {
        self.get(
            ci[0].round() as i64,
            ci[1].round() as i64,
            ci[2].round() as i64,
        )
    }

    #[inline]
    pub fn sample_nearest_pos(&self, pos: [f64; 3]) -> Option<T> {
        self.sample_nearest_ci(self.geometry().continuous_index(pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Grid3<f32> {
        let geom = Geometry::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        Grid3::new(geom, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap()
    }

    #[test]
    fn layout_is_x_fastest() {
        let g = small();
        assert_eq!(g.at(1, 0, 0), 1.0);
        assert_eq!(g.at(0, 1, 0), 2.0);
        assert_eq!(g.at(0, 0, 1), 4.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let geom = Geometry::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        assert!(Grid3::new(geom, vec![0.0f32; 7]).is_err());
    }

    #[test]
    fn trilinear_at_integer_index_returns_voxel_value() {
        let g = small();
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let v = g.sample_trilinear_ci([i as f64, j as f64, k as f64]);
                    assert_eq!(v, g.at(i, j, k) as f64);
                }
            }
        }
    }

    #[test]
    fn trilinear_midpoint_matches_hand_formula() {
        let g = small();
        // centre of the cell: mean of all eight corners
        let v = g.sample_trilinear_ci([0.5, 0.5, 0.5]);
        assert!((v - 3.5).abs() < 1e-12);
        // on an edge
        let v = g.sample_trilinear_ci([0.25, 0.0, 0.0]);
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn trilinear_outside_blends_to_zero() {
        let g = small();
        // half a voxel beyond the +x face: half of the boundary value
        let v = g.sample_trilinear_ci([1.5, 0.0, 0.0]);
        assert!((v - 0.5).abs() < 1e-12);
        // fully outside
        assert_eq!(g.sample_trilinear_ci([3.0, 0.0, 0.0]), 0.0);
        assert_eq!(g.sample_trilinear_ci([-2.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn nearest_rounds_and_rejects_outside() {
        let g = small();
        assert_eq!(g.sample_nearest_ci([0.4, 0.0, 0.0]), Some(0.0));
        assert_eq!(g.sample_nearest_ci([0.6, 0.0, 0.0]), Some(1.0));
        assert_eq!(g.sample_nearest_ci([-0.6, 0.0, 0.0]), None);
        assert_eq!(g.sample_nearest_ci([1.4, 1.4, 1.4]), Some(7.0));
    }
}
