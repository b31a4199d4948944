//! Scalar abstraction for the volumetric kernels.
//!
//! Grid values, displacement fields and the registration machinery are
//! generic over [`Real`] so the same code runs at `f32` (the pipeline and
//! on-disk precision) and at `f64` (used by tests that compare analytic
//! gradients against finite differences). Interpolation weights and
//! reductions are always carried out in `f64` regardless of the storage
//! type; only stored values round to `T`.

use num_traits::Float;

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float + Element + std::fmt::Debug + std::fmt::Display + Default
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Grid element: anything a voxel can hold. `Real` scalars, labels and
/// small vectors all qualify.
pub trait Element: Copy + Default + PartialEq + Send + Sync + 'static {}

impl Element for f32 {}
impl Element for f64 {}
impl Element for u16 {}
impl Element for u8 {}
impl<T: Element> Element for [T; 3] {}
