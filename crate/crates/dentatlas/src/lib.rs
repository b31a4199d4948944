//! Unbiased dental atlas construction and parametric dental shape models.
//!
//! The pipeline takes a cohort of labeled tooth volumes and produces:
//!
//! 1. **Enhanced channels** — each CBCT-style volume is cropped around its
//!    teeth, masked by the dilated segmentation, and paired with a guidance
//!    channel built by reassigning per-tooth intensities ([`volgrid`]).
//! 2. **An unbiased template** — symmetric groupwise normalization
//!    iterates multi-channel registration, averaging and template shape
//!    updates until the template sits at the cohort's deformation mean
//!    ([`register`], [`atlas`]).
//! 3. **Parametric shape models** — tooth surfaces are extracted, rigidly
//!    aligned to the template, put into point-to-point correspondence via
//!    coherent point drift, and summarized by PCA ([`shape`]).
//!
//! A synthetic phantom generator ([`phantom`]) provides cohorts with known
//! ground-truth deformations, labels and correspondences, so every stage is
//! testable without clinical data.
//!
//! Kernels are generic over the scalar type via [`num::Real`]; the pipeline
//! instantiates them at `f32` ([`VolumeGrid`], [`DisplacementField`]), and
//! precision-sensitive tests reuse the same code at `f64`.

pub mod atlas;
pub mod error;
pub mod field;
pub mod geom;
pub mod io;
pub mod linalg;
pub mod num;
pub mod phantom;
pub mod pipeline;
pub mod register;
pub mod shape;
pub mod smooth;
pub mod volgrid;

pub use error::{Error, ErrorClass, Result};
pub use field::{DiffeoPair, Field3};
pub use geom::{Geometry, VoxelBox};
pub use num::Real;
pub use register::{ChannelPair, RegistrationSchedule};
pub use volgrid::{Grid3, LabelGrid, VolumeGrid};

/// Pipeline-precision displacement field (mm vectors stored as `f32`).
pub type DisplacementField = Field3<f32>;
