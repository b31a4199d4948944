//! Volumetric data types and the segmentation-guided enhancement operators.

mod dice;
pub mod enhance;
mod grid;
mod ops;

pub use dice::{dice_coefficient, dice_for_labels};
pub use enhance::{
    arch_adjacent_pairs, default_reassignment_table, enhance_subject, is_fdi_tooth_label,
    EnhancedSubject, EnhancementConfig, FDI_LABELS, LOWER_ARCH_ORDER, UPPER_ARCH_ORDER,
};
pub use grid::Grid3;
pub use ops::{
    ball_offsets, bounding_box_of_labels, crop_with_margin, dilate_labels, mask_by_labels,
    normalize_intensity, reassign_label_intensities, resample_labels, resample_labels_to_geometry,
    resample_to_geometry, resample_trilinear,
};

/// Scalar CBCT-style volume at pipeline precision.
pub type VolumeGrid = Grid3<f32>;

/// FDI tooth label map.
pub type LabelGrid = Grid3<u16>;
