//! Groupwise template construction (symmetric groupwise normalization) and
//! atlas-based tooth labeling.

mod average;
mod build;
mod label;

pub use average::{average_affine_transforms, average_displacement_fields};
pub use build::{
    apply_shape_update, build_atlas, common_grid, initialize_templates,
    register_subject_to_template, resample_channels_to_grid, AtlasResult, AtlasRun,
    IterationRecord, SubjectAlignment, TemplatePair,
};
pub use label::{
    atlas_label_transfer, connected_components, labeling_success_rate, score_against_warped_atlas,
    vote_atlas_labels, LabelTransferResult, ToothAssignment,
};
