//! Pipeline orchestration: configuration, provenance, per-subcommand
//! commands and the phantom evaluation experiments.

pub mod commands;
mod config;
pub mod eval;
mod provenance;

pub use commands::{
    prepare_subject, run_atlas_build, run_correspond, run_enhance, run_label, run_mesh,
    run_pca, run_phantom_make, run_register, run_synth, tooth_meshes, AtlasBuildOutputs,
    CorrespondOutputs, EnhanceReport, MeshSource, PcaReport, PhantomOutputs, PreparedSubject,
    RegisterReport,
};
pub use config::{AtlasConfig, PipelineConfig, ShapeConfig};
pub use eval::{
    atlas_experiment, labeling_experiment, run_eval, AtlasExperiment, CheckOutcome, EvalReport,
    EvalSettings, LabelingExperiment,
};
pub use provenance::Provenance;
