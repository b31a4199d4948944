//! Synthetic dental phantom: a hidden ground-truth template plus
//! randomized cohorts with exact deformations, labels and correspondences.

mod subject;
mod template;

pub use subject::{
    cohort, synthesize_signed, synthesize_subject, Bump, DeformationParams, PhantomSubject,
    ToothJitter,
};
pub use template::{generate_template, PhantomTemplate, ToothShape};
