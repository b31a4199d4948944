//! File formats: MetaImage volumes/fields, ASCII PLY meshes, JSON
//! transforms, shape-set/model blobs and the cohort manifest.

pub mod manifest;
pub mod metaimage;
pub mod model;
pub mod ply;
pub mod transform_json;
