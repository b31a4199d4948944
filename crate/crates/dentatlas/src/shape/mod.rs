//! Surface extraction, rigid alignment, CPD correspondence and PCA shape
//! models.

mod correspond;
mod cpd;
mod icp;
mod kdtree;
mod mc;
mod mesh;
mod pca;

pub use correspond::{
    correspond_dentition, correspond_single_tooth, dentition_topology, establish_correspondence,
    ToothMeshes,
};
pub use cpd::{cpd_nonrigid, mean_nearest_neighbor_spacing, CpdConfig, CpdResult};
pub use icp::rigid_align_to_template;
pub use kdtree::KdTree;
pub use mc::{extract_foreground_surface, extract_label_surface, extract_surface};
pub use mesh::{
    closest_point_on_triangle, symmetric_surface_distance, EdgeStats, SurfaceMesh,
    SurfaceProjector, MIN_TRIANGLE_AREA,
};
pub use pca::{flatten, pca_fit, unflatten, CorrespondedShapeSet, ShapeModel};
