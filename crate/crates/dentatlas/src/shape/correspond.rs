//! Point-to-point correspondence: CPD-moved template vertices projected
//! onto the subject surface, reusing the template topology.

use std::collections::BTreeMap;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::volgrid::FDI_LABELS;

use super::cpd::{cpd_nonrigid, CpdConfig};
use super::icp::rigid_align_to_template;
use super::mesh::{SurfaceMesh, SurfaceProjector};

/// Deform the template mesh onto `subject` and return the subject's shape
/// with the template's topology.
///
/// CPD runs on (at most `cfg.max_points`) control vertices from each mesh;
/// every template vertex then rides through the learned kernel motion and
/// is finally projected onto the nearest point of the subject surface, so
/// output vertices lie exactly on the observed anatomy.
pub fn establish_correspondence(
    template: &SurfaceMesh,
    subject: &SurfaceMesh,
    cfg: &CpdConfig,
) -> Result<SurfaceMesh> {
    if template.is_empty() || subject.is_empty() {
        return Err(Error::DegenerateInput(
            "correspondence needs nonempty meshes".into(),
        ));
    }
    let control = template.subsampled_vertices(cfg.max_points);
    let target = subject.subsampled_vertices(cfg.max_points);
    let result = cpd_nonrigid(&control, &target, cfg)?;
    let moved = result.transport(&template.vertices);

    let projector = SurfaceProjector::new(subject)?;
    let vertices: Vec<Point3<f64>> = moved.iter().map(|p| projector.project(p).0).collect();
    SurfaceMesh::new(vertices, template.triangles.clone(), template.labels.clone())
}

/// Per-tooth template meshes keyed by FDI label.
pub type ToothMeshes = BTreeMap<u16, SurfaceMesh>;

/// One subject's corresponded dentition: per-tooth vertex blocks in fixed
/// FDI order, concatenated. The subject teeth must already be rigidly
/// aligned to the template (whole-dentition alignment).
pub fn correspond_dentition(
    template_teeth: &ToothMeshes,
    subject_teeth: &ToothMeshes,
    cfg: &CpdConfig,
) -> Result<Vec<Point3<f64>>> {
    let mut points = Vec::new();
    for label in FDI_LABELS {
        let template = template_teeth.get(&label).ok_or_else(|| {
            Error::InvalidArgument(format!("template is missing tooth {label}"))
        })?;
        let subject = subject_teeth.get(&label).ok_or_else(|| {
            Error::InvalidArgument(format!("subject is missing tooth {label}"))
        })?;
        let mesh = establish_correspondence(template, subject, cfg)?;
        points.extend(mesh.vertices);
    }
    Ok(points)
}

/// Shared dentition topology: template tooth triangles concatenated in FDI
/// order with vertex offsets.
pub fn dentition_topology(template_teeth: &ToothMeshes) -> Result<Vec<[u32; 3]>> {
    let mut triangles = Vec::new();
    let mut offset = 0u32;
    for label in FDI_LABELS {
        let template = template_teeth.get(&label).ok_or_else(|| {
            Error::InvalidArgument(format!("template is missing tooth {label}"))
        })?;
        triangles.extend(
            template
                .triangles
                .iter()
                .map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]),
        );
        offset += template.vertices.len() as u32;
    }
    Ok(triangles)
}

/// One subject's corresponded single tooth for the per-tooth models: the
/// subject tooth is rigidly re-aligned to the tooth template (removing its
/// pose within the dentition) before correspondence.
pub fn correspond_single_tooth(
    template_tooth: &SurfaceMesh,
    subject_tooth: &SurfaceMesh,
    cfg: &CpdConfig,
) -> Result<Vec<Point3<f64>>> {
    let rigid = rigid_align_to_template(subject_tooth, template_tooth)?;
    let aligned = subject_tooth.transformed(&rigid.to_map());
    let mesh = establish_correspondence(template_tooth, &aligned, cfg)?;
    Ok(mesh.vertices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Geometry;
    use crate::shape::mc::extract_surface;
    use crate::shape::mesh::closest_point_on_triangle;
    use crate::volgrid::Grid3;

    fn blob_mesh(stretch: f64) -> SurfaceMesh {
        let geom = Geometry::unit([24, 24, 24]);
        let g: Grid3<f64> = Grid3::from_fn(geom, |p| {
            let dx = (p[0] as f64 - 11.5) / stretch;
            let dy = p[1] as f64 - 11.5;
            let dz = p[2] as f64 - 11.5;
            let r = (dx * dx + dy * dy + dz * dz).sqrt();
            if r <= 7.0 {
                1.0
            } else {
                0.0
            }
        });
        extract_surface(&g, 0.5).unwrap()
    }

    #[test]
    fn self_correspondence_returns_template_vertices() {
        let m = blob_mesh(1.0);
        let out = establish_correspondence(&m, &m, &CpdConfig::default()).unwrap();
        assert_eq!(out.triangles.len(), m.triangles.len());
        let mut worst = 0.0f64;
        for (a, b) in out.vertices.iter().zip(&m.vertices) {
            worst = worst.max((a - b).norm());
        }
        assert!(worst < 1e-3, "max vertex drift {worst} mm");
    }

    #[test]
    fn output_vertices_lie_exactly_on_subject_surface() {
        let template = blob_mesh(1.0);
        let subject = blob_mesh(1.25);
        let out = establish_correspondence(&template, &subject, &CpdConfig::default()).unwrap();
        assert_eq!(out.triangles.len(), template.triangles.len());
        // each output vertex has zero distance to some subject triangle
        let projector = SurfaceProjector::new(&subject).unwrap();
        let mut worst = 0.0f64;
        for v in &out.vertices {
            worst = worst.max(projector.project(v).1);
        }
        assert!(worst < 1e-9, "max surface distance {worst}");
        // sanity: the projector agrees with a brute-force triangle check on
        // one vertex
        let v = out.vertices[0];
        let brute = subject
            .triangles
            .iter()
            .map(|&t| {
                let [a, b, c] = subject.triangle_points(t);
                (closest_point_on_triangle(&v, &a, &b, &c) - v).norm()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(brute < 1e-9);
    }
}
