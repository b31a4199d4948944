//! Filesystem-level pipeline commands, one per CLI subcommand. The CLI is
//! a thin argument parser over these, and the acceptance suite drives them
//! directly to check byte-level reproducibility.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::atlas::{
    atlas_label_transfer, build_atlas, common_grid, register_subject_to_template,
    resample_channels_to_grid, vote_atlas_labels, AtlasResult, AtlasRun, LabelTransferResult,
};
use crate::error::{Error, Result};
use crate::field::warp_labels_composed;
use crate::geom::VoxelBox;
use crate::io::manifest::{CohortManifest, ManifestEntry};
use crate::io::{metaimage, model, ply, transform_json};
use crate::phantom;
use crate::register::{ChannelPair, LinearTransform};
use crate::shape::{
    correspond_dentition, correspond_single_tooth, dentition_topology, extract_label_surface,
    extract_surface, pca_fit, rigid_align_to_template, unflatten, CorrespondedShapeSet,
    SurfaceMesh, ToothMeshes,
};
use crate::volgrid::{
    bounding_box_of_labels, enhance_subject, normalize_intensity, resample_labels,
    resample_trilinear, EnhancedSubject, FDI_LABELS,
};
use crate::{LabelGrid, VolumeGrid};

use super::config::PipelineConfig;
use super::provenance::Provenance;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(
        path,
        serde_json::to_string_pretty(value)
            .map_err(|e| Error::Config(format!("serialization: {e}")))?,
    )
    .map_err(|e| Error::io(path.display().to_string(), e))
}

/// A subject after standardization and enhancement, on its own cropped grid.
pub struct PreparedSubject {
    pub id: String,
    pub channels: ChannelPair<f32>,
    pub labels: LabelGrid,
}

/// Standardize resolution, normalize intensities, and run the
/// segmentation-guided enhancement.
pub fn prepare_subject(
    cfg: &PipelineConfig,
    id: &str,
    volume: &VolumeGrid,
    labels: &LabelGrid,
) -> Result<PreparedSubject> {
    let spacing = [cfg.working_spacing_mm; 3];
    let volume = resample_trilinear(volume, spacing)?;
    let labels = resample_labels(labels, spacing)?;
    let volume = normalize_intensity(&volume)?;
    let enhanced = enhance_subject(&volume, &labels, &cfg.enhancement)?;
    Ok(PreparedSubject {
        id: id.to_string(),
        channels: ChannelPair::new(enhanced.masked, enhanced.reassigned, cfg.channel_weights)?,
        labels: enhanced.labels,
    })
}

fn load_and_prepare(cfg: &PipelineConfig, entry: &ManifestEntry) -> Result<PreparedSubject> {
    let volume = metaimage::read_volume(&entry.volume)?;
    let labels = metaimage::read_labels(&entry.labels)?;
    prepare_subject(cfg, &entry.id, &volume, &labels)
}

// ---------------------------------------------------------------------------
// phantom make

pub struct PhantomOutputs {
    pub manifest_path: PathBuf,
    pub template_dir: PathBuf,
}

pub fn run_phantom_make(
    cfg: &PipelineConfig,
    seed: u64,
    n: usize,
    dims: usize,
    amplitude_voxels: f64,
    noise_sigma: f64,
    out_dir: &Path,
) -> Result<PhantomOutputs> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let spacing = [cfg.working_spacing_mm; 3];
    let template = phantom::generate_template(seed, [dims; 3], spacing)?;
    let subjects = phantom::cohort(&template, n, seed, amplitude_voxels, noise_sigma)?;

    let template_dir = out_dir.join("template");
    ensure_dir(&template_dir)?;
    metaimage::write_volume(&template_dir.join("intensity.mha"), &template.intensity)?;
    metaimage::write_labels(&template_dir.join("labels.mha"), &template.labels)?;
    for (label, mesh) in &template.meshes {
        ply::write_mesh(&template_dir.join(format!("tooth_{label}.ply")), mesh)?;
    }

    let mut entries = Vec::with_capacity(n);
    for subject in &subjects {
        let dir = out_dir.join(&subject.id);
        ensure_dir(&dir)?;
        metaimage::write_volume(&dir.join("volume.mha"), &subject.intensity)?;
        metaimage::write_labels(&dir.join("labels.mha"), &subject.labels)?;
        metaimage::write_field(&dir.join("truth_forward.mha"), &subject.forward_field)?;
        for (label, points) in &subject.tracked {
            let template_mesh = &template.meshes[label];
            let mesh = SurfaceMesh::new(
                points.clone(),
                template_mesh.triangles.clone(),
                template_mesh.labels.clone(),
            )?;
            ply::write_mesh(&dir.join(format!("truth_tooth_{label}.ply")), &mesh)?;
        }
        entries.push(ManifestEntry {
            id: subject.id.clone(),
            volume: PathBuf::from(&subject.id).join("volume.mha"),
            labels: PathBuf::from(&subject.id).join("labels.mha"),
        });
    }
    let manifest = CohortManifest { subjects: entries };
    let manifest_path = out_dir.join("manifest.json");
    manifest.write(&manifest_path)?;
    Provenance::new("phantom make", cfg, &[seed], &[])?.write(out_dir)?;
    Ok(PhantomOutputs {
        manifest_path,
        template_dir,
    })
}

// ---------------------------------------------------------------------------
// enhance

#[derive(Debug, Serialize)]
pub struct EnhanceReport {
    pub labels_bbox_min: [usize; 3],
    pub labels_bbox_max: [usize; 3],
    pub crop_min: [usize; 3],
    pub crop_max: [usize; 3],
    pub cropped_dims: [usize; 3],
}

pub fn run_enhance(
    cfg: &PipelineConfig,
    volume_path: &Path,
    labels_path: &Path,
    out_dir: &Path,
) -> Result<EnhanceReport> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let volume = metaimage::read_volume(volume_path)?;
    let labels = metaimage::read_labels(labels_path)?;
    let spacing = [cfg.working_spacing_mm; 3];
    let volume = resample_trilinear(&volume, spacing)?;
    let labels = resample_labels(&labels, spacing)?;
    let volume = normalize_intensity(&volume)?;
    let bbox = bounding_box_of_labels(&labels)?;
    let crop = bbox.expanded_clamped(cfg.enhancement.margin_voxels, labels.dims());
    let enhanced: EnhancedSubject = enhance_subject(&volume, &labels, &cfg.enhancement)?;

    metaimage::write_volume(&out_dir.join("cropped.mha"), &enhanced.cropped)?;
    metaimage::write_volume(&out_dir.join("masked.mha"), &enhanced.masked)?;
    metaimage::write_volume(&out_dir.join("reassigned.mha"), &enhanced.reassigned)?;
    metaimage::write_labels(&out_dir.join("labels_cropped.mha"), &enhanced.labels)?;
    metaimage::write_labels(&out_dir.join("mask.mha"), &enhanced.mask)?;

    let report = EnhanceReport {
        labels_bbox_min: bbox.min,
        labels_bbox_max: bbox.max,
        crop_min: crop.min,
        crop_max: crop.max,
        cropped_dims: enhanced.cropped.dims(),
    };
    write_json(&out_dir.join("enhance.json"), &report)?;
    Provenance::new(
        "enhance",
        cfg,
        &[],
        &[
            volume_path.display().to_string(),
            labels_path.display().to_string(),
        ],
    )?
    .write(out_dir)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// register

#[derive(Debug, Serialize)]
pub struct RegisterReport {
    pub final_metric: f64,
    pub round_trip_residual_vox: f64,
    pub min_interior_jacobian: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn run_register(
    cfg: &PipelineConfig,
    fixed_volume: &Path,
    fixed_guidance: Option<&Path>,
    moving_volume: &Path,
    moving_guidance: Option<&Path>,
    out_dir: &Path,
) -> Result<RegisterReport> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let load_pair = |vol: &Path, guid: Option<&Path>| -> Result<ChannelPair<f32>> {
        let intensity = metaimage::read_volume(vol)?;
        match guid {
            Some(g) => {
                ChannelPair::new(intensity, metaimage::read_volume(g)?, cfg.channel_weights)
            }
            None => Ok(ChannelPair::intensity_only(intensity)),
        }
    };
    let fixed = load_pair(fixed_volume, fixed_guidance)?;
    let moving = load_pair(moving_volume, moving_guidance)?;
    if (fixed_guidance.is_some()) != (moving_guidance.is_some()) {
        return Err(Error::InvalidArgument(
            "fixed and moving must both or neither provide a guidance channel".into(),
        ));
    }

    let alignment = register_subject_to_template(&fixed, &moving, &cfg.registration)?;
    let warped = crate::field::warp_volume_composed(
        &moving.intensity,
        &alignment.diffeo.forward,
        Some(&alignment.affine.to_map()),
    );

    transform_json::write_transform(
        &out_dir.join("affine.json"),
        &LinearTransform::Affine(alignment.affine.clone()),
    )?;
    metaimage::write_field(&out_dir.join("forward.mha"), &alignment.diffeo.forward)?;
    metaimage::write_field(&out_dir.join("inverse.mha"), &alignment.diffeo.inverse)?;
    metaimage::write_volume(&out_dir.join("warped.mha"), &warped)?;

    let report = RegisterReport {
        final_metric: alignment.final_metric,
        round_trip_residual_vox: alignment.diffeo.round_trip_residual_vox(),
        min_interior_jacobian: crate::field::min_interior_jacobian(&alignment.diffeo.forward),
    };
    write_json(&out_dir.join("metrics.json"), &report)?;
    Provenance::new(
        "register",
        cfg,
        &[],
        &[
            fixed_volume.display().to_string(),
            moving_volume.display().to_string(),
        ],
    )?
    .write(out_dir)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// atlas build

pub struct AtlasBuildOutputs {
    pub result: AtlasResult,
    pub atlas_labels: LabelGrid,
    pub atlas_dir: PathBuf,
}

pub fn run_atlas_build(
    cfg: &PipelineConfig,
    manifest_path: &Path,
    out_dir: &Path,
) -> Result<AtlasBuildOutputs> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let manifest = CohortManifest::read(manifest_path)?;
    let entries = manifest.resolved(manifest_path);

    let prepared: Vec<Result<PreparedSubject>> = entries
        .par_iter()
        .map(|e| load_and_prepare(cfg, e))
        .collect();
    let mut subjects = Vec::with_capacity(prepared.len());
    for (i, p) in prepared.into_iter().enumerate() {
        subjects.push(p.map_err(|e| {
            Error::InvalidArgument(format!("subject {} ({}): {e}", i, entries[i].id))
        })?);
    }

    // common grid over the cropped subjects at working resolution
    let geometries: Vec<&crate::Geometry> = subjects
        .iter()
        .map(|s| s.channels.intensity.geometry())
        .collect();
    let grid = common_grid(&geometries, [cfg.working_spacing_mm; 3])?;
    let cohort: Vec<ChannelPair<f32>> = subjects
        .par_iter()
        .map(|s| resample_channels_to_grid(&s.channels, &grid).expect("weights preserved"))
        .collect();

    let run = AtlasRun {
        cohort,
        schedule: cfg.registration.clone(),
        outer_iterations: cfg.atlas.outer_iterations,
        shape_update_step: cfg.atlas.shape_update_step,
    };
    let result = build_atlas(&run)?;

    // hard atlas labels: subject labels warped into template space, voted
    let warped_labels: Vec<LabelGrid> = subjects
        .par_iter()
        .zip(&result.subjects)
        .map(|(s, a)| {
            warp_labels_composed(&s.labels, &a.diffeo.forward, Some(&a.affine.to_map()))
        })
        .collect();
    let atlas_labels = vote_atlas_labels(
        &warped_labels,
        &result.template.guidance_template,
        cfg.atlas.guidance_threshold as f32,
    )?;

    metaimage::write_volume(
        &out_dir.join("template_intensity.mha"),
        &result.template.intensity_template,
    )?;
    metaimage::write_volume(
        &out_dir.join("template_guidance.mha"),
        &result.template.guidance_template,
    )?;
    metaimage::write_labels(&out_dir.join("atlas_labels.mha"), &atlas_labels)?;
    for (subject, alignment) in subjects.iter().zip(&result.subjects) {
        transform_json::write_transform(
            &out_dir.join(format!("{}_affine.json", subject.id)),
            &LinearTransform::Affine(alignment.affine.clone()),
        )?;
        metaimage::write_field(
            &out_dir.join(format!("{}_forward.mha", subject.id)),
            &alignment.diffeo.forward,
        )?;
        metaimage::write_field(
            &out_dir.join(format!("{}_inverse.mha", subject.id)),
            &alignment.diffeo.inverse,
        )?;
    }
    let mut trace_csv = String::from("iteration,mean_metric,mean_field_norm\n");
    for r in &result.trace {
        trace_csv.push_str(&format!(
            "{},{},{}\n",
            r.iteration, r.mean_metric, r.mean_field_norm_vox
        ));
    }
    let trace_path = out_dir.join("trace.csv");
    std::fs::write(&trace_path, trace_csv)
        .map_err(|e| Error::io(trace_path.display().to_string(), e))?;
    Provenance::new(
        "atlas build",
        cfg,
        &[],
        &[manifest_path.display().to_string()],
    )?
    .write(out_dir)?;

    Ok(AtlasBuildOutputs {
        result,
        atlas_labels,
        atlas_dir: out_dir.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// label

pub fn run_label(
    cfg: &PipelineConfig,
    atlas_dir: &Path,
    subject_volume: &Path,
    subject_labels: &Path,
    out_dir: &Path,
) -> Result<LabelTransferResult> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let atlas_channels = ChannelPair::new(
        metaimage::read_volume(&atlas_dir.join("template_intensity.mha"))?,
        metaimage::read_volume(&atlas_dir.join("template_guidance.mha"))?,
        cfg.channel_weights,
    )?;
    let atlas_labels = metaimage::read_labels(&atlas_dir.join("atlas_labels.mha"))?;

    let volume = metaimage::read_volume(subject_volume)?;
    let labels = metaimage::read_labels(subject_labels)?;
    let subject = prepare_subject(cfg, "subject", &volume, &labels)?;

    let result = atlas_label_transfer(
        &atlas_labels,
        &atlas_channels,
        &subject.labels,
        &subject.channels,
        &cfg.registration,
    )?;
    write_json(&out_dir.join("labeling.json"), &result)?;
    Provenance::new(
        "label",
        cfg,
        &[],
        &[
            atlas_dir.display().to_string(),
            subject_volume.display().to_string(),
        ],
    )?
    .write(out_dir)?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// mesh

pub enum MeshSource<'a> {
    Labels { path: &'a Path, label: Option<u16> },
    Volume { path: &'a Path, iso: f64 },
}

pub fn run_mesh(cfg: &PipelineConfig, source: MeshSource, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    match source {
        MeshSource::Labels { path, label } => {
            let labels = metaimage::read_labels(path)?;
            let wanted: Vec<u16> = match label {
                Some(l) => vec![l],
                None => FDI_LABELS
                    .iter()
                    .copied()
                    .filter(|l| labels.data().contains(l))
                    .collect(),
            };
            if wanted.is_empty() {
                return Err(Error::EmptyForeground);
            }
            for l in wanted {
                let mesh = extract_label_surface(&labels, l)?;
                let out = out_dir.join(format!("tooth_{l}.ply"));
                ply::write_mesh(&out, &mesh)?;
                written.push(out);
            }
            Provenance::new("mesh", cfg, &[], &[path.display().to_string()])?.write(out_dir)?;
        }
        MeshSource::Volume { path, iso } => {
            let volume = metaimage::read_volume(path)?;
            let mesh = extract_surface(&volume, iso)?;
            let out = out_dir.join("isosurface.ply");
            ply::write_mesh(&out, &mesh)?;
            written.push(out);
            Provenance::new("mesh", cfg, &[], &[path.display().to_string()])?.write(out_dir)?;
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// correspond

/// Extract per-tooth meshes from a label grid; all 28 teeth must be present.
pub fn tooth_meshes(labels: &LabelGrid) -> Result<ToothMeshes> {
    let mut meshes = BTreeMap::new();
    for label in FDI_LABELS {
        let mesh = extract_label_surface(labels, label)?;
        if mesh.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "tooth {label} has no surface in the label grid"
            )));
        }
        meshes.insert(label, mesh);
    }
    Ok(meshes)
}

pub struct CorrespondOutputs {
    pub dentition: CorrespondedShapeSet,
    pub per_tooth: BTreeMap<u16, CorrespondedShapeSet>,
}

pub fn run_correspond(
    cfg: &PipelineConfig,
    atlas_labels_path: &Path,
    manifest_path: &Path,
    out_dir: &Path,
) -> Result<CorrespondOutputs> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let atlas_labels = metaimage::read_labels(atlas_labels_path)?;
    let template_teeth = tooth_meshes(&atlas_labels)?;
    let template_dentition = SurfaceMesh::merged(template_teeth.values());

    let manifest = CohortManifest::read(manifest_path)?;
    let entries = manifest.resolved(manifest_path);

    struct SubjectShapes {
        id: String,
        dentition: Vec<nalgebra::Point3<f64>>,
        teeth: BTreeMap<u16, Vec<nalgebra::Point3<f64>>>,
    }

    let per_subject: Vec<Result<SubjectShapes>> = entries
        .par_iter()
        .map(|entry| -> Result<SubjectShapes> {
            let labels = metaimage::read_labels(&entry.labels)?;
            let labels = resample_labels(&labels, [cfg.working_spacing_mm; 3])?;
            let raw_teeth = tooth_meshes(&labels)?;
            let merged = SurfaceMesh::merged(raw_teeth.values());
            // whole-dentition rigid alignment to the template
            let rigid = rigid_align_to_template(&merged, &template_dentition)?;
            let map = rigid.to_map();
            let aligned: ToothMeshes = raw_teeth
                .iter()
                .map(|(l, m)| (*l, m.transformed(&map)))
                .collect();
            let dentition = correspond_dentition(&template_teeth, &aligned, &cfg.shape.cpd)?;
            let mut teeth = BTreeMap::new();
            for label in FDI_LABELS {
                let pts = correspond_single_tooth(
                    &template_teeth[&label],
                    &aligned[&label],
                    &cfg.shape.cpd,
                )?;
                teeth.insert(label, pts);
            }
            Ok(SubjectShapes {
                id: entry.id.clone(),
                dentition,
                teeth,
            })
        })
        .collect();
    let mut shapes = Vec::with_capacity(per_subject.len());
    for (i, s) in per_subject.into_iter().enumerate() {
        shapes.push(s.map_err(|e| {
            Error::InvalidArgument(format!("subject {} ({}): {e}", i, entries[i].id))
        })?);
    }

    let ids: Vec<String> = shapes.iter().map(|s| s.id.clone()).collect();
    let dentition = CorrespondedShapeSet::new(
        dentition_topology(&template_teeth)?,
        shapes.iter().map(|s| s.dentition.clone()).collect(),
        ids.clone(),
    )?;
    model::write_shape_set(out_dir, "dentition", &dentition)?;

    let mut per_tooth = BTreeMap::new();
    for label in FDI_LABELS {
        let set = CorrespondedShapeSet::new(
            template_teeth[&label].triangles.clone(),
            shapes.iter().map(|s| s.teeth[&label].clone()).collect(),
            ids.clone(),
        )?;
        model::write_shape_set(out_dir, &format!("tooth_{label}"), &set)?;
        per_tooth.insert(label, set);
    }
    Provenance::new(
        "correspond",
        cfg,
        &[],
        &[
            atlas_labels_path.display().to_string(),
            manifest_path.display().to_string(),
        ],
    )?
    .write(out_dir)?;
    Ok(CorrespondOutputs {
        dentition,
        per_tooth,
    })
}

// ---------------------------------------------------------------------------
// pca / synth

#[derive(Debug, Serialize)]
pub struct PcaReport {
    pub threshold: f64,
    pub components_needed: usize,
    pub n_modes: usize,
    pub explained_variance_ratio: Vec<f64>,
}

pub fn run_pca(
    cfg: &PipelineConfig,
    shapes_json: &Path,
    threshold: f64,
    out_dir: &Path,
) -> Result<PcaReport> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let set = model::read_shape_set(shapes_json)?;
    let fitted = pca_fit(&set)?;
    let stem = shapes_json
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("shapes");
    model::write_shape_model(out_dir, &format!("{stem}_model"), &fitted)?;
    let components_needed = fitted.explained_variance_report(threshold)?;
    let report = PcaReport {
        threshold,
        components_needed,
        n_modes: fitted.n_modes(),
        explained_variance_ratio: fitted.explained_variance_ratio.clone(),
    };
    write_json(&out_dir.join(format!("{stem}_pca_report.json")), &report)?;
    Provenance::new("pca", cfg, &[], &[shapes_json.display().to_string()])?.write(out_dir)?;
    Ok(report)
}

pub fn run_synth(
    cfg: &PipelineConfig,
    model_json: &Path,
    pc: usize,
    sd_range: (f64, f64),
    steps: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    if pc == 0 {
        return Err(Error::InvalidArgument("PC indices are 1-based".into()));
    }
    if steps < 2 {
        return Err(Error::InvalidArgument("need at least 2 steps".into()));
    }
    let shape_model = model::read_shape_model(model_json)?;
    if pc > shape_model.n_modes() {
        return Err(Error::InvalidArgument(format!(
            "PC {pc} requested but the model has {} modes",
            shape_model.n_modes()
        )));
    }
    let mut written = Vec::with_capacity(steps);
    for step in 0..steps {
        let t = step as f64 / (steps - 1) as f64;
        let sd = sd_range.0 + t * (sd_range.1 - sd_range.0);
        let mut coeffs = vec![0.0; pc];
        coeffs[pc - 1] = sd;
        let points = unflatten(&shape_model.synthesize(&coeffs)?);
        let mesh = SurfaceMesh::new(points, shape_model.topology.clone(), None)?;
        let path = out_dir.join(format!("synth_pc{pc}_{step:02}_sd{sd:+.2}.ply"));
        ply::write_mesh(&path, &mesh)?;
        written.push(path);
    }
    Provenance::new("synth", cfg, &[], &[model_json.display().to_string()])?.write(out_dir)?;
    Ok(written)
}

// ---------------------------------------------------------------------------
// helpers shared with eval

/// Crop box arithmetic used by the enhance oracle.
pub fn expected_crop(bbox: &VoxelBox, margin: usize, dims: [usize; 3]) -> VoxelBox {
    bbox.expanded_clamped(margin, dims)
}
