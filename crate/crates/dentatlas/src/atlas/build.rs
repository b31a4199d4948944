//! Symmetric groupwise normalization: iterate registration to the current
//! template, averaging of warped images, and a template shape update along
//! the negated mean deformation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{warp_volume_composed, DiffeoPair, Field3};
use crate::geom::Geometry;
use crate::register::{
    register_linear, register_linear_from, register_syn, AffineTransform, ChannelPair,
    LinearTransform, RegistrationMode, RegistrationSchedule,
};
use crate::volgrid::{resample_to_geometry, Grid3, VolumeGrid};

use super::average::{average_affine_transforms, average_displacement_fields};

/// The two-channel template with its SyGN generation counter.
#[derive(Debug, Clone)]
pub struct TemplatePair {
    pub intensity_template: VolumeGrid,
    pub guidance_template: VolumeGrid,
    pub generation: u32,
}

impl TemplatePair {
    /// View as a registration target with the given channel weights.
    pub fn as_channels(&self, weights: (f64, f64)) -> Result<ChannelPair<f32>> {
        ChannelPair::new(
            self.intensity_template.clone(),
            self.guidance_template.clone(),
            weights,
        )
    }
}

/// Inputs of a groupwise template construction.
#[derive(Debug, Clone)]
pub struct AtlasRun {
    /// Enhanced two-channel subjects, all resampled to a common grid.
    pub cohort: Vec<ChannelPair<f32>>,
    pub schedule: RegistrationSchedule,
    pub outer_iterations: usize,
    /// Fraction of the mean deformation applied per shape update, in (0, 1].
    pub shape_update_step: f64,
}

impl AtlasRun {
    pub fn validate(&self) -> Result<()> {
        if self.cohort.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "atlas cohort needs at least 2 subjects, got {}",
                self.cohort.len()
            )));
        }
        if self.outer_iterations == 0 {
            return Err(Error::InvalidArgument(
                "outer_iterations must be at least 1".into(),
            ));
        }
        if !(self.shape_update_step > 0.0 && self.shape_update_step <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "shape update step must lie in (0, 1], got {}",
                self.shape_update_step
            )));
        }
        let geom = self.cohort[0].intensity.geometry();
        let weights = self.cohort[0].weights;
        for (i, s) in self.cohort.iter().enumerate() {
            geom.check_same(s.intensity.geometry(), "atlas cohort")
                .map_err(|e| Error::InvalidArgument(format!("subject {i}: {e}")))?;
            if s.weights != weights {
                return Err(Error::InvalidArgument(format!(
                    "subject {i} has different channel weights"
                )));
            }
        }
        self.schedule.validate()
    }
}

/// Per-subject final transforms out of the groupwise loop.
#[derive(Debug, Clone)]
pub struct SubjectAlignment {
    pub affine: AffineTransform,
    pub diffeo: DiffeoPair<f32>,
    pub final_metric: f64,
}

/// Convergence trace entry per outer iteration.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean final registration metric over the cohort.
    pub mean_metric: f64,
    /// Mean foreground voxel norm of the averaged forward field.
    pub mean_field_norm_vox: f64,
}

#[derive(Debug, Clone)]
pub struct AtlasResult {
    pub template: TemplatePair,
    pub subjects: Vec<SubjectAlignment>,
    pub trace: Vec<IterationRecord>,
}

/// Union physical bounding box of several grids, voxelized at `spacing`.
pub fn common_grid(geometries: &[&Geometry], spacing: [f64; 3]) -> Result<Geometry> {
    if geometries.is_empty() {
        return Err(Error::InvalidArgument("no geometries".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for g in geometries {
        let (a, b) = g.physical_bounds();
        for d in 0..3 {
            lo[d] = lo[d].min(a[d]);
            hi[d] = hi[d].max(b[d]);
        }
    }
    let mut dims = [0usize; 3];
    for d in 0..3 {
        dims[d] = ((hi[d] - lo[d]) / spacing[d]).floor() as usize + 1;
    }
    Geometry::new(dims, spacing, lo)
}

/// Voxelwise arithmetic mean per channel; generation 0.
pub fn initialize_templates(cohort: &[ChannelPair<f32>]) -> Result<TemplatePair> {
    if cohort.is_empty() {
        return Err(Error::InvalidArgument("empty cohort".into()));
    }
    let geom = cohort[0].intensity.geometry().clone();
    for s in cohort {
        geom.check_same(s.intensity.geometry(), "initialize_templates")?;
    }
    Ok(TemplatePair {
        intensity_template: mean_volume(cohort.iter().map(|s| &s.intensity))?,
        guidance_template: mean_volume(cohort.iter().map(|s| &s.guidance))?,
        generation: 0,
    })
}

fn mean_volume<'a>(volumes: impl Iterator<Item = &'a VolumeGrid>) -> Result<VolumeGrid> {
    let volumes: Vec<&VolumeGrid> = volumes.collect();
    let geom = volumes[0].geometry().clone();
    let n = volumes.len() as f64;
    let mut acc = vec![0.0f64; geom.voxel_count()];
    for v in &volumes {
        for (a, &x) in acc.iter_mut().zip(v.data()) {
            *a += x as f64;
        }
    }
    Grid3::new(geom, acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Warp both template channels by `inv(mean_affine) ∘ (id − step·mean_field)`,
/// moving the template toward the cohort's deformation mean.
pub fn apply_shape_update(
    template: &TemplatePair,
    mean_affine: &AffineTransform,
    mean_field: &Field3<f32>,
    step: f64,
) -> Result<TemplatePair> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "shape update step must lie in (0, 1], got {step}"
        )));
    }
    template
        .intensity_template
        .geometry()
        .check_same(mean_field.geometry(), "apply_shape_update")?;
    let update_field = mean_field.scaled(-step);
    let inverse_affine = mean_affine.to_map().inverse()?;
    Ok(TemplatePair {
        intensity_template: warp_volume_composed(
            &template.intensity_template,
            &update_field,
            Some(&inverse_affine),
        ),
        guidance_template: warp_volume_composed(
            &template.guidance_template,
            &update_field,
            Some(&inverse_affine),
        ),
        generation: template.generation + 1,
    })
}

/// Register one subject to the template: rigid, then affine seeded by the
/// rigid result, then symmetric diffeomorphic.
pub fn register_subject_to_template(
    template_channels: &ChannelPair<f32>,
    subject: &ChannelPair<f32>,
    schedule: &RegistrationSchedule,
) -> Result<SubjectAlignment> {
    let rigid = register_linear(
        template_channels,
        subject,
        RegistrationMode::Rigid,
        schedule,
    )?;
    let affine = register_linear_from(
        template_channels,
        subject,
        RegistrationMode::Affine,
        schedule,
        Some(&rigid.transform),
    )?;
    let affine_transform = match &affine.transform {
        LinearTransform::Affine(a) => a.clone(),
        LinearTransform::Rigid(r) => AffineTransform::from_map(&r.to_map(), r.center),
    };
    let syn = register_syn(
        template_channels,
        subject,
        Some(&affine.transform),
        schedule,
    )?;
    Ok(SubjectAlignment {
        affine: affine_transform,
        diffeo: syn.pair,
        final_metric: syn.final_metric,
    })
}

/// Run the groupwise loop: average, register, re-average warped subjects,
/// update the template shape, repeat.
pub fn build_atlas(run: &AtlasRun) -> Result<AtlasResult> {
    run.validate()?;
    let weights = run.cohort[0].weights;
    let mut template = initialize_templates(&run.cohort)?;
    let mut subjects: Vec<SubjectAlignment> = Vec::new();
    let mut trace = Vec::with_capacity(run.outer_iterations);

    for iteration in 0..run.outer_iterations {
        let template_channels = template.as_channels(weights)?;
        let registered: Vec<Result<SubjectAlignment>> = run
            .cohort
            .par_iter()
            .map(|subject| register_subject_to_template(&template_channels, subject, &run.schedule))
            .collect();
        let mut aligned = Vec::with_capacity(run.cohort.len());
        for (i, r) in registered.into_iter().enumerate() {
            aligned.push(r.map_err(|e| {
                Error::RegistrationFailure(format!(
                    "iteration {iteration}, subject {i}: {e}"
                ))
            })?);
        }

        // step (3): average the warped channels
        let warped: Vec<ChannelPair<f32>> = run
            .cohort
            .par_iter()
            .zip(&aligned)
            .map(|(subject, a)| {
                let map = a.affine.to_map();
                ChannelPair::new(
                    warp_volume_composed(&subject.intensity, &a.diffeo.forward, Some(&map)),
                    warp_volume_composed(&subject.guidance, &a.diffeo.forward, Some(&map)),
                    weights,
                )
                .expect("warped channels share the template grid")
            })
            .collect();
        let mut averaged = initialize_templates(&warped)?;
        averaged.generation = template.generation;

        // step (4): mean transforms, applied negated to the template
        let mean_affine =
            average_affine_transforms(&aligned.iter().map(|a| a.affine.clone()).collect::<Vec<_>>())?;
        let forwards: Vec<Field3<f32>> =
            aligned.iter().map(|a| a.diffeo.forward.clone()).collect();
        let mean_field = average_displacement_fields(&forwards)?;

        let foreground: Vec<bool> = template
            .guidance_template
            .data()
            .iter()
            .map(|&v| v >= 0.25)
            .collect();
        trace.push(IterationRecord {
            iteration,
            mean_metric: aligned.iter().map(|a| a.final_metric).sum::<f64>()
                / aligned.len() as f64,
            mean_field_norm_vox: mean_field.mean_voxel_norm(Some(&foreground)),
        });

        template = apply_shape_update(&averaged, &mean_affine, &mean_field, run.shape_update_step)?;
        subjects = aligned;
    }

    Ok(AtlasResult {
        template,
        subjects,
        trace,
    })
}

/// Resample a subject's channels onto a common grid.
pub fn resample_channels_to_grid(
    channels: &ChannelPair<f32>,
    target: &Geometry,
) -> Result<ChannelPair<f32>> {
    ChannelPair::new(
        resample_to_geometry(&channels.intensity, target),
        resample_to_geometry(&channels.guidance, target),
        channels.weights,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Point3, Vector3};

    fn geom() -> Geometry {
        Geometry::new([12, 10, 8], [0.5; 3], [1.0, -2.0, 0.0]).unwrap()
    }

    fn ramp(scale: f32) -> VolumeGrid {
        Grid3::from_fn(geom(), |p| (p[0] + 2 * p[1] + 3 * p[2]) as f32 * scale / 50.0)
    }

    fn pair(scale: f32) -> ChannelPair<f32> {
        ChannelPair::new(ramp(scale), ramp(scale * 0.5), (0.5, 0.5)).unwrap()
    }

    #[test]
    fn identical_cohort_template_equals_subject() {
        let t = initialize_templates(&[pair(1.0), pair(1.0), pair(1.0)]).unwrap();
        assert_eq!(t.intensity_template.data(), ramp(1.0).data());
        assert_eq!(t.generation, 0);
    }

    #[test]
    fn two_subject_template_is_elementwise_mean() {
        let t = initialize_templates(&[pair(1.0), pair(3.0)]).unwrap();
        for (got, (a, b)) in t
            .intensity_template
            .data()
            .iter()
            .zip(ramp(1.0).data().iter().zip(ramp(3.0).data()))
        {
            assert!((got - (a + b) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn random_cohort_template_matches_accumulation_oracle() {
        let subjects = [pair(1.0), pair(2.0), pair(5.0), pair(0.25)];
        let t = initialize_templates(&subjects).unwrap();
        let n = subjects.len() as f64;
        for i in 0..t.guidance_template.data().len() {
            let expect: f64 = subjects
                .iter()
                .map(|s| s.guidance.data()[i] as f64)
                .sum::<f64>()
                / n;
            assert!((t.guidance_template.data()[i] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_update_with_identity_inputs_only_bumps_generation() {
        let template = initialize_templates(&[pair(1.0), pair(1.0)]).unwrap();
        let zero = Field3::<f32>::zeros(geom());
        let id = AffineTransform::identity();
        let updated = apply_shape_update(&template, &id, &zero, 0.25).unwrap();
        assert_eq!(updated.generation, 1);
        assert_eq!(
            updated.intensity_template.data(),
            template.intensity_template.data()
        );
    }

    #[test]
    fn shape_update_constant_field_matches_warp_oracle() {
        let template = initialize_templates(&[pair(1.0), pair(2.0)]).unwrap();
        let c = [0.5f64, -0.25, 0.75];
        let field = Field3::<f32>::from_fn(geom(), |_| [c[0] as f32, c[1] as f32, c[2] as f32]);
        let updated =
            apply_shape_update(&template, &AffineTransform::identity(), &field, 1.0).unwrap();
        // oracle: plain warp by the negated constant field
        let expected = crate::field::warp_volume(&template.intensity_template, &field.scaled(-1.0));
        assert_eq!(updated.intensity_template.data(), expected.data());
    }

    #[test]
    fn repeated_quarter_steps_accumulate_the_full_translation() {
        // a bright blob template; four updates of step 0.25 against a
        // constant mean field c shift the sampling map by ~(-c), i.e. the
        // blob content moves by ~+c
        let g = Geometry::new([24, 24, 24], [1.0; 3], [0.0; 3]).unwrap();
        let blob = |c: [f64; 3]| -> VolumeGrid {
            Grid3::from_fn(g.clone(), |p| {
                let d = [(p[0] as f64) - c[0], (p[1] as f64) - c[1], (p[2] as f64) - c[2]];
                (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / 18.0).exp() as f32
            })
        };
        let mut template = TemplatePair {
            intensity_template: blob([12.0, 12.0, 12.0]),
            guidance_template: blob([12.0, 12.0, 12.0]),
            generation: 0,
        };
        let c = [3.0f64, 0.0, 0.0];
        let field = Field3::<f32>::from_fn(g.clone(), |_| [c[0] as f32, c[1] as f32, c[2] as f32]);
        for _ in 0..4 {
            template =
                apply_shape_update(&template, &AffineTransform::identity(), &field, 0.25).unwrap();
        }
        // centroid oracle: intensity-weighted centre should sit at start + c
        let mut acc = [0.0f64; 3];
        let mut total = 0.0f64;
        for (idx, p) in g.iter_indices().enumerate() {
            let w = template.intensity_template.data()[idx] as f64;
            let pos = g.position(p);
            for d in 0..3 {
                acc[d] += w * pos[d];
            }
            total += w;
        }
        let centroid = [acc[0] / total, acc[1] / total, acc[2] / total];
        assert!(
            (centroid[0] - 15.0).abs() < 0.15,
            "centroid x {} (expected 15)",
            centroid[0]
        );
        assert!((centroid[1] - 12.0).abs() < 0.15);
        assert!((centroid[2] - 12.0).abs() < 0.15);
        assert_eq!(template.generation, 4);
    }

    #[test]
    fn shape_update_then_inverse_returns_template() {
        let template = initialize_templates(&[pair(1.0), pair(2.0)]).unwrap();
        let affine = AffineTransform {
            linear: Matrix3::identity() * 1.05,
            translation: Vector3::new(0.4, -0.2, 0.1),
            center: Point3::new(3.0, 0.0, 2.0),
        };
        let zero = Field3::<f32>::zeros(geom());
        let updated = apply_shape_update(&template, &affine, &zero, 1.0).unwrap();
        // the update samples through M⁻¹; resampling through M undoes it
        // (within interpolation)
        let back = crate::field::resample_volume_linear(
            &updated.intensity_template,
            &affine.to_map(),
            &geom(),
        );
        // compare in the interior (boundary voxels sample outside)
        let g = geom();
        let mut total = 0.0;
        let mut count = 0usize;
        for p in g.iter_indices() {
            if (2..10).contains(&p[0]) && (2..8).contains(&p[1]) && (2..6).contains(&p[2]) {
                let a = back.at(p[0], p[1], p[2]);
                let b = template.intensity_template.at(p[0], p[1], p[2]);
                total += (a - b).abs() as f64;
                count += 1;
            }
        }
        let range = 50.0 / 50.0; // data spans about [0, 1]
        assert!(total / count as f64 / range < 1e-2);
    }

    #[test]
    fn common_grid_covers_union_of_bounds() {
        let a = Geometry::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let b = Geometry::new([10, 10, 10], [1.0; 3], [5.0, -3.0, 2.0]).unwrap();
        let c = common_grid(&[&a, &b], [0.5; 3]).unwrap();
        assert_eq!(c.origin, [0.0, -3.0, 0.0]);
        assert_eq!(c.dims, [29, 25, 23]);
    }

    #[test]
    fn atlas_run_rejects_single_subject() {
        let run = AtlasRun {
            cohort: vec![pair(1.0)],
            schedule: RegistrationSchedule::default(),
            outer_iterations: 10,
            shape_update_step: 0.25,
        };
        assert!(run.validate().is_err());
    }
}
