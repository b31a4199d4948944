//! Atlas-based tooth labeling and its Dice evaluation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::register::{ChannelPair, RegistrationSchedule};
use crate::volgrid::{Grid3, LabelGrid};

use super::build::register_subject_to_template;

/// One subject tooth (connected component) and the label it received.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ToothAssignment {
    pub component: usize,
    pub voxels: usize,
    /// Warped-atlas label with the highest Dice; 0 when nothing overlapped.
    pub assigned_label: u16,
    pub best_dice: f64,
    /// Majority ground-truth label of the component (0 when unknown).
    pub truth_label: u16,
    pub success: bool,
}

/// Labeling outcome for one subject.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LabelTransferResult {
    pub assignments: Vec<ToothAssignment>,
    /// successes / teeth for this subject.
    pub success_rate: f64,
}

impl LabelTransferResult {
    pub fn successes(&self) -> usize {
        self.assignments.iter().filter(|a| a.success).count()
    }
}

/// Mean success rate over subjects: total successes / total teeth.
pub fn labeling_success_rate(results: &[LabelTransferResult]) -> f64 {
    let total: usize = results.iter().map(|r| r.assignments.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = results.iter().map(|r| r.successes()).sum();
    hits as f64 / total as f64
}

/// 6-connected components of the nonzero voxels, in deterministic scan
/// order. Returns per-component voxel index lists.
pub fn connected_components(labels: &LabelGrid) -> Vec<Vec<usize>> {
    let geom = labels.geometry();
    let [nx, ny, nz] = geom.dims;
    let mut component = vec![u32::MAX; geom.voxel_count()];
    let mut out = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let seed = geom.linear_index(i, j, k);
                if labels.data()[seed] == 0 || component[seed] != u32::MAX {
                    continue;
                }
                let id = out.len() as u32;
                let mut voxels = Vec::new();
                component[seed] = id;
                queue.push_back([i, j, k]);
                while let Some(p) = queue.pop_front() {
                    let idx = geom.linear_index(p[0], p[1], p[2]);
                    voxels.push(idx);
                    for d in 0..3usize {
                        for step in [-1i64, 1] {
                            let mut q = [p[0] as i64, p[1] as i64, p[2] as i64];
                            q[d] += step;
                            if q[d] < 0 || q[d] >= geom.dims[d] as i64 {
                                continue;
                            }
                            let qi =
                                geom.linear_index(q[0] as usize, q[1] as usize, q[2] as usize);
                            if labels.data()[qi] != 0 && component[qi] == u32::MAX {
                                component[qi] = id;
                                queue.push_back([q[0] as usize, q[1] as usize, q[2] as usize]);
                            }
                        }
                    }
                }
                voxels.sort_unstable();
                out.push(voxels);
            }
        }
    }
    out
}

/// Register the atlas onto the subject, warp the atlas label map with
/// nearest-neighbour sampling, and give every subject tooth component the
/// warped label of highest Dice. Ground-truth identities are *not* used for
/// assignment, only to score success.
pub fn atlas_label_transfer(
    atlas_labels: &LabelGrid,
    atlas_channels: &ChannelPair<f32>,
    subject_labels: &LabelGrid,
    subject_channels: &ChannelPair<f32>,
    schedule: &RegistrationSchedule,
) -> Result<LabelTransferResult> {
    subject_labels
        .geometry()
        .check_same(subject_channels.intensity.geometry(), "atlas_label_transfer")?;
    // atlas (moving) onto subject (fixed)
    let alignment = register_subject_to_template(subject_channels, atlas_channels, schedule)?;
    let warped_atlas = crate::field::warp_labels_composed(
        atlas_labels,
        &alignment.diffeo.forward,
        Some(&alignment.affine.to_map()),
    );

    score_against_warped_atlas(&warped_atlas, subject_labels)
}

/// Dice-maximizing assignment of warped atlas labels to subject components;
/// separated from the registration so tests can exercise it directly.
pub fn score_against_warped_atlas(
    warped_atlas: &LabelGrid,
    subject_labels: &LabelGrid,
) -> Result<LabelTransferResult> {
    warped_atlas
        .geometry()
        .check_same(subject_labels.geometry(), "score_against_warped_atlas")?;
    let components = connected_components(subject_labels);
    if components.is_empty() {
        return Err(Error::EmptyForeground);
    }

    // per-label voxel counts of the warped atlas
    let mut atlas_counts: BTreeMap<u16, usize> = BTreeMap::new();
    for &l in warped_atlas.data() {
        if l != 0 {
            *atlas_counts.entry(l).or_insert(0) += 1;
        }
    }

    let mut assignments = Vec::with_capacity(components.len());
    for (ci, voxels) in components.iter().enumerate() {
        let mut overlap: BTreeMap<u16, usize> = BTreeMap::new();
        let mut truth_votes: BTreeMap<u16, usize> = BTreeMap::new();
        for &idx in voxels {
            let wl = warped_atlas.data()[idx];
            if wl != 0 {
                *overlap.entry(wl).or_insert(0) += 1;
            }
            let tl = subject_labels.data()[idx];
            if tl != 0 {
                *truth_votes.entry(tl).or_insert(0) += 1;
            }
        }
        let truth_label = truth_votes
            .iter()
            .max_by_key(|(label, count)| (**count, std::cmp::Reverse(**label)))
            .map(|(l, _)| *l)
            .unwrap_or(0);
        // Dice per candidate label, exact integer counts
        let mut best: (u16, f64) = (0, 0.0);
        for (&label, &inter) in &overlap {
            let dice = 2.0 * inter as f64 / (voxels.len() + atlas_counts[&label]) as f64;
            if dice > best.1 || (dice == best.1 && best.0 == 0) {
                best = (label, dice);
            }
        }
        let success = best.0 != 0 && best.0 == truth_label;
        assignments.push(ToothAssignment {
            component: ci,
            voxels: voxels.len(),
            assigned_label: best.0,
            best_dice: best.1,
            truth_label,
            success,
        });
    }
    let success_rate =
        assignments.iter().filter(|a| a.success).count() as f64 / assignments.len() as f64;
    Ok(LabelTransferResult {
        assignments,
        success_rate,
    })
}

/// Hard atlas labels from the cohort: subject label maps are warped into
/// template space (nearest neighbour) and majority-voted per voxel, masked
/// to where the averaged guidance channel is at least `guidance_threshold`
/// (half the smallest tooth intensity by default).
pub fn vote_atlas_labels(
    warped_subject_labels: &[LabelGrid],
    guidance_template: &crate::VolumeGrid,
    guidance_threshold: f32,
) -> Result<LabelGrid> {
    let geom = guidance_template.geometry().clone();
    for l in warped_subject_labels {
        geom.check_same(l.geometry(), "vote_atlas_labels")?;
    }
    if warped_subject_labels.is_empty() {
        return Err(Error::InvalidArgument("no label maps to vote over".into()));
    }
    let mut data = vec![0u16; geom.voxel_count()];
    for (idx, out) in data.iter_mut().enumerate() {
        if guidance_template.data()[idx] < guidance_threshold {
            continue;
        }
        let mut votes: BTreeMap<u16, usize> = BTreeMap::new();
        for l in warped_subject_labels {
            *votes.entry(l.data()[idx]).or_insert(0) += 1;
        }
        // most frequent label; ties resolved toward the smaller code;
        // background winning leaves the voxel unlabeled
        let winner = votes
            .iter()
            .max_by_key(|(label, count)| (**count, std::cmp::Reverse(**label)))
            .map(|(l, _)| *l)
            .unwrap_or(0);
        *out = winner;
    }
    Grid3::new(geom, data)
}
