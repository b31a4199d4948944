//! Segmentation-guided enhancement: crop, mask with dilated labels, and
//! intensity reassignment of the label channel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{
    bounding_box_of_labels, crop_with_margin, dilate_labels, mask_by_labels,
    reassign_label_intensities, Grid3, LabelGrid, VolumeGrid,
};

/// FDI codes of the 28 teeth handled by the pipeline (third molars x8 are
/// excluded). Quadrants 1/2 are the upper arch, 3/4 the lower arch.
pub const FDI_LABELS: [u16; 28] = [
    11, 12, 13, 14, 15, 16, 17, //
    21, 22, 23, 24, 25, 26, 27, //
    31, 32, 33, 34, 35, 36, 37, //
    41, 42, 43, 44, 45, 46, 47,
];

/// Upper arch traversed mesially: 17..11 then 21..27.
pub const UPPER_ARCH_ORDER: [u16; 14] = [17, 16, 15, 14, 13, 12, 11, 21, 22, 23, 24, 25, 26, 27];

/// Lower arch traversed mesially: 47..41 then 31..37.
pub const LOWER_ARCH_ORDER: [u16; 14] = [47, 46, 45, 44, 43, 42, 41, 31, 32, 33, 34, 35, 36, 37];

pub fn is_fdi_tooth_label(label: u16) -> bool {
    FDI_LABELS.contains(&label)
}

/// Pairs of anatomically adjacent teeth within the same arch (13 per arch).
pub fn arch_adjacent_pairs() -> Vec<(u16, u16)> {
    let mut pairs = Vec::with_capacity(26);
    for arch in [&UPPER_ARCH_ORDER, &LOWER_ARCH_ORDER] {
        for w in arch.windows(2) {
            pairs.push((w[0], w[1]));
        }
    }
    pairs
}

/// Parameters of the enhancement stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancementConfig {
    /// Crop margin around the teeth bounding box, in voxels.
    pub margin_voxels: usize,
    /// Radius of the Euclidean ball used to dilate the teeth mask, in voxels.
    pub dilation_radius_voxels: usize,
    /// FDI label -> intensity in [0, 1] for the guidance channel.
    pub reassignment_table: BTreeMap<u16, f64>,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        EnhancementConfig {
            margin_voxels: 30,
            dilation_radius_voxels: 15,
            reassignment_table: default_reassignment_table(),
        }
    }
}

impl EnhancementConfig {
    /// Check the contrast guarantee: adjacent same-arch teeth differ by at
    /// least 0.4, every tooth is mapped into [0, 1], and no entry maps to 0
    /// (0 is reserved for background).
    pub fn validate(&self) -> Result<()> {
        for &label in FDI_LABELS.iter() {
            match self.reassignment_table.get(&label) {
                None => return Err(Error::MissingLabel(label)),
                Some(&v) if !(0.0..=1.0).contains(&v) || v == 0.0 => {
                    return Err(Error::Config(format!(
                        "reassignment for tooth {label} must lie in (0, 1], got {v}"
                    )))
                }
                _ => {}
            }
        }
        for (a, b) in arch_adjacent_pairs() {
            let va = self.reassignment_table[&a];
            let vb = self.reassignment_table[&b];
            if (va - vb).abs() < 0.4 {
                return Err(Error::Config(format!(
                    "adjacent teeth {a} and {b} have contrast {:.3} < 0.4",
                    (va - vb).abs()
                )));
            }
        }
        Ok(())
    }
}

/// Alternating 1.0 / 0.5 assignment along each arch, background 0. Gives
/// contrast 0.5 between every pair of arch-adjacent teeth.
pub fn default_reassignment_table() -> BTreeMap<u16, f64> {
    let mut table = BTreeMap::new();
    for arch in [&UPPER_ARCH_ORDER, &LOWER_ARCH_ORDER] {
        for (pos, &label) in arch.iter().enumerate() {
            table.insert(label, if pos % 2 == 0 { 1.0 } else { 0.5 });
        }
    }
    table
}

/// Output of the enhancement stage: the registration channels plus the
/// cropped grids they were derived from.
#[derive(Debug, Clone)]
pub struct EnhancedSubject {
    /// Cropped intensity volume (before masking).
    pub cropped: VolumeGrid,
    /// Cropped intensity volume masked by the dilated teeth region.
    pub masked: VolumeGrid,
    /// Label channel with reassigned intensities.
    pub reassigned: VolumeGrid,
    /// Cropped label grid.
    pub labels: LabelGrid,
    /// Binary dilated teeth mask on the cropped grid.
    pub mask: LabelGrid,
}

/// Run crop -> dilate -> mask -> reassign on one subject.
///
/// Deterministic: identical inputs give bitwise-identical outputs.
pub fn enhance_subject(
    volume: &VolumeGrid,
    labels: &LabelGrid,
    cfg: &EnhancementConfig,
) -> Result<EnhancedSubject> {
    volume
        .geometry()
        .check_same(labels.geometry(), "enhance_subject")?;
    for &label in labels.data() {
        if label != 0 && !is_fdi_tooth_label(label) {
            return Err(Error::InvalidArgument(format!(
                "label {label} is not an FDI tooth code"
            )));
        }
    }
    let bounds = bounding_box_of_labels(labels)?;
    let cropped = crop_with_margin(volume, &bounds, cfg.margin_voxels)?;
    let cropped_labels: Grid3<u16> = crop_with_margin(labels, &bounds, cfg.margin_voxels)?;
    let mask = dilate_labels(&cropped_labels, cfg.dilation_radius_voxels);
    let masked = mask_by_labels(&cropped, &mask)?;
    let reassigned = reassign_label_intensities(&cropped_labels, &cfg.reassignment_table)?;
    Ok(EnhancedSubject {
        cropped,
        masked,
        reassigned,
        labels: cropped_labels,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Geometry;

    #[test]
    fn default_table_has_at_least_point_four_contrast_on_all_26_pairs() {
        let table = default_reassignment_table();
        assert_eq!(table.len(), 28);
        let pairs = arch_adjacent_pairs();
        assert_eq!(pairs.len(), 26);
        for (a, b) in pairs {
            let diff = (table[&a] - table[&b]).abs();
            assert!(diff >= 0.4, "teeth {a}/{b}: contrast {diff}");
        }
        EnhancementConfig::default().validate().unwrap();
    }

    #[test]
    fn validate_rejects_low_contrast_table() {
        let mut cfg = EnhancementConfig::default();
        for v in cfg.reassignment_table.values_mut() {
            *v = 0.8;
        }
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn enhancement_is_deterministic_and_consistent() {
        let geom = Geometry::new([24, 24, 24], [1.0; 3], [0.0; 3]).unwrap();
        let labels = Grid3::from_fn(geom.clone(), |p| {
            let dx = p[0] as i64 - 8;
            let dy = p[1] as i64 - 12;
            let dz = p[2] as i64 - 12;
            if dx * dx + dy * dy + dz * dz <= 9 {
                11
            } else {
                let dx = p[0] as i64 - 15;
                if dx * dx + dy * dy + dz * dz <= 9 {
                    12
                } else {
                    0
                }
            }
        });
        let volume = Grid3::from_fn(geom, |p| (p[0] + p[1] + p[2]) as f32 / 66.0);
        let cfg = EnhancementConfig {
            margin_voxels: 4,
            dilation_radius_voxels: 2,
            ..EnhancementConfig::default()
        };
        let a = enhance_subject(&volume, &labels, &cfg).unwrap();
        let b = enhance_subject(&volume, &labels, &cfg).unwrap();
        assert_eq!(a.masked.data(), b.masked.data());
        assert_eq!(a.reassigned.data(), b.reassigned.data());

        // masked voxels vanish exactly where the mask is 0
        for (m, (x, orig)) in a
            .mask
            .data()
            .iter()
            .zip(a.masked.data().iter().zip(a.cropped.data()))
        {
            if *m == 0 {
                assert_eq!(*x, 0.0);
            } else {
                assert_eq!(*x, *orig);
            }
        }
        // reassigned channel carries the two table levels
        let table = &cfg.reassignment_table;
        for (l, r) in a.labels.data().iter().zip(a.reassigned.data()) {
            let expect = if *l == 0 { 0.0 } else { table[l] as f32 };
            assert_eq!(*r, expect);
        }
    }

    #[test]
    fn non_fdi_label_is_rejected() {
        let geom = Geometry::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let labels = Grid3::from_fn(geom.clone(), |p| if p[0] == 1 { 18 } else { 0 });
        let volume = Grid3::filled(geom, 0.5f32);
        assert!(enhance_subject(&volume, &labels, &EnhancementConfig::default()).is_err());
    }
}
