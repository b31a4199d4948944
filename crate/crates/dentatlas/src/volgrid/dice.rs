//! Dice similarity coefficient over voxel sets.

use crate::error::{Error, Result};
use crate::num::Element;

use super::grid::Grid3;

/// Dice coefficient `2|A∩B| / (|A| + |B|)` between the nonzero sets of two
/// same-geometry grids. Counting is exact integer arithmetic; only the final
/// ratio is floating point. Both sets empty is an error, not a perfect score.
pub fn dice_coefficient<T: Element>(a: &Grid3<T>, b: &Grid3<T>) -> Result<f64> {
    a.geometry().check_same(b.geometry(), "dice_coefficient")?;
    let zero = T::default();
    let mut na = 0u64;
    let mut nb = 0u64;
    let mut inter = 0u64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let fa = x != zero;
        let fb = y != zero;
        na += fa as u64;
        nb += fb as u64;
        inter += (fa && fb) as u64;
    }
    if na + nb == 0 {
        return Err(Error::DegenerateInput(
            "dice of two empty voxel sets".into(),
        ));
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Dice between `{a == label_a}` and `{b == label_b}`.
pub fn dice_for_labels(
    a: &Grid3<u16>,
    label_a: u16,
    b: &Grid3<u16>,
    label_b: u16,
) -> Result<f64> {
    a.geometry().check_same(b.geometry(), "dice_for_labels")?;
    let mut na = 0u64;
    let mut nb = 0u64;
    let mut inter = 0u64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let fa = x == label_a && label_a != 0;
        let fb = y == label_b && label_b != 0;
        na += fa as u64;
        nb += fb as u64;
        inter += (fa && fb) as u64;
    }
    if na + nb == 0 {
        return Err(Error::DegenerateInput(format!(
            "dice of empty sets (labels {label_a}, {label_b})"
        )));
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}
