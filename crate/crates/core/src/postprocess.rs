//! Submission filters: small-mask removal and byte-budget trimming.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::io::{prediction_header_len, prediction_row_len, Prediction};

/// Masks smaller than this many pixels are dropped by default.
pub const DEFAULT_MIN_MASK_AREA: u64 = 1600;

/// Default byte budget for a submission file.
pub const DEFAULT_MAX_BYTES: u64 = 5_000_000_000;

/// Removes predictions whose mask covers fewer than `min_area` pixels.
/// Box-only predictions pass through.
pub fn drop_small_masks(preds: &[Prediction], min_area: u64) -> Vec<Prediction> {
    preds
        .iter()
        .filter(|p| p.mask.as_ref().is_none_or(|m| m.area() >= min_area))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrimReport {
    /// Removed predictions per category; every input category is listed.
    pub removed: BTreeMap<String, usize>,
    pub final_bytes: u64,
    pub budget: u64,
}

impl TrimReport {
    pub fn total_removed(&self) -> usize {
        self.removed.values().sum()
    }
}

/// Drops predictions until the serialized file fits in `max_bytes`.
///
/// Each step removes the lowest-scoring prediction (ties: latest in input
/// order) of the category holding the most remaining predictions (ties:
/// smallest category id). Survivors keep their input order.
pub fn trim_to_budget(
    preds: &[Prediction],
    max_bytes: u64,
) -> Result<(Vec<Prediction>, TrimReport)> {
    let header = prediction_header_len();
    if max_bytes < header {
        return Err(Error::InvalidArgument(format!(
            "budget of {max_bytes} bytes is below the {header}-byte header"
        )));
    }
    let row_len: Vec<u64> = preds.iter().map(prediction_row_len).collect();
    let mut size = header + row_len.iter().sum::<u64>();

    // Per category, indices in removal order, consumed from the front.
    let mut queues: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        queues.entry(p.category_id.as_str()).or_default().push(i);
    }
    for idx in queues.values_mut() {
        idx.sort_by(|&a, &b| preds[a].score.total_cmp(&preds[b].score).then(b.cmp(&a)));
    }
    let mut heads: BTreeMap<&str, usize> = queues.keys().map(|&c| (c, 0)).collect();
    // Ordered by (most remaining, smallest id).
    let mut frontier: BTreeSet<(Reverse<usize>, &str)> = queues
        .iter()
        .map(|(&c, idx)| (Reverse(idx.len()), c))
        .collect();

    let mut removed = vec![false; preds.len()];
    while size > max_bytes {
        let (Reverse(remaining), cat) = frontier
            .pop_first()
            .expect("a non-empty file exceeds the budget, so predictions remain");
        let head = heads.get_mut(cat).expect("known category");
        let victim = queues[cat][*head];
        *head += 1;
        removed[victim] = true;
        size -= row_len[victim];
        if remaining > 1 {
            frontier.insert((Reverse(remaining - 1), cat));
        }
    }

    let report = TrimReport {
        removed: heads.iter().map(|(&c, &n)| (c.to_owned(), n)).collect(),
        final_bytes: size,
        budget: max_bytes,
    };
    let kept = preds
        .iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(p, _)| p.clone())
        .collect();
    Ok((kept, report))
}
