//! Two-stage ensembling of predictions from several models.
//!
//! Each model's predictions are suppressed on their own first. The
//! survivors of all models are concatenated and grouped: within one image
//! and category, the highest-scoring unclaimed prediction seeds a group and
//! claims every unclaimed prediction overlapping it by at least the IoU
//! threshold. Each group is replaced by one representative carrying the
//! seed's box and score. When members carry masks, the representative mask
//! is the per-pixel average of member masks weighted by
//! `score * IoU(member box, seed box)`, binarized at 0.5.
//!
//! Strata (image, category) are independent and processed in parallel; the
//! output does not depend on the number of threads.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, RunEncoder};
use crate::io::Prediction;

/// Threshold applied to the weighted mask average.
pub const MASK_FUSION_THRESHOLD: f64 = 0.5;

/// Prediction indices grouped by (image, category) in lexicographic order,
/// each group in input order.
fn strata(preds: &[Prediction]) -> Vec<Vec<usize>> {
    let mut map: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        map.entry((p.image_id.as_str(), p.category_id.as_str()))
            .or_default()
            .push(i);
    }
    map.into_values().collect()
}

/// Stable sort of indices by descending score.
fn by_descending_score(preds: &[Prediction], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
}

/// Orders by image, then category, then descending score; stable.
pub fn sort_predictions(preds: &mut [Prediction]) {
    preds.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then_with(|| a.category_id.cmp(&b.category_id))
            .then_with(|| b.score.total_cmp(&a.score))
    });
}

/// Greedy class-wise non-maximum suppression.
///
/// Within each (image, category), predictions are visited by descending
/// score (ties in input order) and kept iff their IoU with every kept
/// prediction is below `iou_threshold`. The output is sorted by image,
/// category and descending score.
pub fn nms(preds: &[Prediction], iou_threshold: f64) -> Vec<Prediction> {
    let kept: Vec<Vec<usize>> = strata(preds)
        .into_par_iter()
        .map(|mut idx| {
            by_descending_score(preds, &mut idx);
            let mut keep: Vec<usize> = Vec::new();
            for i in idx {
                let b = &preds[i].bbox;
                if keep.iter().all(|&k| preds[k].bbox.iou(b) < iou_threshold) {
                    keep.push(i);
                }
            }
            keep
        })
        .collect();
    kept.into_iter()
        .flatten()
        .map(|i| preds[i].clone())
        .collect()
}

/// Predictions of one image and category grouped around a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGroup {
    pub members: Vec<Prediction>,
    pub seed_index: usize,
}

impl PredictionGroup {
    /// The seed is the first member with the maximal score.
    pub fn new(members: Vec<Prediction>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Validation("prediction group cannot be empty".into()))?;
        if members
            .iter()
            .any(|m| m.image_id != first.image_id || m.category_id != first.category_id)
        {
            return Err(Error::Validation(
                "group members must share image and category".into(),
            ));
        }
        let mut seed_index = 0;
        for (i, m) in members.iter().enumerate() {
            if m.score.total_cmp(&members[seed_index].score) == Ordering::Greater {
                seed_index = i;
            }
        }
        Ok(Self {
            members,
            seed_index,
        })
    }

    pub fn seed(&self) -> &Prediction {
        &self.members[self.seed_index]
    }
}

/// Greedy, non-transitive grouping of concatenated predictions. Groups are
/// disjoint and cover the input; members are listed seed first, then by
/// descending score.
pub fn group_predictions(preds: &[Prediction], iou_threshold: f64) -> Vec<PredictionGroup> {
    let groups: Vec<Vec<Vec<usize>>> = strata(preds)
        .into_par_iter()
        .map(|mut idx| {
            by_descending_score(preds, &mut idx);
            let mut claimed = vec![false; idx.len()];
            let mut groups = Vec::new();
            for s in 0..idx.len() {
                if claimed[s] {
                    continue;
                }
                claimed[s] = true;
                let seed = &preds[idx[s]].bbox;
                let mut members = vec![idx[s]];
                for o in s + 1..idx.len() {
                    if !claimed[o] && preds[idx[o]].bbox.iou(seed) >= iou_threshold {
                        claimed[o] = true;
                        members.push(idx[o]);
                    }
                }
                groups.push(members);
            }
            groups
        })
        .collect();
    groups
        .into_iter()
        .flatten()
        .map(|members| PredictionGroup {
            members: members.into_iter().map(|i| preds[i].clone()).collect(),
            seed_index: 0,
        })
        .collect()
}

/// Representative of a group: the seed's box and score, plus the fused
/// mask when members carry masks.
pub fn fuse_group(group: &PredictionGroup) -> Result<Prediction> {
    let seed = group.seed();
    if group.members.len() == 1 {
        return Ok(seed.clone());
    }
    let with_mask = group.members.iter().filter(|m| m.mask.is_some()).count();
    if with_mask == 0 {
        return Ok(seed.clone());
    }
    if with_mask != group.members.len() {
        return Err(Error::Validation(format!(
            "group on image {} category {} mixes masked and box-only predictions",
            seed.image_id, seed.category_id
        )));
    }
    let masks: Vec<&BinaryMask> = group
        .members
        .iter()
        .map(|m| m.mask.as_ref().expect("checked above"))
        .collect();
    let seed_mask = masks[group.seed_index];
    if let Some(m) = masks.iter().find(|m| !m.same_shape(seed_mask)) {
        return Err(Error::InvalidMask(format!(
            "group on image {} mixes mask sizes {}x{} and {}x{}",
            seed.image_id,
            seed_mask.width(),
            seed_mask.height(),
            m.width(),
            m.height()
        )));
    }
    let weights = mask_weights(group);
    let mut out = seed.clone();
    out.mask = Some(
        weighted_mask_average(&masks, &weights, MASK_FUSION_THRESHOLD).unwrap_or_else(
            // All weights zero, e.g. a degenerate seed box: keep the seed's mask.
            || seed_mask.clone(),
        ),
    );
    Ok(out)
}

/// `score_j * IoU(box_j, seed box)` for every member.
pub fn mask_weights(group: &PredictionGroup) -> Vec<f64> {
    let seed_box = group.seed().bbox;
    group
        .members
        .iter()
        .map(|m| m.score * m.bbox.iou(&seed_box))
        .collect()
}

/// Binarized weighted average of same-shaped masks, computed on run
/// boundaries. The per-pixel sum adds active weights in member order, which
/// is the same sum a dense per-pixel loop would form. `None` when the weights
/// sum to zero.
pub fn weighted_mask_average(
    masks: &[&BinaryMask],
    weights: &[f64],
    threshold: f64,
) -> Option<BinaryMask> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || masks.is_empty() {
        return None;
    }
    let first = masks[0];
    let n = first.pixel_count();
    let intervals: Vec<Vec<(u64, u64)>> =
        masks.iter().map(|m| m.set_intervals().collect()).collect();

    let mut bounds: Vec<u64> = intervals
        .iter()
        .flatten()
        .flat_map(|&(s, e)| [s, e])
        .chain([0, n])
        .collect();
    bounds.sort_unstable();
    bounds.dedup();

    let mut cursors = vec![0usize; masks.len()];
    let mut enc = RunEncoder::new();
    for w in bounds.windows(2) {
        let (start, end) = (w[0], w[1]);
        let mut acc = 0.0;
        for (j, ivs) in intervals.iter().enumerate() {
            while cursors[j] < ivs.len() && ivs[cursors[j]].1 <= start {
                cursors[j] += 1;
            }
            if cursors[j] < ivs.len() && ivs[cursors[j]].0 <= start {
                acc += weights[j];
            }
        }
        enc.push_run(acc / total >= threshold, (end - start) as u32);
    }
    Some(
        BinaryMask::new(first.width(), first.height(), enc.finish())
            .expect("runs cover the raster"),
    )
}

/// Suppresses each set, groups the concatenation and emits one
/// representative per group, sorted by image, category and descending score.
/// Set order decides ties.
pub fn ensemble(pred_sets: &[Vec<Prediction>], iou_threshold: f64) -> Result<Vec<Prediction>> {
    if pred_sets.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble needs at least one prediction set".into(),
        ));
    }
    let concatenated: Vec<Prediction> = pred_sets
        .iter()
        .flat_map(|set| nms(set, iou_threshold))
        .collect();
    let groups = group_predictions(&concatenated, iou_threshold);
    let mut fused = groups
        .par_iter()
        .map(fuse_group)
        .collect::<Result<Vec<_>>>()?;
    sort_predictions(&mut fused);
    Ok(fused)
}
