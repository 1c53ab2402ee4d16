//! Federated mean average precision.
//!
//! A prediction on an image where its category is unverified cannot be
//! judged and is ignored. On verified images predictions are matched
//! greedily in score order against ground truth of the same image and
//! category. AP is the all-point interpolated area under the
//! precision-recall curve; mAP averages categories that have ground truth.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{GroundTruthInstance, Hierarchy, Prediction, Verification, VerificationTable};
use crate::labels::expand_verification;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    #[default]
    Box,
    Mask,
}

impl EvalMode {
    fn overlap(self, p: &Prediction, g: &GroundTruthInstance) -> Result<f64> {
        match self {
            EvalMode::Box => Ok(p.bbox.iou(&g.bbox)),
            EvalMode::Mask => match (&p.mask, &g.mask) {
                (Some(a), Some(b)) => a.iou(b),
                _ => Err(Error::Validation(
                    "mask evaluation needs masks on every record".into(),
                )),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive { gt: usize },
    FalsePositive,
    Ignored,
}

/// Outcomes in descending score order (ties in input order).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Input index of each visited prediction.
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub outcomes: Vec<MatchOutcome>,
}

impl MatchResult {
    pub fn ignored_count(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| **o == MatchOutcome::Ignored)
            .count()
    }
}

fn check_threshold(iou_threshold: f64) -> Result<()> {
    if iou_threshold > 0.0 && iou_threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "IoU threshold {iou_threshold} outside (0, 1]"
        )))
    }
}

/// Matches one category's predictions against its ground truth.
///
/// `v` should already be expanded over the hierarchy. Each prediction on a
/// verified image takes the unmatched ground truth of the same image with
/// the largest overlap (ties to the lowest index) when that overlap reaches
/// `iou_threshold`.
pub fn match_category<P, G>(
    preds: &[P],
    gts: &[G],
    v: &VerificationTable,
    iou_threshold: f64,
    mode: EvalMode,
) -> Result<MatchResult>
where
    P: Borrow<Prediction>,
    G: Borrow<GroundTruthInstance>,
{
    check_threshold(iou_threshold)?;
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_image
            .entry(g.borrow().image_id.as_str())
            .or_default()
            .push(j);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].borrow().score.total_cmp(&preds[a].borrow().score));

    let mut matched = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(order.len());
    for &i in &order {
        let p = preds[i].borrow();
        if !v.is_verified(&p.image_id, &p.category_id) {
            outcomes.push(MatchOutcome::Ignored);
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &j in by_image.get(p.image_id.as_str()).into_iter().flatten() {
            if matched[j] {
                continue;
            }
            let iou = mode.overlap(p, gts[j].borrow())?;
            if best.is_none_or(|(_, m)| iou > m) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= iou_threshold => {
                matched[j] = true;
                outcomes.push(MatchOutcome::TruePositive { gt: j });
            }
            _ => outcomes.push(MatchOutcome::FalsePositive),
        }
    }
    let scores = order.iter().map(|&i| preds[i].borrow().score).collect();
    Ok(MatchResult {
        order,
        scores,
        outcomes,
    })
}

/// All-point interpolated AP with precision made non-increasing from the
/// right. Ignored predictions are skipped.
pub fn average_precision(m: &MatchResult, gt_count: usize) -> Result<f64> {
    if gt_count == 0 {
        return Err(Error::InvalidArgument(
            "AP is undefined without ground truth".into(),
        ));
    }
    let mut precision = Vec::new();
    let mut is_tp = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for o in &m.outcomes {
        let hit = match o {
            MatchOutcome::Ignored => continue,
            MatchOutcome::TruePositive { .. } => true,
            MatchOutcome::FalsePositive => false,
        };
        seen += 1;
        tp += usize::from(hit);
        precision.push(tp as f64 / seen as f64);
        is_tp.push(hit);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let step = 1.0 / gt_count as f64;
    let ap: f64 = precision
        .iter()
        .zip(&is_tp)
        .filter(|(_, &hit)| hit)
        .map(|(p, _)| p * step)
        .sum();
    Ok(ap.min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryEval {
    pub category: String,
    /// `None` when the category has no ground truth.
    pub ap: Option<f64>,
    pub gt_count: usize,
    pub pred_count: usize,
    pub ignored_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Every category with a prediction or a ground truth, in id order.
    pub categories: Vec<CategoryEval>,
    /// Mean AP over categories with ground truth; 0 when there are none.
    pub map: f64,
}

impl EvalReport {
    pub fn get(&self, category: &str) -> Option<&CategoryEval> {
        self.categories.iter().find(|c| c.category == category)
    }
}

/// Evaluates predictions per category after closing `v` over `hierarchy`.
///
/// Every ground-truth instance must be positively verified for its image
/// and category. Categories run in parallel; the report does not depend on
/// the thread count.
pub fn evaluate(
    preds: &[Prediction],
    gts: &[GroundTruthInstance],
    v: &VerificationTable,
    hierarchy: &Hierarchy,
    iou_threshold: f64,
    mode: EvalMode,
) -> Result<EvalReport> {
    check_threshold(iou_threshold)?;
    let v = expand_verification(v, hierarchy)?;
    for g in gts {
        if v.get(&g.image_id, &g.category_id) != Some(Verification::Positive) {
            return Err(Error::Validation(format!(
                "ground truth of {} on {} is not positively verified",
                g.category_id, g.image_id
            )));
        }
    }
    if mode == EvalMode::Mask {
        if let Some(p) = preds.iter().find(|p| p.mask.is_none()) {
            return Err(Error::Validation(format!(
                "prediction for {} on {} has no mask",
                p.category_id, p.image_id
            )));
        }
        if let Some(g) = gts.iter().find(|g| g.mask.is_none()) {
            return Err(Error::Validation(format!(
                "ground truth of {} on {} has no mask",
                g.category_id, g.image_id
            )));
        }
    }

    type Bucket<'a> = (Vec<&'a Prediction>, Vec<&'a GroundTruthInstance>);
    let mut buckets: BTreeMap<&str, Bucket> = BTreeMap::new();
    for p in preds {
        buckets.entry(p.category_id.as_str()).or_default().0.push(p);
    }
    for g in gts {
        buckets.entry(g.category_id.as_str()).or_default().1.push(g);
    }
    let buckets: Vec<(&str, Bucket)> = buckets.into_iter().collect();
    let categories = buckets
        .par_iter()
        .map(|(cat, (ps, gs))| {
            let m = match_category(ps, gs, &v, iou_threshold, mode)?;
            let ap = if gs.is_empty() {
                None
            } else {
                Some(average_precision(&m, gs.len())?)
            };
            Ok(CategoryEval {
                category: (*cat).to_owned(),
                ap,
                gt_count: gs.len(),
                pred_count: ps.len(),
                ignored_count: m.ignored_count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let aps: Vec<f64> = categories.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(EvalReport { categories, map })
}
