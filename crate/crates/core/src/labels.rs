//! Verification-aware classification targets.
//!
//! Each RoI of an image is matched to a ground-truth box or to background,
//! and every (RoI, category) pair gets a label in {-1, 0, +1}:
//!
//! * a background RoI is negative for every verified category,
//! * a RoI assigned to category `c` is positive for `c` and negative for
//!   every other verified category,
//! * unverified categories are always 0 and contribute nothing to the loss.
//!
//! Verifications are first closed under the category hierarchy: a positive
//! propagates to all ancestors, a negative to all descendants.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::io::{GroundTruthInstance, Hierarchy, Verification, VerificationTable};

/// Closes `table` under `hierarchy`. The result is a fixed point.
pub fn expand_verification(
    table: &VerificationTable,
    hierarchy: &Hierarchy,
) -> Result<VerificationTable> {
    if hierarchy.is_empty() {
        return Ok(table.clone());
    }
    let mut out = VerificationTable::new();
    let mut conflicts = Vec::new();
    for image in table.images() {
        let cats = table.image(image).expect("image listed by the table");
        let mut pos = BTreeSet::new();
        let mut neg = BTreeSet::new();
        for (c, &v) in cats {
            match v {
                Verification::Positive => {
                    pos.insert(c.as_str());
                    pos.extend(hierarchy.ancestors(c));
                }
                Verification::Negative => {
                    neg.insert(c.as_str());
                    neg.extend(hierarchy.descendants(c));
                }
            }
        }
        for c in pos.intersection(&neg) {
            conflicts.push(format!("({image}, {c})"));
        }
        for c in &pos {
            out.insert(image, c, Verification::Positive)?;
        }
        for c in neg.difference(&pos) {
            out.insert(image, c, Verification::Negative)?;
        }
    }
    if !conflicts.is_empty() {
        return Err(Error::Conflict(format!(
            "hierarchy expansion makes {} both positive and negative",
            conflicts.join(", ")
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoiAssignment {
    Background,
    Object { gt_index: usize, iou: f64 },
}

impl RoiAssignment {
    pub fn gt_index(&self) -> Option<usize> {
        match *self {
            RoiAssignment::Background => None,
            RoiAssignment::Object { gt_index, .. } => Some(gt_index),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub rois: Vec<RoiAssignment>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }
}

/// Index and IoU of the best-overlapping box; ties go to the lowest index.
pub(crate) fn best_match<'a>(
    roi: &BBox,
    boxes: impl IntoIterator<Item = &'a BBox>,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, b) in boxes.into_iter().enumerate() {
        let iou = roi.iou(b);
        if best.is_none_or(|(_, m)| iou > m) {
            best = Some((j, iou));
        }
    }
    best
}

/// Assigns each RoI to its maximal-IoU ground truth when that IoU reaches
/// `iou_threshold`.
pub fn assign_rois(rois: &[BBox], gts: &[GroundTruthInstance], iou_threshold: f64) -> Assignment {
    let rois = rois
        .iter()
        .map(|roi| match best_match(roi, gts.iter().map(|g| &g.bbox)) {
            Some((gt_index, iou)) if iou >= iou_threshold => {
                RoiAssignment::Object { gt_index, iou }
            }
            _ => RoiAssignment::Background,
        })
        .collect();
    Assignment { rois }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(i8)]
pub enum Label {
    Negative = -1,
    Ignore = 0,
    Positive = 1,
}

impl Label {
    pub fn as_i8(self) -> i8 {
        self as i8
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            -1 => Some(Label::Negative),
            0 => Some(Label::Ignore),
            1 => Some(Label::Positive),
            _ => None,
        }
    }
}

/// Dense RoI x category label grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    categories: Vec<String>,
    rows: usize,
    labels: Vec<Label>,
}

impl LabelMatrix {
    pub fn new(categories: Vec<String>, rows: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != rows * categories.len() {
            return Err(Error::Validation(format!(
                "label matrix of {rows}x{} needs {} entries, got {}",
                categories.len(),
                rows * categories.len(),
                labels.len()
            )));
        }
        for (i, row) in labels.chunks(categories.len().max(1)).enumerate() {
            if row.iter().filter(|&&l| l == Label::Positive).count() > 1 {
                return Err(Error::Validation(format!(
                    "row {i} has more than one positive"
                )));
            }
        }
        Ok(Self {
            categories,
            rows,
            labels,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.categories.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Label {
        self.labels[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[Label] {
        let c = self.cols();
        &self.labels[row * c..(row + 1) * c]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }
}

/// Builds the label rows for one image.
///
/// `gts` must all belong to `image_id` and each of their categories must be
/// positively verified in `table` (already expanded) and listed in
/// `categories`.
pub fn build_label_matrix(
    assignment: &Assignment,
    gts: &[GroundTruthInstance],
    table: &VerificationTable,
    image_id: &str,
    categories: &[String],
) -> Result<LabelMatrix> {
    let mut col_of = std::collections::HashMap::new();
    for (j, c) in categories.iter().enumerate() {
        if col_of.insert(c.as_str(), j).is_some() {
            return Err(Error::Validation(format!("category {c} listed twice")));
        }
    }
    for g in gts {
        if g.image_id != image_id {
            return Err(Error::Validation(format!(
                "ground truth on image {} passed for image {image_id}",
                g.image_id
            )));
        }
        if table.get(image_id, &g.category_id) != Some(Verification::Positive) {
            return Err(Error::Validation(format!(
                "ground-truth category {} is not positively verified on image {image_id}",
                g.category_id
            )));
        }
        if !col_of.contains_key(g.category_id.as_str()) {
            return Err(Error::Validation(format!(
                "ground-truth category {} missing from the category list",
                g.category_id
            )));
        }
    }

    let base: Vec<Label> = categories
        .iter()
        .map(|c| {
            if table.is_verified(image_id, c) {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();

    let mut labels = Vec::with_capacity(assignment.len() * categories.len());
    for a in &assignment.rois {
        let start = labels.len();
        labels.extend_from_slice(&base);
        if let Some(gi) = a.gt_index() {
            let g = gts.get(gi).ok_or_else(|| {
                Error::Validation(format!(
                    "assignment references ground truth {gi} of {}",
                    gts.len()
                ))
            })?;
            labels[start + col_of[g.category_id.as_str()]] = Label::Positive;
        }
    }
    LabelMatrix::new(categories.to_vec(), assignment.len(), labels)
}

/// Pre-sigmoid scores aligned with a [`LabelMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    rows: usize,
    cols: usize,
    logits: Vec<f64>,
}

impl LogitMatrix {
    pub fn new(rows: usize, cols: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != rows * cols {
            return Err(Error::Validation(format!(
                "logit matrix of {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                logits.len()
            )));
        }
        if let Some(x) = logits.iter().find(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("non-finite logit {x}")));
        }
        Ok(Self { rows, cols, logits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sum of per-entry sigmoid cross-entropy with 0 as the ignore label:
/// `-ln σ(x)` for positives, `-ln(1 - σ(x))` for negatives.
pub fn classification_loss(logits: &LogitMatrix, labels: &LabelMatrix) -> Result<f64> {
    if logits.rows() != labels.rows() || logits.cols() != labels.cols() {
        return Err(Error::Validation(format!(
            "logits are {}x{} but labels are {}x{}",
            logits.rows(),
            logits.cols(),
            labels.rows(),
            labels.cols()
        )));
    }
    let mut total = 0.0;
    for (&x, &l) in logits.logits().iter().zip(labels.labels()) {
        if !x.is_finite() {
            return Err(Error::Validation(format!("non-finite logit {x}")));
        }
        total += match l {
            Label::Positive => softplus(-x),
            Label::Negative => softplus(x),
            Label::Ignore => 0.0,
        };
    }
    Ok(total)
}
