//! RoI pool sampling and partitioning, and the learning-rate schedule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::io::{GroundTruthInstance, Roi, RoiPool};
use crate::labels::best_match;
use crate::rng::{fnv1a, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub n_sample: usize,
    pub fg_fraction: f64,
    pub fg_iou_threshold: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_sample: 512,
            fg_fraction: 0.25,
            fg_iou_threshold: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sample == 0 {
            return Err(Error::InvalidArgument("n_sample must be at least 1".into()));
        }
        if !(self.fg_fraction > 0.0 && self.fg_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fg_fraction {} outside (0, 1)",
                self.fg_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.fg_iou_threshold) {
            return Err(Error::InvalidArgument(format!(
                "fg_iou_threshold {} outside [0, 1]",
                self.fg_iou_threshold
            )));
        }
        Ok(())
    }

    /// Foreground slots, `ceil(fg_fraction * n_sample)`. Products within
    /// 1e-9 of an integer count as that integer so that e.g. 0.1 * 30 is 3.
    pub fn fg_quota(&self) -> usize {
        let q = self.fg_fraction * self.n_sample as f64;
        let r = q.round();
        if (q - r).abs() < 1e-9 {
            r as usize
        } else {
            q.ceil() as usize
        }
    }
}

/// Draws up to `n_sample` distinct RoI indices from one image's pool,
/// stratified into foreground (max IoU with a ground truth at least
/// `fg_iou_threshold`) and background. Returned indices are ascending.
pub fn sample_rois(
    pool: &[Roi],
    gts: &[GroundTruthInstance],
    cfg: &SamplerConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot sample from an empty RoI pool".into(),
        ));
    }
    let (fg, bg): (Vec<usize>, Vec<usize>) = (0..pool.len()).partition(|&i| {
        best_match(&pool[i].bbox, gts.iter().map(|g| &g.bbox))
            .is_some_and(|(_, iou)| iou >= cfg.fg_iou_threshold)
    });

    let total = cfg.n_sample.min(pool.len());
    let mut n_fg = cfg.fg_quota().min(fg.len()).min(total);
    let n_bg = (total - n_fg).min(bg.len());
    n_fg = (total - n_bg).min(fg.len());

    let mut rng = SplitMix64::new(cfg.seed);
    let mut picked = rng.choose_distinct(&fg, n_fg);
    picked.extend(rng.choose_distinct(&bg, n_bg));
    picked.sort_unstable();
    Ok(picked)
}

/// Samples every image of a pool. Each image uses its own generator seeded
/// with `cfg.seed ^ fnv1a(image_id)`, so results do not depend on which
/// other images are present.
pub fn sample_pool(
    pool: &RoiPool,
    gts: &[GroundTruthInstance],
    cfg: &SamplerConfig,
) -> Result<IndexMap<String, Vec<usize>>> {
    let mut by_image: std::collections::HashMap<&str, Vec<GroundTruthInstance>> =
        std::collections::HashMap::new();
    for g in gts {
        by_image
            .entry(g.image_id.as_str())
            .or_default()
            .push(g.clone());
    }
    let mut out = IndexMap::new();
    for (image, rois) in &pool.images {
        let image_cfg = SamplerConfig {
            seed: cfg.seed ^ fnv1a(image.as_bytes()),
            ..*cfg
        };
        let image_gts = by_image
            .get(image.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        out.insert(image.clone(), sample_rois(rois, image_gts, &image_cfg)?);
    }
    Ok(out)
}

/// Round-robin split: item `j` goes to part `j % k`.
pub fn partition_rois<T: Clone>(rois: &[T], k: usize) -> Result<Vec<Vec<T>>> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "partition count must be at least 1".into(),
        ));
    }
    let mut parts = vec![Vec::with_capacity(rois.len() / k + 1); k];
    for (j, r) in rois.iter().enumerate() {
        parts[j % k].push(r.clone());
    }
    Ok(parts)
}

/// Splits every image's RoIs round-robin into `k` disjoint pools. Images
/// with fewer than `k` RoIs are absent from the pools they contribute
/// nothing to.
pub fn partition_pool(pool: &RoiPool, k: usize) -> Result<Vec<RoiPool>> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "partition count must be at least 1".into(),
        ));
    }
    let mut parts = vec![RoiPool::default(); k];
    for (image, rois) in &pool.images {
        for (part, chunk) in parts.iter_mut().zip(partition_rois(rois, k)?) {
            if !chunk.is_empty() {
                part.images.insert(image.clone(), chunk);
            }
        }
    }
    Ok(parts)
}

/// Linear-scaling rule, 0.00125 per image in the batch.
pub fn base_lr(batch_size: usize) -> f64 {
    0.00125 * batch_size as f64
}

/// `eta0 * (cos(progress * pi) + 1) / 2`.
pub fn cosine_lr(progress: f64, eta0: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::InvalidArgument(format!(
            "progress {progress} outside [0, 1]"
        )));
    }
    Ok(eta0 * ((progress * std::f64::consts::PI).cos() + 1.0) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub eta0: f64,
    pub batch_size: usize,
}

impl Schedule {
    pub fn from_batch_size(batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        Ok(Self {
            eta0: base_lr(batch_size),
            batch_size,
        })
    }

    /// Learning rate after `step` of `total_steps`.
    pub fn at_step(&self, step: u64, total_steps: u64) -> Result<f64> {
        if total_steps == 0 || step > total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} outside 0..={total_steps}"
            )));
        }
        cosine_lr(step as f64 / total_steps as f64, self.eta0)
    }
}
