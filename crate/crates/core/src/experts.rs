//! Category subsets for expert models.
//!
//! Subsets come either from contiguous windows of the rarity ranking or
//! from clustering category embeddings. An expert is trained on its subset
//! only and its predictions are restricted to it before ensembling.

use std::collections::{BTreeSet, HashSet};

use crate::error::{Error, Result};
use crate::io::{
    CategoryStats, EmbeddingTable, GroundTruthInstance, Prediction, VerificationTable,
};
use crate::rng::SplitMix64;

/// Iteration cap for embedding clustering.
pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Ranks `[start, end)` of the rarity ranking.
    RankSplit {
        start: usize,
        end: usize,
    },
    EmbeddingCluster,
    /// Read back from a group file, origin unknown.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryGroup {
    pub categories: Vec<String>,
    pub provenance: Provenance,
}

impl CategoryGroup {
    pub fn new(categories: Vec<String>, provenance: Provenance) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Validation("category group cannot be empty".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = categories.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::Validation(format!(
                "category {dup} appears twice in a group"
            )));
        }
        Ok(Self {
            categories,
            provenance,
        })
    }

    pub fn contains(&self, category_id: &str) -> bool {
        self.categories.iter().any(|c| c == category_id)
    }

    pub fn set(&self) -> HashSet<&str> {
        self.categories.iter().map(String::as_str).collect()
    }
}

/// Categories from rarest to most common; equal counts in id order.
pub fn rarity_ranking(stats: &CategoryStats) -> Vec<String> {
    let mut ranked: Vec<(&String, u64)> = stats.counts.iter().map(|(c, &n)| (c, n)).collect();
    ranked.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().map(|(c, _)| c.clone()).collect()
}

/// Splits ranks `[start, end)` into `num_experts` contiguous groups whose
/// sizes differ by at most one; the rarest groups get the extra members.
pub fn split_by_rank(
    ranking: &[String],
    start: usize,
    end: usize,
    num_experts: usize,
) -> Result<Vec<CategoryGroup>> {
    if start > end || end > ranking.len() {
        return Err(Error::InvalidArgument(format!(
            "rank window [{start}, {end}) outside 0..={}",
            ranking.len()
        )));
    }
    let width = end - start;
    if num_experts == 0 || num_experts > width {
        return Err(Error::InvalidArgument(format!(
            "cannot split {width} categories among {num_experts} experts"
        )));
    }
    let (base, extra) = (width / num_experts, width % num_experts);
    let mut groups = Vec::with_capacity(num_experts);
    let mut lo = start;
    for i in 0..num_experts {
        let hi = lo + base + usize::from(i < extra);
        groups.push(CategoryGroup::new(
            ranking[lo..hi].to_vec(),
            Provenance::RankSplit { start: lo, end: hi },
        )?);
        lo = hi;
    }
    Ok(groups)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index `i` minimizing `key(i)`, ties to the smallest index.
fn argmin(n: usize, key: impl Fn(usize) -> f64) -> usize {
    (1..n).fold(0, |best, i| if key(i) < key(best) { i } else { best })
}

fn argmax(items: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in items {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Clusters categories by embedding with Lloyd iterations.
///
/// The first center is the point at a seeded uniform index; each further
/// center is the point farthest (squared Euclidean) from its nearest chosen
/// center, ties to the smallest index. Points join their nearest center
/// (ties to the smallest cluster index) and centers move to member means
/// until assignments stop changing or [`MAX_LLOYD_ITERATIONS`] is reached.
/// An empty cluster takes the member of the largest cluster farthest from
/// that cluster's center. Categories within a group keep table order.
pub fn split_by_embedding(
    table: &EmbeddingTable,
    k: usize,
    seed: u64,
) -> Result<Vec<CategoryGroup>> {
    let n = table.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {n} categories"
        )));
    }
    let names: Vec<&str> = table.iter().map(|(c, _)| c).collect();
    let points: Vec<&[f64]> = table.iter().map(|(_, v)| v).collect();

    let mut rng = SplitMix64::new(seed);
    let mut chosen = vec![rng.index(n)];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let next = argmax(
            (0..n)
                .filter(|i| !chosen.contains(i))
                .map(|i| (i, nearest[i])),
        )
        .expect("k <= n leaves an unchosen point");
        chosen.push(next);
        for (d, p) in nearest.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].to_vec()).collect();

    let mut assign: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut next: Vec<usize> = points
            .iter()
            .map(|p| argmin(k, |c| sq_dist(p, &centers[c])))
            .collect();
        repair_empty_clusters(&points, &mut next, &mut centers, k);
        if next == assign {
            break;
        }
        assign = next;
        centers = means(&points, &assign, k, table.dim());
    }

    let mut groups: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, &c) in assign.iter().enumerate() {
        groups[c].push(names[i].to_owned());
    }
    groups
        .into_iter()
        .map(|g| CategoryGroup::new(g, Provenance::EmbeddingCluster))
        .collect()
}

fn means(points: &[&[f64]], assign: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assign) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        for x in s.iter_mut() {
            *x /= n as f64;
        }
    }
    sums
}

fn repair_empty_clusters(
    points: &[&[f64]],
    assign: &mut [usize],
    centers: &mut [Vec<f64>],
    k: usize,
) {
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assign.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = argmax(sizes.iter().map(|&s| s as f64).enumerate()).expect("k >= 1");
        let center = means(points, assign, k, points[0].len())[largest].clone();
        let far = argmax(
            (0..points.len())
                .filter(|&i| assign[i] == largest)
                .map(|i| (i, sq_dist(points[i], &center))),
        )
        .expect("largest cluster has members");
        assign[far] = empty;
        centers[empty] = points[far].to_vec();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDataset {
    pub ground_truth: Vec<GroundTruthInstance>,
    pub verification: VerificationTable,
    /// Images keeping at least one annotation, in first-appearance order.
    pub images: Vec<String>,
}

/// Keeps only the group's annotations and the images that still have one.
pub fn filter_for_expert(
    gts: &[GroundTruthInstance],
    table: &VerificationTable,
    group: &CategoryGroup,
) -> ExpertDataset {
    let members = group.set();
    let ground_truth: Vec<GroundTruthInstance> = gts
        .iter()
        .filter(|g| members.contains(g.category_id.as_str()))
        .cloned()
        .collect();
    let mut seen = BTreeSet::new();
    let images: Vec<String> = ground_truth
        .iter()
        .filter(|g| seen.insert(g.image_id.as_str()))
        .map(|g| g.image_id.clone())
        .collect();
    let mut verification = table.clone();
    verification.retain(|im, c| seen.contains(im) && members.contains(c));
    ExpertDataset {
        ground_truth,
        verification,
        images,
    }
}

/// Drops predictions outside the group, preserving order.
pub fn restrict_predictions(preds: &[Prediction], group: &CategoryGroup) -> Vec<Prediction> {
    let members = group.set();
    preds
        .iter()
        .filter(|p| members.contains(p.category_id.as_str()))
        .cloned()
        .collect()
}
