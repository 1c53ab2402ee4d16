//! Seeded synthetic inputs shared by the benchmarks.

use fedkit::geometry::RunEncoder;
use fedkit::rng::SplitMix64;
use fedkit::{BBox, BinaryMask, Prediction};

/// `n` box-only predictions spread over `images` images and `categories`
/// categories, clustered so that suppression has work to do.
pub fn random_predictions(
    n: usize,
    images: usize,
    categories: usize,
    seed: u64,
) -> Vec<Prediction> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let image = format!("im{:04}", rng.index(images));
            let category = format!("c{:03}", rng.index(categories));
            let cx = 50.0 + 50.0 * rng.index(8) as f64 + rng.uniform(-10.0, 10.0);
            let cy = 50.0 + 50.0 * rng.index(8) as f64 + rng.uniform(-10.0, 10.0);
            let (w, h) = (rng.uniform(10.0, 60.0), rng.uniform(10.0, 60.0));
            let bbox = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
                .expect("positive extent");
            Prediction::new(&image, &category, rng.next_f64(), bbox, None).expect("valid record")
        })
        .collect()
}

/// A mask of `width x height` made of random horizontal strokes.
pub fn random_mask(width: u32, height: u32, seed: u64) -> BinaryMask {
    let mut rng = SplitMix64::new(seed);
    let total = u64::from(width) * u64::from(height);
    let mut enc = RunEncoder::new();
    let mut left = total;
    let mut bit = false;
    while left > 0 {
        let len = (rng.below(2 * u64::from(width)) + 1).min(left);
        enc.push_run(bit, len as u32);
        left -= len;
        bit = !bit;
    }
    BinaryMask::new(width, height, enc.finish()).expect("runs cover the grid")
}
