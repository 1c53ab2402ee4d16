//! Axis-aligned boxes and full-image run-length masks.
//!
//! Boxes are continuous rectangles in absolute pixel coordinates. Masks are
//! stored as alternating run lengths over the row-major pixel order, starting
//! with a run of 0-pixels; a mask whose first pixel is set starts with a
//! zero-length run.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinate in {self:?}"
            )));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::InvalidBox(format!(
                "min exceeds max in ({}, {}, {}, {})",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }
}

pub fn box_area(b: &BBox) -> f64 {
    b.area()
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Builds canonical run lists one pixel or one run at a time.
#[derive(Debug, Default)]
pub struct RunEncoder {
    runs: Vec<u32>,
    current: bool,
    len: u32,
}

impl RunEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bit: bool) {
        self.push_run(bit, 1);
    }

    pub fn push_run(&mut self, bit: bool, len: u32) {
        if len == 0 {
            return;
        }
        if bit != self.current {
            self.runs.push(self.len);
            self.current = bit;
            self.len = 0;
        }
        self.len += len;
    }

    pub fn finish(mut self) -> Vec<u32> {
        self.runs.push(self.len);
        self.runs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

impl BinaryMask {
    /// Validates the run list against the dimensions.
    ///
    /// Every run after the first must be non-zero, which together with the
    /// zeros-first convention makes the representation canonical.
    pub fn new(width: u32, height: u32, runs: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidMask(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if runs.is_empty() {
            return Err(Error::InvalidMask("empty run list".into()));
        }
        if let Some(pos) = runs.iter().skip(1).position(|&r| r == 0) {
            return Err(Error::InvalidMask(format!(
                "zero-length run at position {}",
                pos + 1
            )));
        }
        let total: u64 = runs.iter().map(|&r| u64::from(r)).sum();
        let expected = u64::from(width) * u64::from(height);
        if total != expected {
            return Err(Error::InvalidMask(format!(
                "runs sum to {total}, expected {width}x{height} = {expected}"
            )));
        }
        Ok(Self {
            width,
            height,
            runs,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, vec![width.saturating_mul(height)])
    }

    /// Encodes a row-major bit grid.
    pub fn encode(width: u32, height: u32, bits: &[bool]) -> Result<Self> {
        if width == 0 || height == 0 || bits.is_empty() {
            return Err(Error::InvalidMask("cannot encode an empty grid".into()));
        }
        if bits.len() as u64 != u64::from(width) * u64::from(height) {
            return Err(Error::InvalidMask(format!(
                "grid has {} pixels, expected {width}x{height}",
                bits.len()
            )));
        }
        let mut enc = RunEncoder::new();
        for &b in bits {
            enc.push(b);
        }
        Self::new(width, height, enc.finish())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn pixel_count(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    /// Number of set pixels.
    pub fn area(&self) -> u64 {
        self.runs
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&r| u64::from(r))
            .sum()
    }

    /// Row-major bit grid.
    pub fn decode(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity(self.pixel_count() as usize);
        let mut bit = false;
        for &run in &self.runs {
            bits.extend(std::iter::repeat_n(bit, run as usize));
            bit = !bit;
        }
        bits
    }

    /// Half-open `[start, end)` pixel ranges of the set runs.
    pub fn set_intervals(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let start = pos;
            pos += u64::from(r);
            (i % 2 == 1).then_some((start, pos))
        })
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Number of pixels set in both masks, by merging run lists.
    pub fn intersection_area(&self, other: &BinaryMask) -> Result<u64> {
        if !self.same_shape(other) {
            return Err(Error::InvalidMask(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let mut a = self.set_intervals().peekable();
        let mut b = other.set_intervals().peekable();
        let mut total = 0u64;
        while let (Some(&(a0, a1)), Some(&(b0, b1))) = (a.peek(), b.peek()) {
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if hi > lo {
                total += hi - lo;
            }
            if a1 <= b1 {
                a.next();
            } else {
                b.next();
            }
        }
        Ok(total)
    }

    /// Mask intersection over union; 0 when both masks are empty.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        let inter = self.intersection_area(other)?;
        let union = self.area() + other.area() - inter;
        Ok(if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        })
    }
}

pub fn mask_area(m: &BinaryMask) -> u64 {
    m.area()
}

pub fn mask_decode(m: &BinaryMask) -> Vec<bool> {
    m.decode()
}

pub fn mask_encode(width: u32, height: u32, bits: &[bool]) -> Result<BinaryMask> {
    BinaryMask::encode(width, height, bits)
}

/// Real-valued raster in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidMask(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if values.len() as u64 != u64::from(width) * u64::from(height) {
            return Err(Error::InvalidMask(format!(
                "soft mask has {} values, expected {width}x{height}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidMask(format!("soft value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// A pixel is set iff its value is at least `threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        let mut enc = RunEncoder::new();
        for &v in &self.values {
            enc.push(v >= threshold);
        }
        BinaryMask {
            width: self.width,
            height: self.height,
            runs: enc.finish(),
        }
    }
}

pub fn mask_binarize(s: &SoftMask, threshold: f64) -> BinaryMask {
    s.binarize(threshold)
}
