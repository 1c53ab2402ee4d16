//! Record types and their file formats.
//!
//! Predictions and ground truth are CSV files with a fixed header. Numbers
//! are written with the shortest decimal representation that parses back to
//! the same `f64`, so parsing a file produced by this module and writing it
//! again reproduces it byte for byte. Masks travel in three columns: width,
//! height and the space-separated run lengths. Box-only records leave all
//! three empty.

mod reports;
mod tables;

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};

pub use reports::*;
pub use tables::*;

pub const PREDICTION_HEADER: &str =
    "image_id,category_id,score,x_min,y_min,x_max,y_max,mask_width,mask_height,mask_rle";
pub const GROUND_TRUTH_HEADER: &str =
    "image_id,category_id,x_min,y_min,x_max,y_max,mask_width,mask_height,mask_rle";

/// Identifiers end up unquoted in CSV fields.
pub(crate) fn validate_id(kind: &str, id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Validation(format!("empty {kind}")));
    }
    if id.contains([',', '"', '\n', '\r']) {
        return Err(Error::Validation(format!(
            "{kind} {id:?} contains a delimiter, quote or newline"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: String,
    pub category_id: String,
    pub score: f64,
    pub bbox: BBox,
    pub mask: Option<BinaryMask>,
}

impl Prediction {
    pub fn new(
        image_id: impl Into<String>,
        category_id: impl Into<String>,
        score: f64,
        bbox: BBox,
        mask: Option<BinaryMask>,
    ) -> Result<Self> {
        let p = Self {
            image_id: image_id.into(),
            category_id: category_id.into(),
            score,
            bbox,
            mask,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        validate_id("image_id", &self.image_id)?;
        validate_id("category_id", &self.category_id)?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        self.bbox.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub image_id: String,
    pub category_id: String,
    pub bbox: BBox,
    pub mask: Option<BinaryMask>,
}

impl GroundTruthInstance {
    pub fn new(
        image_id: impl Into<String>,
        category_id: impl Into<String>,
        bbox: BBox,
        mask: Option<BinaryMask>,
    ) -> Result<Self> {
        let g = Self {
            image_id: image_id.into(),
            category_id: category_id.into(),
            bbox,
            mask,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        validate_id("image_id", &self.image_id)?;
        validate_id("category_id", &self.category_id)?;
        self.bbox.validate()
    }
}

/// Counts bytes written through `fmt::Write` without storing them.
#[derive(Default)]
struct ByteCounter(u64);

impl fmt::Write for ByteCounter {
    fn write_str(&mut self, s: &str) -> fmt::Result {
        self.0 += s.len() as u64;
        Ok(())
    }
}

fn fmt_mask<W: fmt::Write>(w: &mut W, mask: Option<&BinaryMask>) -> fmt::Result {
    match mask {
        None => w.write_str(",,"),
        Some(m) => {
            write!(w, "{},{},", m.width(), m.height())?;
            for (i, r) in m.runs().iter().enumerate() {
                if i > 0 {
                    w.write_char(' ')?;
                }
                write!(w, "{r}")?;
            }
            Ok(())
        }
    }
}

fn fmt_box<W: fmt::Write>(w: &mut W, b: &BBox) -> fmt::Result {
    write!(w, "{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max)
}

fn fmt_prediction_row<W: fmt::Write>(w: &mut W, p: &Prediction) -> fmt::Result {
    write!(w, "{},{},{},", p.image_id, p.category_id, p.score)?;
    fmt_box(w, &p.bbox)?;
    w.write_char(',')?;
    fmt_mask(w, p.mask.as_ref())?;
    w.write_char('\n')
}

fn fmt_ground_truth_row<W: fmt::Write>(w: &mut W, g: &GroundTruthInstance) -> fmt::Result {
    write!(w, "{},{},", g.image_id, g.category_id)?;
    fmt_box(w, &g.bbox)?;
    w.write_char(',')?;
    fmt_mask(w, g.mask.as_ref())?;
    w.write_char('\n')
}

/// Byte length of the header line including its newline.
pub fn prediction_header_len() -> u64 {
    PREDICTION_HEADER.len() as u64 + 1
}

/// Byte length of one serialized prediction row including its newline.
pub fn prediction_row_len(p: &Prediction) -> u64 {
    let mut c = ByteCounter::default();
    fmt_prediction_row(&mut c, p).expect("counting never fails");
    c.0
}

/// Exact length of what [`write_predictions`] produces.
pub fn serialized_size(preds: &[Prediction]) -> u64 {
    prediction_header_len() + preds.iter().map(prediction_row_len).sum::<u64>()
}

fn write_rows<W: Write, T>(
    mut out: W,
    header: &str,
    rows: &[T],
    fmt_row: impl Fn(&mut String, &T) -> fmt::Result,
) -> Result<()> {
    let mut buf = String::with_capacity(256);
    writeln!(out, "{header}")?;
    for row in rows {
        buf.clear();
        fmt_row(&mut buf, row).expect("formatting into a String never fails");
        out.write_all(buf.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_predictions<W: Write>(out: W, preds: &[Prediction]) -> Result<()> {
    write_rows(out, PREDICTION_HEADER, preds, fmt_prediction_row)
}

pub fn predictions_to_bytes(preds: &[Prediction]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(serialized_size(preds) as usize);
    write_predictions(&mut buf, preds).expect("writing to memory never fails");
    buf
}

pub fn write_ground_truth<W: Write>(out: W, gts: &[GroundTruthInstance]) -> Result<()> {
    write_rows(out, GROUND_TRUTH_HEADER, gts, fmt_ground_truth_row)
}

/// Streams CSV records after checking the header matches exactly.
pub(crate) struct CsvRows<R: Read> {
    reader: csv::Reader<R>,
    record: csv::StringRecord,
}

impl<R: Read> CsvRows<R> {
    pub(crate) fn new(input: R, header: &str) -> Result<Self> {
        let mut rows = Self::open(input)?;
        let expected: Vec<&str> = header.split(',').collect();
        let got = rows.reader.headers()?;
        if got.iter().ne(expected.iter().copied()) {
            return Err(Error::parse(
                1,
                format!("expected header `{header}`, found `{}`", join_record(got)),
            ));
        }
        Ok(rows)
    }

    /// Opens without checking the header; rows may have any width.
    pub(crate) fn open(input: R) -> Result<Self> {
        let reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(input);
        Ok(Self {
            reader,
            record: csv::StringRecord::new(),
        })
    }

    pub(crate) fn headers(&mut self) -> Result<Vec<String>> {
        Ok(self.reader.headers()?.iter().map(str::to_owned).collect())
    }

    /// Next record and its 1-based line number.
    pub(crate) fn next_row(
        &mut self,
        width: Option<usize>,
    ) -> Result<Option<(u64, &csv::StringRecord)>> {
        if !self.reader.read_record(&mut self.record)? {
            return Ok(None);
        }
        let line = self.record.position().map(|p| p.line()).unwrap_or(0);
        if let Some(width) = width {
            if self.record.len() != width {
                return Err(Error::parse(
                    line,
                    format!("expected {width} fields, found {}", self.record.len()),
                ));
            }
        }
        Ok(Some((line, &self.record)))
    }
}

fn join_record(r: &csv::StringRecord) -> String {
    r.iter().collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_f64(line: u64, name: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::parse(line, format!("{name}: cannot parse {s:?} as a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(
            line,
            format!("{name}: non-finite value {s:?}"),
        ));
    }
    Ok(v)
}

pub(crate) fn parse_u32(line: u64, name: &str, s: &str) -> Result<u32> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("{name}: cannot parse {s:?} as an integer")))
}

pub(crate) fn parse_box(line: u64, fields: [&str; 4]) -> Result<BBox> {
    let [a, b, c, d] = fields;
    BBox::new(
        parse_f64(line, "x_min", a)?,
        parse_f64(line, "y_min", b)?,
        parse_f64(line, "x_max", c)?,
        parse_f64(line, "y_max", d)?,
    )
    .map_err(|e| Error::parse(line, e.to_string()))
}

fn parse_mask(line: u64, w: &str, h: &str, rle: &str) -> Result<Option<BinaryMask>> {
    match (w.is_empty(), h.is_empty(), rle.is_empty()) {
        (true, true, true) => Ok(None),
        (false, false, false) => {
            let width = parse_u32(line, "mask_width", w)?;
            let height = parse_u32(line, "mask_height", h)?;
            let runs = rle
                .split(' ')
                .map(|r| parse_u32(line, "mask_rle", r))
                .collect::<Result<Vec<_>>>()?;
            BinaryMask::new(width, height, runs)
                .map(Some)
                .map_err(|e| Error::parse(line, e.to_string()))
        }
        _ => Err(Error::parse(
            line,
            "mask_width, mask_height and mask_rle must be all empty or all present",
        )),
    }
}

pub fn parse_predictions<R: Read>(input: R) -> Result<Vec<Prediction>> {
    let mut rows = CsvRows::new(input, PREDICTION_HEADER)?;
    let mut out = Vec::new();
    while let Some((line, r)) = rows.next_row(Some(10))? {
        let score = parse_f64(line, "score", &r[2])?;
        let bbox = parse_box(line, [&r[3], &r[4], &r[5], &r[6]])?;
        let mask = parse_mask(line, &r[7], &r[8], &r[9])?;
        let p = Prediction {
            image_id: r[0].to_owned(),
            category_id: r[1].to_owned(),
            score,
            bbox,
            mask,
        };
        p.validate()
            .map_err(|e| Error::parse(line, e.to_string()))?;
        out.push(p);
    }
    Ok(out)
}

pub fn parse_ground_truth<R: Read>(input: R) -> Result<Vec<GroundTruthInstance>> {
    let mut rows = CsvRows::new(input, GROUND_TRUTH_HEADER)?;
    let mut out = Vec::new();
    while let Some((line, r)) = rows.next_row(Some(9))? {
        let bbox = parse_box(line, [&r[2], &r[3], &r[4], &r[5]])?;
        let mask = parse_mask(line, &r[6], &r[7], &r[8])?;
        let g = GroundTruthInstance {
            image_id: r[0].to_owned(),
            category_id: r[1].to_owned(),
            bbox,
            mask,
        };
        g.validate()
            .map_err(|e| Error::parse(line, e.to_string()))?;
        out.push(g);
    }
    Ok(out)
}

/// Checks mask dimensions against a per-image size table. Images missing
/// from the table are not checked.
pub fn check_mask_dimensions(
    preds: &[Prediction],
    sizes: &std::collections::HashMap<String, (u32, u32)>,
) -> Result<()> {
    for p in preds {
        if let (Some(m), Some(&(w, h))) = (&p.mask, sizes.get(&p.image_id)) {
            if (m.width(), m.height()) != (w, h) {
                return Err(Error::Validation(format!(
                    "mask of {}x{} on image {} which is {w}x{h}",
                    m.width(),
                    m.height(),
                    p.image_id
                )));
            }
        }
    }
    Ok(())
}
