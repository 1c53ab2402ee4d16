//! Derived artifacts: label matrices, logits, category groups, sampled RoI
//! indices, kept-image lists, evaluation and trim reports.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use indexmap::IndexMap;

use super::{parse_f64, validate_id, CsvRows};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::experts::{CategoryGroup, Provenance};
use crate::labels::{Label, LabelMatrix, LogitMatrix};
use crate::postprocess::TrimReport;

pub const LABEL_MATRIX_HEADER: &str = "roi_index,category_id,label";
pub const LOGITS_HEADER: &str = "roi_index,category_id,logit";
pub const GROUP_HEADER: &str = "group_index,category_id";
pub const SAMPLED_HEADER: &str = "image_id,roi_index";
pub const IMAGE_LIST_HEADER: &str = "image_id";
pub const CATEGORY_LIST_HEADER: &str = "category_id";
pub const EVAL_REPORT_HEADER: &str = "category_id,ap,gt_count,pred_count,ignored_count";
pub const TRIM_REPORT_HEADER: &str = "category_id,removed";

fn parse_usize(line: u64, name: &str, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("{name}: cannot parse {s:?} as an index")))
}

/// Row-major, every entry including zeros.
pub fn write_label_matrix<W: Write>(mut out: W, m: &LabelMatrix) -> Result<()> {
    writeln!(out, "{LABEL_MATRIX_HEADER}")?;
    for r in 0..m.rows() {
        for (c, cat) in m.categories().iter().enumerate() {
            writeln!(out, "{r},{cat},{}", m.get(r, c).as_i8())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a `(roi_index, category_id) -> value` grid. Categories keep
/// first-appearance order; every cell of rows `0..n` must appear once.
fn parse_grid<R: Read, T: Copy>(
    input: R,
    header: &str,
    parse: impl Fn(u64, &str) -> Result<T>,
) -> Result<(Vec<String>, usize, Vec<T>)> {
    let mut rows = CsvRows::new(input, header)?;
    let mut cats: IndexMap<String, ()> = IndexMap::new();
    let mut cells: HashMap<(usize, usize), T> = HashMap::new();
    let mut n_rows = 0;
    while let Some((line, r)) = rows.next_row(Some(3))? {
        let row = parse_usize(line, "roi_index", &r[0])?;
        validate_id("category_id", &r[1]).map_err(|e| Error::parse(line, e.to_string()))?;
        let (col, _) = cats.insert_full(r[1].to_owned(), ());
        let value = parse(line, &r[2])?;
        if cells.insert((row, col), value).is_some() {
            return Err(Error::parse(
                line,
                format!("duplicate entry ({row}, {})", &r[1]),
            ));
        }
        n_rows = n_rows.max(row + 1);
    }
    let cols = cats.len();
    let mut values = Vec::with_capacity(n_rows * cols);
    for row in 0..n_rows {
        for (col, cat) in cats.keys().enumerate() {
            let v = cells
                .get(&(row, col))
                .ok_or_else(|| Error::Validation(format!("missing entry ({row}, {cat})")))?;
            values.push(*v);
        }
    }
    Ok((cats.into_keys().collect(), n_rows, values))
}

pub fn parse_label_matrix<R: Read>(input: R) -> Result<LabelMatrix> {
    let (cats, rows, labels) = parse_grid(input, LABEL_MATRIX_HEADER, |line, s| {
        s.parse::<i8>()
            .ok()
            .and_then(Label::from_i8)
            .ok_or_else(|| Error::parse(line, format!("label must be -1, 0 or 1, found {s:?}")))
    })?;
    LabelMatrix::new(cats, rows, labels)
}

pub fn write_logits<W: Write>(mut out: W, categories: &[String], m: &LogitMatrix) -> Result<()> {
    if categories.len() != m.cols() {
        return Err(Error::Validation(format!(
            "{} category names for {} logit columns",
            categories.len(),
            m.cols()
        )));
    }
    writeln!(out, "{LOGITS_HEADER}")?;
    for (i, x) in m.logits().iter().enumerate() {
        writeln!(
            out,
            "{},{},{x}",
            i / m.cols().max(1),
            categories[i % m.cols()]
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads logits laid out on the same grid as `labels`.
pub fn parse_logits_for<R: Read>(input: R, labels: &LabelMatrix) -> Result<LogitMatrix> {
    let (cats, rows, values) =
        parse_grid(input, LOGITS_HEADER, |line, s| parse_f64(line, "logit", s))?;
    if rows != labels.rows() || cats.len() != labels.cols() {
        return Err(Error::Validation(format!(
            "logits are {rows}x{}, labels are {}x{}",
            cats.len(),
            labels.rows(),
            labels.cols()
        )));
    }
    // Reorder columns to the label matrix's category order.
    let index: HashMap<&str, usize> = cats
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let perm = labels
        .categories()
        .iter()
        .map(|c| {
            index
                .get(c.as_str())
                .copied()
                .ok_or_else(|| Error::Validation(format!("no logits for category {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let cols = perm.len();
    let mut out = Vec::with_capacity(values.len());
    for r in 0..rows {
        out.extend(perm.iter().map(|&c| values[r * cols + c]));
    }
    LogitMatrix::new(rows, cols, out)
}

pub fn write_groups<W: Write>(mut out: W, groups: &[CategoryGroup]) -> Result<()> {
    writeln!(out, "{GROUP_HEADER}")?;
    for (g, group) in groups.iter().enumerate() {
        for c in &group.categories {
            writeln!(out, "{g},{c}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Group indices must run from 0 without gaps.
pub fn parse_groups<R: Read>(input: R) -> Result<Vec<CategoryGroup>> {
    let mut rows = CsvRows::new(input, GROUP_HEADER)?;
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    while let Some((line, r)) = rows.next_row(Some(2))? {
        let g = parse_usize(line, "group_index", &r[0])?;
        validate_id("category_id", &r[1]).map_err(|e| Error::parse(line, e.to_string()))?;
        groups.entry(g).or_default().push(r[1].to_owned());
    }
    if let Some((i, _)) = groups.keys().enumerate().find(|(i, g)| i != *g) {
        return Err(Error::Validation(format!("group index {i} is missing")));
    }
    groups
        .into_values()
        .map(|cats| CategoryGroup::new(cats, Provenance::External))
        .collect()
}

pub fn write_sampled<W: Write>(mut out: W, sampled: &IndexMap<String, Vec<usize>>) -> Result<()> {
    writeln!(out, "{SAMPLED_HEADER}")?;
    for (image, idx) in sampled {
        for i in idx {
            writeln!(out, "{image},{i}")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn parse_sampled<R: Read>(input: R) -> Result<IndexMap<String, Vec<usize>>> {
    let mut rows = CsvRows::new(input, SAMPLED_HEADER)?;
    let mut out: IndexMap<String, Vec<usize>> = IndexMap::new();
    while let Some((line, r)) = rows.next_row(Some(2))? {
        let i = parse_usize(line, "roi_index", &r[1])?;
        out.entry(r[0].to_owned()).or_default().push(i);
    }
    Ok(out)
}

fn write_id_list<W: Write>(mut out: W, header: &str, ids: &[String]) -> Result<()> {
    writeln!(out, "{header}")?;
    for id in ids {
        writeln!(out, "{id}")?;
    }
    out.flush()?;
    Ok(())
}

fn parse_id_list<R: Read>(input: R, header: &str) -> Result<Vec<String>> {
    let mut rows = CsvRows::new(input, header)?;
    let mut out = Vec::new();
    while let Some((line, r)) = rows.next_row(Some(1))? {
        validate_id(header, &r[0]).map_err(|e| Error::parse(line, e.to_string()))?;
        out.push(r[0].to_owned());
    }
    Ok(out)
}

pub fn write_image_list<W: Write>(out: W, images: &[String]) -> Result<()> {
    write_id_list(out, IMAGE_LIST_HEADER, images)
}

pub fn parse_image_list<R: Read>(input: R) -> Result<Vec<String>> {
    parse_id_list(input, IMAGE_LIST_HEADER)
}

pub fn write_category_list<W: Write>(out: W, categories: &[String]) -> Result<()> {
    write_id_list(out, CATEGORY_LIST_HEADER, categories)
}

pub fn parse_category_list<R: Read>(input: R) -> Result<Vec<String>> {
    parse_id_list(input, CATEGORY_LIST_HEADER)
}

/// AP with six decimals; empty for categories without ground truth.
pub fn write_eval_report<W: Write>(mut out: W, report: &EvalReport) -> Result<()> {
    writeln!(out, "{EVAL_REPORT_HEADER}")?;
    for c in &report.categories {
        let ap = c.ap.map(|ap| format!("{ap:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{ap},{},{},{}",
            c.category, c.gt_count, c.pred_count, c.ignored_count
        )?;
    }
    out.flush()?;
    Ok(())
}

/// The one-line summary printed after evaluation.
pub fn format_map(map: f64) -> String {
    format!("mAP,{map:.6}")
}

pub fn write_trim_report<W: Write>(mut out: W, report: &TrimReport) -> Result<()> {
    writeln!(out, "{TRIM_REPORT_HEADER}")?;
    for (c, n) in &report.removed {
        writeln!(out, "{c},{n}")?;
    }
    out.flush()?;
    Ok(())
}
