use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{Read, Write};

use indexmap::IndexMap;
use petgraph::algo::toposort;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use super::{parse_box, parse_f64, validate_id, CsvRows};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const VERIFICATION_HEADER: &str = "image_id,category_id,verification";
pub const STATS_HEADER: &str = "category_id,count";
pub const ROI_HEADER: &str = "image_id,x_min,y_min,x_max,y_max,objectness";

/// Default cap on the number of RoIs kept per image.
pub const DEFAULT_MAX_ROIS_PER_IMAGE: usize = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verification {
    Positive,
    Negative,
}

impl Verification {
    pub fn as_i8(self) -> i8 {
        match self {
            Verification::Positive => 1,
            Verification::Negative => -1,
        }
    }
}

/// Per-image verified categories. Pairs absent from the table are unverified.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerificationTable {
    by_image: BTreeMap<String, BTreeMap<String, Verification>>,
}

impl VerificationTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a verification; re-inserting the same value is a no-op and
    /// the opposite value is a conflict.
    pub fn insert(&mut self, image_id: &str, category_id: &str, v: Verification) -> Result<()> {
        let per_image = self.by_image.entry(image_id.to_owned()).or_default();
        match per_image.get(category_id) {
            Some(&old) if old != v => Err(Error::Conflict(format!(
                "({image_id}, {category_id}) is both positively and negatively verified"
            ))),
            Some(_) => Ok(()),
            None => {
                per_image.insert(category_id.to_owned(), v);
                Ok(())
            }
        }
    }

    pub fn get(&self, image_id: &str, category_id: &str) -> Option<Verification> {
        self.by_image.get(image_id)?.get(category_id).copied()
    }

    pub fn is_verified(&self, image_id: &str, category_id: &str) -> bool {
        self.get(image_id, category_id).is_some()
    }

    pub fn image(&self, image_id: &str) -> Option<&BTreeMap<String, Verification>> {
        self.by_image.get(image_id)
    }

    pub fn images(&self) -> impl Iterator<Item = &str> {
        self.by_image.keys().map(String::as_str)
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.by_image
            .values()
            .flat_map(|m| m.keys().map(String::as_str))
            .collect()
    }

    /// `(image, category, verification)` in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, Verification)> {
        self.by_image
            .iter()
            .flat_map(|(im, cats)| cats.iter().map(move |(c, &v)| (im.as_str(), c.as_str(), v)))
    }

    pub fn len(&self) -> usize {
        self.by_image.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the entries for which `keep(image, category)` holds.
    pub fn retain(&mut self, mut keep: impl FnMut(&str, &str) -> bool) {
        for (im, cats) in self.by_image.iter_mut() {
            cats.retain(|c, _| keep(im, c));
        }
        self.by_image.retain(|_, cats| !cats.is_empty());
    }
}

pub fn parse_verification<R: Read>(input: R) -> Result<VerificationTable> {
    let mut rows = CsvRows::new(input, VERIFICATION_HEADER)?;
    let mut table = VerificationTable::new();
    while let Some((line, r)) = rows.next_row(Some(3))? {
        validate_id("image_id", &r[0]).map_err(|e| Error::parse(line, e.to_string()))?;
        validate_id("category_id", &r[1]).map_err(|e| Error::parse(line, e.to_string()))?;
        let v = match &r[2] {
            "1" => Verification::Positive,
            "-1" => Verification::Negative,
            other => {
                return Err(Error::parse(
                    line,
                    format!("verification must be 1 or -1, found {other:?}"),
                ))
            }
        };
        table.insert(&r[0], &r[1], v).map_err(|e| match e {
            Error::Conflict(msg) => Error::Conflict(format!("line {line}: {msg}")),
            e => e,
        })?;
    }
    Ok(table)
}

pub fn write_verification<W: Write>(mut out: W, table: &VerificationTable) -> Result<()> {
    writeln!(out, "{VERIFICATION_HEADER}")?;
    for (im, c, v) in table.iter() {
        writeln!(out, "{im},{c},{}", v.as_i8())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyEdge {
    pub child: String,
    pub parent: String,
}

/// Acyclic child-to-parent category relation.
#[derive(Debug, Clone, Default)]
pub struct Hierarchy {
    edges: Vec<HierarchyEdge>,
    parents: HashMap<String, Vec<String>>,
    children: HashMap<String, Vec<String>>,
}

impl Hierarchy {
    pub fn new(edges: Vec<HierarchyEdge>) -> Result<Self> {
        let mut graph = DiGraph::<&str, ()>::new();
        let mut nodes = HashMap::new();
        for e in &edges {
            let c = *nodes
                .entry(e.child.as_str())
                .or_insert_with(|| graph.add_node(e.child.as_str()));
            let p = *nodes
                .entry(e.parent.as_str())
                .or_insert_with(|| graph.add_node(e.parent.as_str()));
            graph.add_edge(c, p, ());
        }
        if let Err(cycle) = toposort(&graph, None) {
            return Err(Error::Cycle(graph[cycle.node_id()].to_owned()));
        }

        let mut parents: HashMap<String, Vec<String>> = HashMap::new();
        let mut children: HashMap<String, Vec<String>> = HashMap::new();
        for e in &edges {
            parents
                .entry(e.child.clone())
                .or_default()
                .push(e.parent.clone());
            children
                .entry(e.parent.clone())
                .or_default()
                .push(e.child.clone());
        }
        Ok(Self {
            edges,
            parents,
            children,
        })
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .map(|(child, parent)| HierarchyEdge {
                    child: child.to_owned(),
                    parent: parent.to_owned(),
                })
                .collect(),
        )
    }

    pub fn edges(&self) -> &[HierarchyEdge] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.edges
            .iter()
            .flat_map(|e| [e.child.as_str(), e.parent.as_str()])
            .collect()
    }

    fn closure<'a>(map: &'a HashMap<String, Vec<String>>, start: &str) -> BTreeSet<&'a str> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<&str> = map
            .get(start)
            .into_iter()
            .flatten()
            .map(String::as_str)
            .collect();
        while let Some(c) = queue.pop_front() {
            if seen.insert(c) {
                queue.extend(map.get(c).into_iter().flatten().map(String::as_str));
            }
        }
        seen
    }

    /// All strict ancestors of `category`.
    pub fn ancestors(&self, category: &str) -> BTreeSet<&str> {
        Self::closure(&self.parents, category)
    }

    /// All strict descendants of `category`.
    pub fn descendants(&self, category: &str) -> BTreeSet<&str> {
        Self::closure(&self.children, category)
    }

    /// Fails if an edge mentions a category outside `known`.
    pub fn check_categories(&self, known: &BTreeSet<&str>) -> Result<()> {
        match self.categories().into_iter().find(|c| !known.contains(c)) {
            Some(c) => Err(Error::Validation(format!(
                "hierarchy references unknown category {c}"
            ))),
            None => Ok(()),
        }
    }
}

pub fn parse_hierarchy<R: Read>(input: R) -> Result<Hierarchy> {
    let edges: Vec<HierarchyEdge> = serde_json::from_reader(input)
        .map_err(|e| Error::parse(e.line() as u64, format!("hierarchy JSON: {e}")))?;
    for e in &edges {
        validate_id("child", &e.child)?;
        validate_id("parent", &e.parent)?;
    }
    Hierarchy::new(edges)
}

pub fn write_hierarchy<W: Write>(mut out: W, h: &Hierarchy) -> Result<()> {
    serde_json::to_writer(&mut out, h.edges()).map_err(std::io::Error::from)?;
    writeln!(out)?;
    Ok(())
}

/// Number of images containing each category.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryStats {
    pub counts: BTreeMap<String, u64>,
}

impl CategoryStats {
    pub fn from_counts<'a>(counts: impl IntoIterator<Item = (&'a str, u64)>) -> Self {
        Self {
            counts: counts.into_iter().map(|(c, n)| (c.to_owned(), n)).collect(),
        }
    }
}

pub fn parse_category_stats<R: Read>(input: R) -> Result<CategoryStats> {
    let mut rows = CsvRows::new(input, STATS_HEADER)?;
    let mut counts = BTreeMap::new();
    while let Some((line, r)) = rows.next_row(Some(2))? {
        validate_id("category_id", &r[0]).map_err(|e| Error::parse(line, e.to_string()))?;
        let n: u64 = r[1].parse().map_err(|_| {
            Error::parse(
                line,
                format!("count must be a non-negative integer, found {:?}", &r[1]),
            )
        })?;
        if counts.insert(r[0].to_owned(), n).is_some() {
            return Err(Error::parse(line, format!("duplicate category {}", &r[0])));
        }
    }
    Ok(CategoryStats { counts })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub bbox: BBox,
    pub objectness: Option<f64>,
}

impl Roi {
    pub fn new(bbox: BBox) -> Self {
        Self {
            bbox,
            objectness: None,
        }
    }
}

/// Pre-computed RoIs per image, images in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoiPool {
    pub images: IndexMap<String, Vec<Roi>>,
}

impl RoiPool {
    pub fn get(&self, image_id: &str) -> Option<&[Roi]> {
        self.images.get(image_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn parse_roi_pool<R: Read>(input: R, max_per_image: usize) -> Result<RoiPool> {
    let mut rows = CsvRows::new(input, ROI_HEADER)?;
    let mut pool = RoiPool::default();
    while let Some((line, r)) = rows.next_row(Some(6))? {
        validate_id("image_id", &r[0]).map_err(|e| Error::parse(line, e.to_string()))?;
        let bbox = parse_box(line, [&r[1], &r[2], &r[3], &r[4]])?;
        let objectness = match &r[5] {
            "" => None,
            s => Some(parse_f64(line, "objectness", s)?),
        };
        let rois = pool.images.entry(r[0].to_owned()).or_default();
        if rois.len() == max_per_image {
            return Err(Error::parse(
                line,
                format!("image {} exceeds {max_per_image} RoIs", &r[0]),
            ));
        }
        rois.push(Roi { bbox, objectness });
    }
    Ok(pool)
}

pub fn write_roi_pool<W: Write>(mut out: W, pool: &RoiPool) -> Result<()> {
    writeln!(out, "{ROI_HEADER}")?;
    for (im, rois) in &pool.images {
        for roi in rois {
            let b = &roi.bbox;
            write!(out, "{im},{},{},{},{},", b.x_min, b.y_min, b.x_max, b.y_max)?;
            if let Some(o) = roi.objectness {
                write!(out, "{o}")?;
            }
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Category embeddings of a shared dimension, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: IndexMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation(
                "embedding dimension must be at least 1".into(),
            ));
        }
        Ok(Self {
            dim,
            vectors: IndexMap::new(),
        })
    }

    pub fn insert(&mut self, category_id: &str, vector: Vec<f64>) -> Result<()> {
        validate_id("category_id", category_id)?;
        if vector.len() != self.dim {
            return Err(Error::Validation(format!(
                "embedding for {category_id} has dimension {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite embedding for {category_id}"
            )));
        }
        if self
            .vectors
            .insert(category_id.to_owned(), vector)
            .is_some()
        {
            return Err(Error::Validation(format!(
                "duplicate embedding for {category_id}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(c, v)| (c.as_str(), v.as_slice()))
    }
}

pub fn parse_embeddings<R: Read>(input: R) -> Result<EmbeddingTable> {
    let mut rows = CsvRows::open(input)?;
    let header = rows.headers()?;
    let well_formed = header.first().map(String::as_str) == Some("category_id")
        && header.len() >= 2
        && header[1..]
            .iter()
            .enumerate()
            .all(|(i, h)| *h == format!("v{i}"));
    if !well_formed {
        return Err(Error::parse(
            1,
            format!(
                "expected header `category_id,v0,v1,...`, found `{}`",
                header.join(",")
            ),
        ));
    }
    let dim = header.len() - 1;
    let mut table = EmbeddingTable::new(dim)?;
    while let Some((line, r)) = rows.next_row(None)? {
        if r.len() != dim + 1 {
            return Err(Error::parse(
                line,
                format!(
                    "embedding dimension mismatch: expected {dim} values, found {}",
                    r.len().saturating_sub(1)
                ),
            ));
        }
        let v = r
            .iter()
            .skip(1)
            .enumerate()
            .map(|(i, s)| parse_f64(line, &format!("v{i}"), s))
            .collect::<Result<Vec<_>>>()?;
        let category = r[0].to_owned();
        table
            .insert(&category, v)
            .map_err(|e| Error::parse(line, e.to_string()))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conflicting_verification_rejected() {
        let text = format!("{VERIFICATION_HEADER}\nim1,c1,1\nim1,c1,-1\n");
        assert!(matches!(
            parse_verification(text.as_bytes()),
            Err(Error::Conflict(_))
        ));
        let dup = format!("{VERIFICATION_HEADER}\nim1,c1,1\nim1,c1,1\n");
        assert_eq!(parse_verification(dup.as_bytes()).unwrap().len(), 1);
        let bad = format!("{VERIFICATION_HEADER}\nim1,c1,0\n");
        assert!(matches!(
            parse_verification(bad.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn verification_round_trip() {
        let text = format!("{VERIFICATION_HEADER}\nim1,a,1\nim1,b,-1\nim2,a,-1\n");
        let t = parse_verification(text.as_bytes()).unwrap();
        assert_eq!(t.get("im1", "b"), Some(Verification::Negative));
        assert_eq!(t.get("im2", "b"), None);
        let mut out = Vec::new();
        write_verification(&mut out, &t).unwrap();
        assert_eq!(out, text.as_bytes());
    }

    #[test]
    fn hierarchy_two_cycle() {
        let json = r#"[{"child":"c1","parent":"c2"},{"child":"c2","parent":"c1"}]"#;
        match parse_hierarchy(json.as_bytes()) {
            Err(Error::Cycle(c)) => assert!(c == "c1" || c == "c2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hierarchy_cycle_names_member() {
        let h = Hierarchy::from_pairs([("a", "b"), ("b", "c"), ("c", "b")]);
        match h {
            Err(Error::Cycle(c)) => assert!(c == "b" || c == "c", "{c}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Hierarchy::from_pairs([("x", "x")]),
            Err(Error::Cycle(_))
        ));
    }

    #[test]
    fn hierarchy_closures() {
        let h = Hierarchy::from_pairs([("cat", "mammal"), ("mammal", "animal"), ("dog", "mammal")])
            .unwrap();
        assert_eq!(
            h.ancestors("cat").into_iter().collect::<Vec<_>>(),
            ["animal", "mammal"]
        );
        assert_eq!(
            h.descendants("animal").into_iter().collect::<Vec<_>>(),
            ["cat", "dog", "mammal"]
        );
        assert!(h.ancestors("animal").is_empty());
        let known: BTreeSet<&str> = ["cat", "mammal", "animal"].into();
        assert!(h.check_categories(&known).is_err());
    }

    #[test]
    fn hierarchy_json_round_trip() {
        let json = r#"[{"child":"a","parent":"b"}]"#;
        let h = parse_hierarchy(json.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_hierarchy(&mut out, &h).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().trim_end(), json);
    }

    #[test]
    fn stats_parse() {
        let text = format!("{STATS_HEADER}\n/m/person,807000\n/m/cooker,13\n");
        let s = parse_category_stats(text.as_bytes()).unwrap();
        assert_eq!(s.counts["/m/cooker"], 13);
        let dup = format!("{STATS_HEADER}\na,1\na,2\n");
        assert!(parse_category_stats(dup.as_bytes()).is_err());
        let neg = format!("{STATS_HEADER}\na,-1\n");
        assert!(parse_category_stats(neg.as_bytes()).is_err());
    }

    #[test]
    fn roi_pool_parse_and_cap() {
        let text = format!("{ROI_HEADER}\nim1,0,0,1,1,0.5\nim2,0,0,2,2,\nim1,1,1,2,2,\n");
        let pool = parse_roi_pool(text.as_bytes(), 16_000).unwrap();
        assert_eq!(pool.images.keys().collect::<Vec<_>>(), ["im1", "im2"]);
        assert_eq!(pool.get("im1").unwrap().len(), 2);
        assert_eq!(pool.get("im1").unwrap()[0].objectness, Some(0.5));
        assert!(matches!(
            parse_roi_pool(text.as_bytes(), 1),
            Err(Error::Parse { line: 4, .. })
        ));
        let mut out = Vec::new();
        write_roi_pool(&mut out, &pool).unwrap();
        let again = parse_roi_pool(out.as_slice(), 16_000).unwrap();
        assert_eq!(again, pool);
    }

    #[test]
    fn embeddings_parse() {
        let text = "category_id,v0,v1\na,1,2\nb,3.5,-1\n";
        let t = parse_embeddings(text.as_bytes()).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.iter().nth(1).unwrap(), ("b", &[3.5, -1.0][..]));
        let short = "category_id,v0,v1\na,1\n";
        assert!(matches!(
            parse_embeddings(short.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(parse_embeddings("category_id\na\n".as_bytes()).is_err());
        assert!(parse_embeddings("category_id,v1\na,1\n".as_bytes()).is_err());
    }
}
