//! Absolute-percent-error reliability at edge, seed, and omnibus
//! resolution.
//!
//! A truncated-scan estimate is scored against a reference estimate by
//! `APE = |est - ref| / |ref|`, a fraction (1.0 means 100% error). Two
//! reference choices give two kinds of reliability:
//!
//! * `Intersession`: the reference is the raw full-length estimate from
//!   the other visit. This is the honest replication target, and it
//!   stays the raw visit-2 estimate even when the scored estimate was
//!   shrunk.
//! * `EndPoint`: the reference is the raw full-length estimate from the
//!   same visit. Estimate and reference share data, so this flavor is
//!   optimistic: for the raw method at full length it is zero by
//!   construction.
//!
//! Edges whose reference is within `guard` of zero get an undefined APE;
//! undefined entries are excluded from medians and counted.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::connectivity::{edge_iter, EdgeVector};
use crate::error::{Error, Result};
use crate::timeseries::format_float;

/// Default denominator guard below which a reference is treated as zero.
pub const DEFAULT_GUARD: f64 = 1e-12;

/// Estimation method being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Raw,
    SingleSessionShrink,
    OracleShrink,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Raw, Method::SingleSessionShrink, Method::OracleShrink];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::SingleSessionShrink => "single_session_shrink",
            Method::OracleShrink => "oracle_shrink",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Method::Raw),
            "single_session_shrink" | "single-session" => Ok(Method::SingleSessionShrink),
            "oracle_shrink" | "oracle" => Ok(Method::OracleShrink),
            other => Err(Error::Schema {
                context: "method".into(),
                message: format!("unknown method {other:?}"),
            }),
        }
    }
}

/// Which reference the estimate is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReliabilityKind {
    Intersession,
    EndPoint,
}

impl ReliabilityKind {
    pub const ALL: [ReliabilityKind; 2] = [ReliabilityKind::Intersession, ReliabilityKind::EndPoint];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReliabilityKind::Intersession => "intersession",
            ReliabilityKind::EndPoint => "end_point",
        }
    }
}

impl fmt::Display for ReliabilityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReliabilityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intersession" => Ok(ReliabilityKind::Intersession),
            "end_point" | "endpoint" => Ok(ReliabilityKind::EndPoint),
            other => Err(Error::Schema {
                context: "kind".into(),
                message: format!("unknown reliability kind {other:?}"),
            }),
        }
    }
}

/// Per-edge APE values for one subject; `None` marks an undefined entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ApeVector {
    values: Vec<Option<f64>>,
    region_ids: Vec<String>,
}

impl ApeVector {
    pub fn new(values: Vec<Option<f64>>, region_ids: Vec<String>) -> Result<Self> {
        let q = region_ids.len();
        if values.len() != crate::connectivity::edge_count(q) {
            return Err(Error::Length(values.len()));
        }
        Ok(Self { values, region_ids })
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }
}

/// One scored (subject, method, kind, scan length) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityRecord {
    pub subject_id: String,
    pub method: Method,
    pub kind: ReliabilityKind,
    pub scan_length: usize,
    pub ape: ApeVector,
}

/// `|est - ref| / |ref|` per edge; undefined where `|ref| < guard`.
pub fn ape(estimate: &EdgeVector, reference: &EdgeVector, guard: f64) -> Result<ApeVector> {
    if estimate.region_ids() != reference.region_ids() {
        return Err(Error::ShapeMismatch(
            "estimate and reference have different edge layouts".into(),
        ));
    }
    if guard.is_nan() || guard <= 0.0 {
        return Err(Error::OutOfRange(format!(
            "denominator guard must be positive, got {guard}"
        )));
    }
    let values = estimate
        .values()
        .iter()
        .zip(reference.values())
        .map(|(e, r)| {
            if r.abs() < guard {
                None
            } else {
                Some((e - r).abs() / r.abs())
            }
        })
        .collect();
    ApeVector::new(values, estimate.region_ids().to_vec())
}

/// One method's per-subject estimates at one scan length.
#[derive(Debug, Clone)]
pub struct EstimateSet {
    pub method: Method,
    pub scan_length: usize,
    /// `(subject_id, estimate)` pairs; order defines record order.
    pub estimates: Vec<(String, EdgeVector)>,
}

fn score_sets(
    sets: &[EstimateSet],
    references: &[(String, EdgeVector)],
    guard: f64,
    kind: ReliabilityKind,
) -> Result<Vec<ReliabilityRecord>> {
    let by_subject: BTreeMap<&str, &EdgeVector> = references
        .iter()
        .map(|(id, ev)| (id.as_str(), ev))
        .collect();
    let mut records = Vec::new();
    for set in sets {
        for (subject_id, estimate) in &set.estimates {
            let reference = by_subject
                .get(subject_id.as_str())
                .ok_or_else(|| Error::MissingReference(subject_id.clone()))?;
            records.push(ReliabilityRecord {
                subject_id: subject_id.clone(),
                method: set.method,
                kind,
                scan_length: set.scan_length,
                ape: ape(estimate, reference, guard)?,
            });
        }
    }
    Ok(records)
}

/// Score every estimate against the other visit's full-length raw
/// estimate. One record per (subject, method, scan length).
pub fn intersession_records(
    visit1_estimates: &[EstimateSet],
    visit2_full_raw: &[(String, EdgeVector)],
    guard: f64,
) -> Result<Vec<ReliabilityRecord>> {
    score_sets(visit1_estimates, visit2_full_raw, guard, ReliabilityKind::Intersession)
}

/// Score every estimate against the same visit's full-length raw
/// estimate.
pub fn endpoint_records(
    visit1_estimates: &[EstimateSet],
    visit1_full_raw: &[(String, EdgeVector)],
    guard: f64,
) -> Result<Vec<ReliabilityRecord>> {
    score_sets(visit1_estimates, visit1_full_raw, guard, ReliabilityKind::EndPoint)
}

/// Sorted-order median; `None` on an empty slice. Even counts take the
/// midpoint of the two central values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        Some(sorted[n / 2])
    } else {
        Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0)
    }
}

/// Undefined entries excluded while aggregating one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExclusionCounts {
    /// (subject, edge) APE entries that were undefined.
    pub edge_entries: usize,
    /// Edges whose every subject entry was undefined.
    pub edges: usize,
    /// Seeds with no defined incident edge median.
    pub seeds: usize,
}

/// Aggregated reliability for one (method, kind, scan length) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilitySummary {
    pub method: Method,
    pub kind: ReliabilityKind,
    pub scan_length: usize,
    pub region_ids: Vec<String>,
    /// Per-edge median APE over subjects, canonical edge order.
    pub edge_level: Vec<Option<f64>>,
    /// Per-seed median of the incident edge-level medians.
    pub seed_level: Vec<Option<f64>>,
    /// Median of the defined edge-level medians.
    pub omnibus: Option<f64>,
    pub n_subjects: usize,
    pub excluded: ExclusionCounts,
}

/// Aggregate the records matching `cell` into edge, seed, and omnibus
/// medians.
pub fn summarize(
    records: &[ReliabilityRecord],
    cell: (Method, ReliabilityKind, usize),
) -> Result<ReliabilitySummary> {
    let (method, kind, scan_length) = cell;
    let selected: Vec<&ReliabilityRecord> = records
        .iter()
        .filter(|r| r.method == method && r.kind == kind && r.scan_length == scan_length)
        .collect();
    let Some(first) = selected.first() else {
        return Err(Error::EmptyCell(format!(
            "{method}/{kind}/{scan_length}"
        )));
    };
    let region_ids = first.ape.region_ids().to_vec();
    let q = region_ids.len();
    let m = first.ape.values().len();
    for r in &selected {
        if r.ape.region_ids() != region_ids.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "subject {} has a different edge layout",
                r.subject_id
            )));
        }
    }
    let mut excluded = ExclusionCounts::default();
    let mut edge_level = Vec::with_capacity(m);
    for e in 0..m {
        let defined: Vec<f64> = selected
            .iter()
            .filter_map(|r| r.ape.values()[e])
            .collect();
        excluded.edge_entries += selected.len() - defined.len();
        let med = median(&defined);
        if med.is_none() {
            excluded.edges += 1;
        }
        edge_level.push(med);
    }
    let mut seed_level = Vec::with_capacity(q);
    for seed in 0..q {
        let incident: Vec<f64> = edge_iter(q)
            .enumerate()
            .filter(|(_, (a, b))| *a == seed || *b == seed)
            .filter_map(|(k, _)| edge_level[k])
            .collect();
        let med = median(&incident);
        if med.is_none() {
            excluded.seeds += 1;
        }
        seed_level.push(med);
    }
    let defined_edges: Vec<f64> = edge_level.iter().flatten().copied().collect();
    let omnibus = median(&defined_edges);
    Ok(ReliabilitySummary {
        method,
        kind,
        scan_length,
        region_ids,
        edge_level,
        seed_level,
        omnibus,
        n_subjects: selected.len(),
        excluded,
    })
}

/// Per-level percent change of `shrunk` relative to `raw`:
/// `100 * (shrunk - raw) / raw`. Negative values mean improvement.
/// Undefined where `raw` is zero or either side is undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct PercentChange {
    pub edge_level: Vec<Option<f64>>,
    pub seed_level: Vec<Option<f64>>,
    pub omnibus: Option<f64>,
}

pub fn percent_change(
    shrunk: &ReliabilitySummary,
    raw: &ReliabilitySummary,
) -> Result<PercentChange> {
    if shrunk.region_ids != raw.region_ids
        || shrunk.kind != raw.kind
        || shrunk.scan_length != raw.scan_length
    {
        return Err(Error::ShapeMismatch(
            "summaries cover different cells".into(),
        ));
    }
    let pc = |s: Option<f64>, r: Option<f64>| -> Option<f64> {
        match (s, r) {
            (Some(s), Some(r)) if r != 0.0 => Some(100.0 * (s - r) / r),
            _ => None,
        }
    };
    Ok(PercentChange {
        edge_level: shrunk
            .edge_level
            .iter()
            .zip(&raw.edge_level)
            .map(|(s, r)| pc(*s, *r))
            .collect(),
        seed_level: shrunk
            .seed_level
            .iter()
            .zip(&raw.seed_level)
            .map(|(s, r)| pc(*s, *r))
            .collect(),
        omnibus: pc(shrunk.omnibus, raw.omnibus),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format_float(v),
        None => "nan".into(),
    }
}

/// Write per-(subject, edge) records:
/// `subject_id,method,kind,scan_length,region_a,region_b,ape`.
pub fn write_records_csv(records: &[ReliabilityRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("subject_id,method,kind,scan_length,region_a,region_b,ape\n");
    for r in records {
        let q = r.ape.n_regions();
        for (k, (a, b)) in edge_iter(q).enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.subject_id,
                r.method,
                r.kind,
                r.scan_length,
                r.ape.region_ids()[a],
                r.ape.region_ids()[b],
                fmt_opt(r.ape.values()[k]),
            ));
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Read records written by [`write_records_csv`]. Consecutive rows with
/// the same (subject, method, kind, scan length) form one record; each
/// record's edges must arrive in canonical order.
pub fn read_records_csv(path: &Path) -> Result<Vec<ReliabilityRecord>> {
    const HEADER: &str = "subject_id,method,kind,scan_length,region_a,region_b,ape";
    let content = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let mut lines = content.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim_end_matches('\r'));
    if header != Some(HEADER) {
        return Err(Error::Schema {
            context: path.display().to_string(),
            message: format!("expected header {HEADER:?}, got {header:?}"),
        });
    }
    struct Group {
        subject_id: String,
        method: Method,
        kind: ReliabilityKind,
        scan_length: usize,
        pairs: Vec<(String, String)>,
        values: Vec<Option<f64>>,
    }
    let mut records = Vec::new();
    let mut group: Option<Group> = None;
    let flush = |g: Option<Group>, records: &mut Vec<ReliabilityRecord>| -> Result<()> {
        let Some(g) = g else { return Ok(()) };
        let q = crate::connectivity::region_count_for(g.pairs.len())?;
        let mut region_ids = Vec::with_capacity(q);
        region_ids.push(g.pairs[0].0.clone());
        for p in g.pairs.iter().take(q - 1) {
            region_ids.push(p.1.clone());
        }
        for (k, (a, b)) in edge_iter(q).enumerate() {
            if g.pairs[k].0 != region_ids[a] || g.pairs[k].1 != region_ids[b] {
                return Err(Error::Schema {
                    context: g.subject_id.clone(),
                    message: "record edges out of canonical order".into(),
                });
            }
        }
        records.push(ReliabilityRecord {
            subject_id: g.subject_id,
            method: g.method,
            kind: g.kind,
            scan_length: g.scan_length,
            ape: ApeVector::new(g.values, region_ids)?,
        });
        Ok(())
    };
    for (lineno, raw) in lines {
        let line = raw.trim_end_matches('\r');
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Schema {
                context: path.display().to_string(),
                message: format!("line {}: expected 7 fields, got {}", lineno + 1, fields.len()),
            });
        }
        let method: Method = fields[1].parse()?;
        let kind: ReliabilityKind = fields[2].parse()?;
        let scan_length: usize = fields[3].parse().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            column: 4,
            message: format!("{e}"),
        })?;
        let value = match fields[6].trim() {
            "nan" => None,
            s => {
                let v: f64 = s.parse().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    column: 7,
                    message: format!("{e}: {s:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        column: 7,
                    });
                }
                Some(v)
            }
        };
        let same = group.as_ref().is_some_and(|g| {
            g.subject_id == fields[0]
                && g.method == method
                && g.kind == kind
                && g.scan_length == scan_length
        });
        if !same {
            flush(group.take(), &mut records)?;
            group = Some(Group {
                subject_id: fields[0].to_string(),
                method,
                kind,
                scan_length,
                pairs: Vec::new(),
                values: Vec::new(),
            });
        }
        let g = group.as_mut().expect("group initialized above");
        g.pairs.push((fields[4].to_string(), fields[5].to_string()));
        g.values.push(value);
    }
    flush(group.take(), &mut records)?;
    Ok(records)
}

/// Write the edge-level summary: `region_a,region_b,median_ape`.
pub fn write_edge_summary_csv(summary: &ReliabilitySummary, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("region_a,region_b,median_ape\n");
    let q = summary.region_ids.len();
    for (k, (a, b)) in edge_iter(q).enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            summary.region_ids[a],
            summary.region_ids[b],
            fmt_opt(summary.edge_level[k]),
        ));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Write the seed-level summary: `region,median_ape`.
pub fn write_seed_summary_csv(summary: &ReliabilitySummary, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("region,median_ape\n");
    for (id, v) in summary.region_ids.iter().zip(&summary.seed_level) {
        out.push_str(&format!("{},{}\n", id, fmt_opt(*v)));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Write one omnibus row per summary:
/// `method,kind,scan_length,median_ape`.
pub fn write_omnibus_summary_csv(summaries: &[&ReliabilitySummary], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("method,kind,scan_length,median_ape\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.method,
            s.kind,
            s.scan_length,
            fmt_opt(s.omnibus),
        ));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}
