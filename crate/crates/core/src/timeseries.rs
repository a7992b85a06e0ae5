//! Loading, validation, truncation, subsampling, and dual regression of
//! per-subject multivariate time series.
//!
//! A time series is a `T x Q` matrix: `T` samples (volumes) by `Q` regions.
//! The on-disk format is a headerless CSV of decimal values, one row per
//! volume, written with 17 significant digits so that a save/load round
//! trip reproduces every `f64` bit-exactly. A header row with region ids
//! can be enabled explicitly.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue threshold below which a Gram matrix is treated as
/// singular.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Format a value with 17 significant digits (bit-exact round trip).
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Default region ids `r1..rQ` for files without a header.
pub fn default_region_ids(q: usize) -> Vec<String> {
    (1..=q).map(|i| format!("r{i}")).collect()
}

/// Component ids `c1..cQ` for dual-regression outputs.
pub fn component_ids(q: usize) -> Vec<String> {
    (1..=q).map(|i| format!("c{i}")).collect()
}

/// One subject-visit's regional time courses.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesMatrix {
    data: DMatrix<f64>,
    region_ids: Vec<String>,
    tr_seconds: f64,
}

impl TimeSeriesMatrix {
    /// Wrap a `T x Q` matrix. Requires `T >= 2`, `Q >= 2`, finite entries,
    /// one region id per column, and a positive sampling interval.
    pub fn new(data: DMatrix<f64>, region_ids: Vec<String>, tr_seconds: f64) -> Result<Self> {
        if data.nrows() < 2 || data.ncols() < 2 {
            return Err(Error::Shape(format!(
                "time series must be at least 2x2, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if region_ids.len() != data.ncols() {
            return Err(Error::Shape(format!(
                "{} region ids for {} columns",
                region_ids.len(),
                data.ncols()
            )));
        }
        if !tr_seconds.is_finite() || tr_seconds <= 0.0 {
            return Err(Error::Shape(format!("non-positive tr_seconds {tr_seconds}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("time series contains non-finite values".into()));
        }
        Ok(Self {
            data,
            region_ids,
            tr_seconds,
        })
    }

    /// Number of samples (rows).
    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    /// Number of regions (columns).
    pub fn n_regions(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn tr_seconds(&self) -> f64 {
        self.tr_seconds
    }
}

/// How to split a series into two equal-size subsamples.
///
/// `OddEven` interleaves (rows 1,3,5,... versus 2,4,6,... in 1-based
/// order); `FirstSecondHalf` takes the leading and trailing halves. For
/// odd `T` the final row is dropped so both halves have exactly `T/2`
/// rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsampleScheme {
    OddEven,
    FirstSecondHalf,
}

/// 0-based row index sets selected by `scheme` for a series of `t` rows.
pub fn subsample_indices(t: usize, scheme: SubsampleScheme) -> Result<(Vec<usize>, Vec<usize>)> {
    if t < 4 {
        return Err(Error::OutOfRange(format!(
            "subsampling needs at least 4 samples, got {t}"
        )));
    }
    let half = t / 2;
    let sets = match scheme {
        SubsampleScheme::OddEven => (
            (0..half).map(|i| 2 * i).collect(),
            (0..half).map(|i| 2 * i + 1).collect(),
        ),
        SubsampleScheme::FirstSecondHalf => ((0..half).collect(), (half..2 * half).collect()),
    };
    Ok(sets)
}

/// First `ell` rows of `ts`; region ids and sampling interval unchanged.
pub fn truncate(ts: &TimeSeriesMatrix, ell: usize) -> Result<TimeSeriesMatrix> {
    let t = ts.n_samples();
    if ell < 2 || ell > t {
        return Err(Error::OutOfRange(format!(
            "scan length {ell} outside [2, {t}]"
        )));
    }
    let data = ts.data().rows(0, ell).into_owned();
    TimeSeriesMatrix::new(data, ts.region_ids().to_vec(), ts.tr_seconds())
}

/// Split `ts` into two disjoint subsamples of `T/2` rows each.
pub fn subsample(
    ts: &TimeSeriesMatrix,
    scheme: SubsampleScheme,
) -> Result<(TimeSeriesMatrix, TimeSeriesMatrix)> {
    let (a, b) = subsample_indices(ts.n_samples(), scheme)?;
    let pick = |idx: &[usize]| -> Result<TimeSeriesMatrix> {
        let data = DMatrix::from_fn(idx.len(), ts.n_regions(), |r, c| ts.data()[(idx[r], c)]);
        TimeSeriesMatrix::new(data, ts.region_ids().to_vec(), ts.tr_seconds())
    };
    Ok((pick(&a)?, pick(&b)?))
}

/// Group-level spatial maps used as regression predictors: `V` locations
/// by `Q` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMaps {
    maps: DMatrix<f64>,
}

impl SpatialMaps {
    pub fn new(maps: DMatrix<f64>) -> Result<Self> {
        if maps.ncols() < 1 || maps.nrows() < maps.ncols() {
            return Err(Error::Shape(format!(
                "spatial maps need V >= Q >= 1, got V={} Q={}",
                maps.nrows(),
                maps.ncols()
            )));
        }
        if maps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("spatial maps contain non-finite values".into()));
        }
        Ok(Self { maps })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (data, _) = load_matrix_csv(path, None, false)?;
        Self::new(data)
    }

    pub fn n_locations(&self) -> usize {
        self.maps.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.maps.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.maps
    }
}

/// Per-time-point least squares of `data` rows on the map columns.
///
/// For each row `x_t` of the `T x V` input, solves `min_b ||x_t - M b||^2`
/// and stacks the coefficient vectors into a `T x Q` series, i.e. the
/// result equals `data * M * (M^T M)^-1`.
pub fn dual_regression_stage1(
    data: &DMatrix<f64>,
    maps: &SpatialMaps,
    tr_seconds: f64,
) -> Result<TimeSeriesMatrix> {
    if data.ncols() != maps.n_locations() {
        return Err(Error::ShapeMismatch(format!(
            "data has {} locations, maps have {}",
            data.ncols(),
            maps.n_locations()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("regression input contains non-finite values".into()));
    }
    let m = maps.matrix();
    let gram = m.transpose() * m;
    let eig = SymmetricEigen::new(gram);
    let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if max_ev.is_nan() || max_ev <= 0.0 || min_ev < RANK_TOLERANCE * max_ev {
        return Err(Error::RankDeficient(format!(
            "gram matrix eigenvalue ratio {:.3e} below {RANK_TOLERANCE:.0e}",
            min_ev / max_ev
        )));
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let gram_inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    let coeffs = data * m * gram_inv;
    TimeSeriesMatrix::new(coeffs, component_ids(maps.n_components()), tr_seconds)
}

fn strip_cr(line: &str) -> &str {
    line.strip_suffix('\r').unwrap_or(line)
}

/// Parse a numeric CSV into a matrix. Returns the matrix and the header
/// ids when `has_header` is set.
fn load_matrix_csv(
    path: &Path,
    expected_q: Option<usize>,
    has_header: bool,
) -> Result<(DMatrix<f64>, Option<Vec<String>>)> {
    let content = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut header: Option<Vec<String>> = None;
    let mut q: Option<usize> = None;
    for (lineno, raw) in content.lines().enumerate() {
        let line = strip_cr(raw);
        if has_header && lineno == 0 {
            let ids: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            q = Some(ids.len());
            header = Some(ids);
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match q {
            None => q = Some(fields.len()),
            Some(qv) if fields.len() != qv => {
                return Err(Error::Shape(format!(
                    "{}:{}: row has {} fields, expected {qv}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(fields.len());
        for (col, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                column: col + 1,
                message: format!("{e}: {:?}", field.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    column: col + 1,
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    let t = rows.len();
    let qv = q.unwrap_or(0);
    if let Some(expected) = expected_q {
        if qv != expected {
            return Err(Error::Shape(format!(
                "{}: has {qv} columns, expected {expected}",
                path.display()
            )));
        }
    }
    if t == 0 || qv == 0 {
        return Err(Error::Shape(format!("{}: empty file", path.display())));
    }
    let data = DMatrix::from_fn(t, qv, |r, c| rows[r][c]);
    Ok((data, header))
}

/// Load a headerless time-series CSV. `tr_seconds` defaults to 1.
pub fn load_timeseries(path: &Path, expected_q: Option<usize>) -> Result<TimeSeriesMatrix> {
    load_timeseries_opts(path, expected_q, false, 1.0)
}

pub fn load_timeseries_opts(
    path: &Path,
    expected_q: Option<usize>,
    has_header: bool,
    tr_seconds: f64,
) -> Result<TimeSeriesMatrix> {
    let (data, header) = load_matrix_csv(path, expected_q, has_header)?;
    let ids = header.unwrap_or_else(|| default_region_ids(data.ncols()));
    TimeSeriesMatrix::new(data, ids, tr_seconds)
}

/// Write a time series as CSV with LF line endings and 17 significant
/// digits per value.
pub fn save_timeseries(ts: &TimeSeriesMatrix, path: &Path, write_header: bool) -> Result<()> {
    let mut out = Vec::with_capacity(ts.n_samples() * ts.n_regions() * 26);
    if write_header {
        out.extend_from_slice(ts.region_ids().join(",").as_bytes());
        out.push(b'\n');
    }
    for r in 0..ts.n_samples() {
        for c in 0..ts.n_regions() {
            if c > 0 {
                out.push(b',');
            }
            out.extend_from_slice(format_float(ts.data()[(r, c)]).as_bytes());
        }
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// One listed scan: which file, how many volumes, at what sampling
/// interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub visit_id: u8,
    pub path: PathBuf,
    pub n_volumes: usize,
    pub tr_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub visits: Vec<VisitRecord>,
}

impl SubjectRecord {
    pub fn visit(&self, visit_id: u8) -> Option<&VisitRecord> {
        self.visits.iter().find(|v| v.visit_id == visit_id)
    }
}

/// The cohort's scan inventory: one or two visits per subject, each
/// pointing at a time-series CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanManifest {
    pub subjects: Vec<SubjectRecord>,
}

impl ScanManifest {
    pub fn subject(&self, subject_id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == subject_id)
    }
}

fn count_csv_rows(path: &Path) -> Result<usize> {
    let content = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    Ok(content.lines().count())
}

/// Load and validate a manifest. Relative scan paths are resolved against
/// the manifest's directory; every referenced file must exist and its row
/// count must match the declared `n_volumes`.
pub fn load_manifest(path: &Path) -> Result<ScanManifest> {
    let content = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let mut manifest: ScanManifest = toml::from_str(&content).map_err(|e| Error::Schema {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen_subjects = BTreeSet::new();
    for subject in &mut manifest.subjects {
        if !seen_subjects.insert(subject.subject_id.clone()) {
            return Err(Error::DuplicateId(subject.subject_id.clone()));
        }
        if subject.visits.is_empty() {
            return Err(Error::Schema {
                context: path.display().to_string(),
                message: format!("subject {} has no visits", subject.subject_id),
            });
        }
        let mut seen_visits = BTreeSet::new();
        for visit in &mut subject.visits {
            if visit.visit_id != 1 && visit.visit_id != 2 {
                return Err(Error::Schema {
                    context: path.display().to_string(),
                    message: format!(
                        "subject {} visit_id {} not in {{1, 2}}",
                        subject.subject_id, visit.visit_id
                    ),
                });
            }
            if !seen_visits.insert(visit.visit_id) {
                return Err(Error::DuplicateId(format!(
                    "{} visit {}",
                    subject.subject_id, visit.visit_id
                )));
            }
            if !visit.tr_seconds.is_finite() || visit.tr_seconds <= 0.0 {
                return Err(Error::Schema {
                    context: path.display().to_string(),
                    message: format!(
                        "subject {} visit {}: non-positive tr_seconds",
                        subject.subject_id, visit.visit_id
                    ),
                });
            }
            if visit.path.is_relative() {
                visit.path = base.join(&visit.path);
            }
            let rows = count_csv_rows(&visit.path)?;
            if rows != visit.n_volumes {
                return Err(Error::Schema {
                    context: path.display().to_string(),
                    message: format!(
                        "subject {} visit {}: {} declares {} volumes, file has {rows} rows",
                        subject.subject_id,
                        visit.visit_id,
                        visit.path.display(),
                        visit.n_volumes
                    ),
                });
            }
        }
    }
    Ok(manifest)
}

/// Serialize a manifest to TOML (paths written as given).
pub fn manifest_to_toml(manifest: &ScanManifest) -> Result<String> {
    toml::to_string_pretty(manifest).map_err(|e| Error::Schema {
        context: "manifest".into(),
        message: e.to_string(),
    })
}
