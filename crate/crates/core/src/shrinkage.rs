//! Variance-component estimation and empirical Bayes shrinkage of edge
//! estimates toward the group mean.
//!
//! Each edge value decomposes into a stable subject trait, a session
//! state that varies between visits, and sampling noise from the finite
//! scan. The shrinkage weight is the fraction of cross-subject variance
//! that is not trait:
//!
//! ```text
//! lambda = (sampling_var + state_var) / total_var
//! shrunk = lambda * group_mean + (1 - lambda) * subject
//! ```
//!
//! Two estimators produce the components. The oracle route needs two
//! visits per subject and attributes half the variance of the
//! visit-to-visit difference to sampling noise. The single-session route
//! needs one visit and reads sampling noise off the odd/even split
//! (whose halves share the session state) and session state off the
//! first/second split (whose halves do not).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::connectivity::{edge_iter, EdgeVector};
use crate::error::{Error, Result};
use crate::timeseries::format_float;

/// Per-edge variance decomposition. Components are non-negative and sum
/// to `total_var` up to rounding; `clamped` records that a negative
/// moment estimate was truncated to zero (with the shortfall folded into
/// the component estimated before it, so the sum still holds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    pub between_var: f64,
    pub sampling_var: f64,
    pub state_var: f64,
    pub total_var: f64,
    pub clamped: bool,
}

/// Shrinkage weight for one edge: the non-trait share of total variance.
/// A zero-variance edge gets `lambda = 0` (no shrinkage): every subject
/// already equals the group mean there, so there is nothing to correct.
pub fn lambda_for(c: &VarianceComponents) -> f64 {
    if c.total_var == 0.0 {
        0.0
    } else {
        ((c.sampling_var + c.state_var) / c.total_var).clamp(0.0, 1.0)
    }
}

/// Components for every edge of a cohort, in canonical edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentTable {
    region_ids: Vec<String>,
    components: Vec<VarianceComponents>,
}

impl ComponentTable {
    pub fn new(region_ids: Vec<String>, components: Vec<VarianceComponents>) -> Result<Self> {
        let q = region_ids.len();
        if q < 2 || components.len() != crate::connectivity::edge_count(q) {
            return Err(Error::Shape(format!(
                "{} components for {q} regions",
                components.len()
            )));
        }
        Ok(Self {
            region_ids,
            components,
        })
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn components(&self) -> &[VarianceComponents] {
        &self.components
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.components.iter().map(lambda_for).collect()
    }
}

/// Unbiased sample variance, summed left to right.
fn variance(xs: &[f64]) -> f64 {
    debug_assert!(xs.len() >= 2);
    let n = xs.len() as f64;
    let mut sum = 0.0;
    for x in xs {
        sum += x;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for x in xs {
        let d = x - mean;
        ss += d * d;
    }
    ss / (n - 1.0)
}

fn check_cohort(name: &str, cohort: &[EdgeVector], n: usize, layout: &EdgeVector) -> Result<()> {
    if cohort.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{name} has {} subjects, expected {n}",
            cohort.len()
        )));
    }
    for (i, ev) in cohort.iter().enumerate() {
        if ev.region_ids() != layout.region_ids() {
            return Err(Error::ShapeMismatch(format!(
                "{name} subject {i} has a different edge layout"
            )));
        }
    }
    Ok(())
}

/// Two-visit variance decomposition.
///
/// Per edge, with `v` the cross-subject unbiased variance:
///
/// ```text
/// total_var    = (v(visit1) + v(visit2)) / 2
/// sampling_var = v(visit2 - visit1) / 2
/// between_var  = total_var - sampling_var   (clamped at 0)
/// state_var    = 0
/// ```
///
/// Both visit estimates must come from the same scan length, otherwise
/// the difference variance mixes two noise scales. When clamping fires,
/// `sampling_var` is raised to `total_var` so the components still sum.
pub fn estimate_oracle_components(
    visit1: &[EdgeVector],
    visit2: &[EdgeVector],
) -> Result<ComponentTable> {
    let n = visit1.len();
    if n < 3 {
        return Err(Error::TooFewSubjects { n, min: 3 });
    }
    let layout = &visit1[0];
    check_cohort("visit1", visit1, n, layout)?;
    check_cohort("visit2", visit2, n, layout)?;
    let m = layout.n_edges();
    let mut components = Vec::with_capacity(m);
    for e in 0..m {
        let v1: Vec<f64> = visit1.iter().map(|s| s.values()[e]).collect();
        let v2: Vec<f64> = visit2.iter().map(|s| s.values()[e]).collect();
        let diffs: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| b - a).collect();
        let total = (variance(&v1) + variance(&v2)) / 2.0;
        let mut sampling = variance(&diffs) / 2.0;
        let raw_between = total - sampling;
        let clamped = raw_between < 0.0;
        let between = if clamped {
            sampling = total;
            0.0
        } else {
            raw_between
        };
        components.push(VarianceComponents {
            between_var: between,
            sampling_var: sampling,
            state_var: 0.0,
            total_var: total,
            clamped,
        });
    }
    ComponentTable::new(layout.region_ids().to_vec(), components)
}

/// One-visit variance decomposition from split-half estimates.
///
/// The odd/even halves of a scan sample the same session, so their
/// difference carries only sampling noise (at double variance per half):
///
/// ```text
/// sampling_var = v(odd - even) / 4
/// ```
///
/// The first/second halves additionally differ in session state:
///
/// ```text
/// state_var = v(first - second) / 2 - 2 * sampling_var   (clamped at 0)
/// ```
///
/// `total_var` is the cross-subject variance of the full-scan estimates
/// and `between_var` the remainder (clamped at 0, shortfall folded into
/// `state_var`, then `sampling_var` if needed).
pub fn estimate_single_session_components(
    full: &[EdgeVector],
    odd: &[EdgeVector],
    even: &[EdgeVector],
    first: &[EdgeVector],
    second: &[EdgeVector],
) -> Result<ComponentTable> {
    let n = full.len();
    if n < 2 {
        return Err(Error::TooFewSubjects { n, min: 2 });
    }
    let layout = &full[0];
    check_cohort("full", full, n, layout)?;
    check_cohort("odd", odd, n, layout)?;
    check_cohort("even", even, n, layout)?;
    check_cohort("first", first, n, layout)?;
    check_cohort("second", second, n, layout)?;
    let m = layout.n_edges();
    let mut components = Vec::with_capacity(m);
    for e in 0..m {
        let d_oe: Vec<f64> = odd
            .iter()
            .zip(even)
            .map(|(a, b)| a.values()[e] - b.values()[e])
            .collect();
        let d_fs: Vec<f64> = first
            .iter()
            .zip(second)
            .map(|(a, b)| a.values()[e] - b.values()[e])
            .collect();
        let w: Vec<f64> = full.iter().map(|s| s.values()[e]).collect();
        let mut sampling = variance(&d_oe) / 4.0;
        let raw_state = variance(&d_fs) / 2.0 - 2.0 * sampling;
        let mut state = raw_state.max(0.0);
        let total = variance(&w);
        let raw_between = total - sampling - state;
        let mut clamped = raw_state < 0.0;
        let between = if raw_between < 0.0 {
            clamped = true;
            if sampling <= total {
                state = total - sampling;
            } else {
                state = 0.0;
                sampling = total;
            }
            0.0
        } else {
            raw_between
        };
        components.push(VarianceComponents {
            between_var: between,
            sampling_var: sampling,
            state_var: state,
            total_var: total,
            clamped,
        });
    }
    ComponentTable::new(layout.region_ids().to_vec(), components)
}

/// Shrink one subject toward the group mean, edge by edge.
pub fn apply_shrinkage(
    subject: &EdgeVector,
    group: &EdgeVector,
    lambdas: &[f64],
) -> Result<EdgeVector> {
    if subject.region_ids() != group.region_ids() {
        return Err(Error::ShapeMismatch(
            "subject and group mean have different edge layouts".into(),
        ));
    }
    if lambdas.len() != subject.n_edges() {
        return Err(Error::ShapeMismatch(format!(
            "{} lambdas for {} edges",
            lambdas.len(),
            subject.n_edges()
        )));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::OutOfRange(format!(
            "shrinkage weight {bad} outside [0, 1]"
        )));
    }
    let values = subject
        .values()
        .iter()
        .zip(group.values())
        .zip(lambdas)
        .map(|((w, g), l)| l * g + (1.0 - l) * w)
        .collect();
    EdgeVector::from_values(values, subject.region_ids().to_vec())
}

/// Write a component table as CSV:
/// `region_a,region_b,between_var,sampling_var,state_var,total_var,lambda,clamped`.
pub fn write_components_csv(table: &ComponentTable, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(table.components().len() * 120);
    out.push_str("region_a,region_b,between_var,sampling_var,state_var,total_var,lambda,clamped\n");
    let q = table.region_ids().len();
    for (k, (a, b)) in edge_iter(q).enumerate() {
        let c = &table.components()[k];
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            table.region_ids()[a],
            table.region_ids()[b],
            format_float(c.between_var),
            format_float(c.sampling_var),
            format_float(c.state_var),
            format_float(c.total_var),
            format_float(lambda_for(c)),
            c.clamped,
        ));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Read a component table written by [`write_components_csv`].
pub fn read_components_csv(path: &Path) -> Result<ComponentTable> {
    const HEADER: &str =
        "region_a,region_b,between_var,sampling_var,state_var,total_var,lambda,clamped";
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
    let mut pairs = Vec::new();
    let mut components = Vec::new();
    for (lineno, raw) in lines {
        let line = raw.trim_end_matches('\r');
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Schema {
                context: path.display().to_string(),
                message: format!("line {}: expected 8 fields, got {}", lineno + 1, fields.len()),
            });
        }
        let num = |col: usize| -> Result<f64> {
            let v: f64 = fields[col].trim().parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                column: col + 1,
                message: format!("{e}: {:?}", fields[col].trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    column: col + 1,
                });
            }
            Ok(v)
        };
        let clamped = match fields[7].trim() {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    column: 8,
                    message: format!("expected true or false, got {other:?}"),
                })
            }
        };
        pairs.push((fields[0].trim().to_string(), fields[1].trim().to_string()));
        components.push(VarianceComponents {
            between_var: num(2)?,
            sampling_var: num(3)?,
            state_var: num(4)?,
            total_var: num(5)?,
            clamped,
        });
        // column 6 (lambda) is derived; re-derivation happens on use
        let _ = num(6)?;
    }
    let q = crate::connectivity::region_count_for(pairs.len())?;
    let mut region_ids = Vec::with_capacity(q);
    region_ids.push(pairs[0].0.clone());
    for p in pairs.iter().take(q - 1) {
        region_ids.push(p.1.clone());
    }
    for (k, (a, b)) in edge_iter(q).enumerate() {
        if pairs[k].0 != region_ids[a] || pairs[k].1 != region_ids[b] {
            return Err(Error::Schema {
                context: path.display().to_string(),
                message: format!("line {}: edges out of canonical order", k + 2),
            });
        }
    }
    ComponentTable::new(region_ids, components)
}
