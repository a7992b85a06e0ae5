//! Cohort preparation and the sweep over (method, kind, scan length)
//! cells.
//!
//! Two input routes produce the same intermediate form. A scan manifest
//! goes through the file pipeline: load each subject's series, optional
//! dual regression, truncate to each scan length, correlate, subsample.
//! A generative-params file skips the series stage entirely and draws
//! edge estimates straight from the additive model.
//!
//! Reference estimates are always raw and full-length: the same visit's
//! for end-point scoring, visit 2's for intersession scoring. Shrunk
//! estimates are scored against those same raw references.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use fconn::connectivity::{
    self, edge_iter, fisher_z_transform, group_mean, pearson_matrix, vectorize, EdgeVector,
};
use fconn::reliability::{
    self, endpoint_records, intersession_records, summarize, EstimateSet, Method,
    ReliabilityKind, ReliabilityRecord, ReliabilitySummary,
};
use fconn::shrinkage::{
    apply_shrinkage, estimate_oracle_components, estimate_single_session_components,
    write_components_csv, ComponentTable,
};
use fconn::simulator::{simulate_parameter_level, GenerativeParams};
use fconn::timeseries::{
    dual_regression_stage1, format_float, load_timeseries, truncate, ScanManifest, SpatialMaps,
    SubsampleScheme, TimeSeriesMatrix,
};

use crate::report::{CellReport, ConfigEcho, RunReport};

/// Which intermediate estimates the selected methods and kinds require.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub subsamples: bool,
    pub visit2: bool,
}

pub fn needs_for(methods: &[Method], kinds: &[ReliabilityKind]) -> Needs {
    Needs {
        subsamples: methods.contains(&Method::SingleSessionShrink),
        visit2: methods.contains(&Method::OracleShrink)
            || kinds.contains(&ReliabilityKind::Intersession),
    }
}

/// Per-(subject, scan length) visit-1 estimates. Subsample estimates are
/// present only when the single-session estimator needs them.
#[derive(Debug, Clone)]
pub struct SplitEstimates {
    pub full: EdgeVector,
    pub odd: Option<EdgeVector>,
    pub even: Option<EdgeVector>,
    pub first: Option<EdgeVector>,
    pub second: Option<EdgeVector>,
}

/// Everything the cell sweep consumes, independent of input route.
#[derive(Debug, Clone)]
pub struct PreparedCohort {
    pub subject_ids: Vec<String>,
    pub region_ids: Vec<String>,
    pub scan_lengths: Vec<usize>,
    /// `visit1[subject][length_idx]`
    pub visit1: Vec<Vec<SplitEstimates>>,
    /// `visit2_full[subject][length_idx]`, when visit 2 is in play.
    pub visit2_full: Option<Vec<Vec<EdgeVector>>>,
    /// Raw full-length visit-1 estimate per subject.
    pub endpoint_reference: Vec<EdgeVector>,
    /// Raw full-length visit-2 estimate per subject.
    pub intersession_reference: Option<Vec<EdgeVector>>,
}

fn maybe_z(ev: EdgeVector, fisher: bool) -> EdgeVector {
    if fisher {
        fisher_z_transform(&ev)
    } else {
        ev
    }
}

/// Vectorized correlation of one series, optionally Fisher-transformed.
pub fn correlate(ts: &TimeSeriesMatrix, fisher: bool) -> fconn::Result<EdgeVector> {
    Ok(maybe_z(vectorize(&pearson_matrix(ts)?), fisher))
}

struct SubjectPrep {
    visit1: Vec<SplitEstimates>,
    visit2_full: Option<Vec<EdgeVector>>,
    endpoint_reference: EdgeVector,
    intersession_reference: Option<EdgeVector>,
}

/// Load one manifest visit's series, running dual regression when maps
/// are supplied.
pub fn load_visit_series(
    manifest_subject: &fconn::timeseries::SubjectRecord,
    visit_id: u8,
    maps: Option<&SpatialMaps>,
) -> Result<TimeSeriesMatrix> {
    let subject_id = &manifest_subject.subject_id;
    let visit = manifest_subject.visit(visit_id).ok_or_else(|| {
        anyhow!(fconn::Error::MissingVisit {
            subject: subject_id.clone(),
            visit: visit_id,
        })
    })?;
    let series = load_timeseries(&visit.path, None)
        .with_context(|| format!("subject {subject_id}: loading visit {visit_id}"))?;
    let series = TimeSeriesMatrix::new(
        series.data().clone(),
        series.region_ids().to_vec(),
        visit.tr_seconds,
    )
    .with_context(|| format!("subject {subject_id}: visit {visit_id}"))?;
    match maps {
        Some(m) => dual_regression_stage1(series.data(), m, series.tr_seconds())
            .with_context(|| format!("subject {subject_id}: dual regression, visit {visit_id}")),
        None => Ok(series),
    }
}

fn prep_subject(
    subject: &fconn::timeseries::SubjectRecord,
    scan_lengths: &[usize],
    needs: &Needs,
    maps: Option<&SpatialMaps>,
    fisher: bool,
) -> Result<SubjectPrep> {
    let id = &subject.subject_id;
    let v1 = load_visit_series(subject, 1, maps)?;
    let endpoint_reference = correlate(&v1, fisher)
        .with_context(|| format!("subject {id}: full-length connectivity, visit 1"))?;
    let mut visit1 = Vec::with_capacity(scan_lengths.len());
    for &ell in scan_lengths {
        let truncated = truncate(&v1, ell)
            .with_context(|| format!("subject {id}: truncating visit 1 to {ell}"))?;
        let full = correlate(&truncated, fisher)
            .with_context(|| format!("subject {id}: connectivity at length {ell}"))?;
        let (odd, even, first, second) = if needs.subsamples {
            let (o, e) = fconn::timeseries::subsample(&truncated, SubsampleScheme::OddEven)
                .with_context(|| format!("subject {id}: odd/even split at length {ell}"))?;
            let (f, s) = fconn::timeseries::subsample(&truncated, SubsampleScheme::FirstSecondHalf)
                .with_context(|| format!("subject {id}: half split at length {ell}"))?;
            let ctx = |part: &str| format!("subject {id}: {part} connectivity at length {ell}");
            (
                Some(correlate(&o, fisher).with_context(|| ctx("odd"))?),
                Some(correlate(&e, fisher).with_context(|| ctx("even"))?),
                Some(correlate(&f, fisher).with_context(|| ctx("first-half"))?),
                Some(correlate(&s, fisher).with_context(|| ctx("second-half"))?),
            )
        } else {
            (None, None, None, None)
        };
        visit1.push(SplitEstimates {
            full,
            odd,
            even,
            first,
            second,
        });
    }
    let (visit2_full, intersession_reference) = if needs.visit2 {
        let v2 = load_visit_series(subject, 2, maps)?;
        let reference = correlate(&v2, fisher)
            .with_context(|| format!("subject {id}: full-length connectivity, visit 2"))?;
        let mut fulls = Vec::with_capacity(scan_lengths.len());
        for &ell in scan_lengths {
            let truncated = truncate(&v2, ell)
                .with_context(|| format!("subject {id}: truncating visit 2 to {ell}"))?;
            fulls.push(
                correlate(&truncated, fisher)
                    .with_context(|| format!("subject {id}: visit-2 connectivity at length {ell}"))?,
            );
        }
        (Some(fulls), Some(reference))
    } else {
        (None, None)
    };
    Ok(SubjectPrep {
        visit1,
        visit2_full,
        endpoint_reference,
        intersession_reference,
    })
}

/// Run the file pipeline for every subject in the manifest.
pub fn prepare_from_manifest(
    manifest: &ScanManifest,
    scan_lengths: &[usize],
    needs: &Needs,
    maps: Option<&SpatialMaps>,
    fisher: bool,
) -> Result<PreparedCohort> {
    if manifest.subjects.is_empty() {
        bail!("manifest lists no subjects");
    }
    let preps: Vec<Result<SubjectPrep>> = manifest
        .subjects
        .par_iter()
        .map(|s| prep_subject(s, scan_lengths, needs, maps, fisher))
        .collect();
    let mut subject_ids = Vec::new();
    let mut visit1 = Vec::new();
    let mut visit2_full = needs.visit2.then(Vec::new);
    let mut endpoint_reference = Vec::new();
    let mut intersession_reference = needs.visit2.then(Vec::new);
    let mut region_ids: Option<Vec<String>> = None;
    for (subject, prep) in manifest.subjects.iter().zip(preps) {
        let prep = prep?;
        let ids = prep.endpoint_reference.region_ids().to_vec();
        match &region_ids {
            None => region_ids = Some(ids),
            Some(expected) if *expected != ids => {
                return Err(anyhow!(fconn::Error::ShapeMismatch(format!(
                    "subject {} has regions {:?}, expected {:?}",
                    subject.subject_id, ids, expected
                ))));
            }
            _ => {}
        }
        subject_ids.push(subject.subject_id.clone());
        visit1.push(prep.visit1);
        endpoint_reference.push(prep.endpoint_reference);
        if let Some(v2) = &mut visit2_full {
            v2.push(prep.visit2_full.expect("visit 2 prepared when needed"));
        }
        if let Some(refs) = &mut intersession_reference {
            refs.push(prep.intersession_reference.expect("visit 2 prepared when needed"));
        }
    }
    Ok(PreparedCohort {
        subject_ids,
        region_ids: region_ids.expect("at least one subject"),
        scan_lengths: scan_lengths.to_vec(),
        visit1,
        visit2_full,
        endpoint_reference,
        intersession_reference,
    })
}

/// Draw a parameter-level cohort and reshape it for the sweep. The
/// full-session reference is the estimate at the largest scan length of
/// the grid.
pub fn prepare_from_params(
    params: &GenerativeParams,
    needs: &Needs,
    fisher: bool,
) -> Result<PreparedCohort> {
    let cohort = simulate_parameter_level(params)?;
    let n_lengths = params.scan_lengths.len();
    let last = n_lengths - 1;
    let mut visit1 = Vec::with_capacity(cohort.subject_ids.len());
    let mut visit2_full = needs.visit2.then(Vec::new);
    let mut endpoint_reference = Vec::with_capacity(cohort.subject_ids.len());
    let mut intersession_reference = needs.visit2.then(Vec::new);
    for visits in &cohort.estimates {
        let bundles = &visits[0];
        let mut splits = Vec::with_capacity(n_lengths);
        for b in bundles {
            splits.push(SplitEstimates {
                full: maybe_z(b.full.clone(), fisher),
                odd: Some(maybe_z(b.odd.clone(), fisher)),
                even: Some(maybe_z(b.even.clone(), fisher)),
                first: Some(maybe_z(b.first_half.clone(), fisher)),
                second: Some(maybe_z(b.second_half.clone(), fisher)),
            });
        }
        endpoint_reference.push(splits[last].full.clone());
        visit1.push(splits);
        if let Some(v2) = &mut visit2_full {
            let fulls: Vec<EdgeVector> = visits[1]
                .iter()
                .map(|b| maybe_z(b.full.clone(), fisher))
                .collect();
            if let Some(refs) = &mut intersession_reference {
                refs.push(fulls[last].clone());
            }
            v2.push(fulls);
        }
    }
    let region_ids = fconn::timeseries::default_region_ids(params.q);
    Ok(PreparedCohort {
        subject_ids: cohort.subject_ids,
        region_ids,
        scan_lengths: params.scan_lengths.clone(),
        visit1,
        visit2_full,
        endpoint_reference,
        intersession_reference,
    })
}

/// `(subject_id, estimate)` pairs in subject order.
pub type LabeledCohort = Vec<(String, EdgeVector)>;

/// Everything a sweep produces, before any file is written.
#[derive(Debug, Clone)]
pub struct SweepOutputs {
    pub records: Vec<ReliabilityRecord>,
    pub summaries: Vec<ReliabilitySummary>,
    /// `(method, scan_length, table)` for the shrinkage methods.
    pub components: Vec<(Method, usize, ComponentTable)>,
    /// Visit-1 group mean per scan length (when a shrinkage method ran).
    pub group_means: Vec<(usize, EdgeVector)>,
    /// Final per-subject estimates per (method, scan length).
    pub estimates: Vec<(Method, usize, LabeledCohort)>,
}

/// Pull one estimate flavor across subjects at one scan-length index.
pub fn column<'a>(
    cohort: &'a [Vec<SplitEstimates>],
    length_idx: usize,
    pick: impl Fn(&'a SplitEstimates) -> Option<&'a EdgeVector>,
) -> Result<Vec<EdgeVector>> {
    cohort
        .iter()
        .map(|per_subject| {
            pick(&per_subject[length_idx])
                .cloned()
                .ok_or_else(|| anyhow!("subsample estimates missing for the single-session route"))
        })
        .collect()
}

/// Compute estimates, variance components, reliability records, and
/// summaries for every selected cell.
pub fn run_cells(
    prepared: &PreparedCohort,
    methods: &[Method],
    kinds: &[ReliabilityKind],
    guard: f64,
) -> Result<SweepOutputs> {
    let n_lengths = prepared.scan_lengths.len();
    let wants_shrinkage = methods.iter().any(|m| *m != Method::Raw);
    let mut group_means = Vec::new();
    if wants_shrinkage {
        for j in 0..n_lengths {
            let fulls = column(&prepared.visit1, j, |s| Some(&s.full))?;
            let gm = group_mean(&fulls).context("group mean over visit-1 estimates")?;
            group_means.push((prepared.scan_lengths[j], gm));
        }
    }
    let mut components = Vec::new();
    let mut estimates: Vec<(Method, usize, LabeledCohort)> = Vec::new();
    for &method in methods {
        for j in 0..n_lengths {
            let ell = prepared.scan_lengths[j];
            let fulls = column(&prepared.visit1, j, |s| Some(&s.full))?;
            let final_estimates: Vec<EdgeVector> = match method {
                Method::Raw => fulls,
                Method::OracleShrink => {
                    let v2 = prepared
                        .visit2_full
                        .as_ref()
                        .context("oracle shrinkage requires visit-2 estimates")?;
                    let v2_fulls: Vec<EdgeVector> =
                        v2.iter().map(|per| per[j].clone()).collect();
                    let table = estimate_oracle_components(&fulls, &v2_fulls)
                        .with_context(|| format!("oracle components at length {ell}"))?;
                    let lambdas = table.lambdas();
                    let gm = &group_means[j].1;
                    let shrunk = fulls
                        .iter()
                        .map(|w| apply_shrinkage(w, gm, &lambdas))
                        .collect::<fconn::Result<Vec<_>>>()
                        .with_context(|| format!("oracle shrinkage at length {ell}"))?;
                    components.push((method, ell, table));
                    shrunk
                }
                Method::SingleSessionShrink => {
                    let odd = column(&prepared.visit1, j, |s| s.odd.as_ref())?;
                    let even = column(&prepared.visit1, j, |s| s.even.as_ref())?;
                    let first = column(&prepared.visit1, j, |s| s.first.as_ref())?;
                    let second = column(&prepared.visit1, j, |s| s.second.as_ref())?;
                    let table =
                        estimate_single_session_components(&fulls, &odd, &even, &first, &second)
                            .with_context(|| format!("single-session components at length {ell}"))?;
                    let lambdas = table.lambdas();
                    let gm = &group_means[j].1;
                    let shrunk = fulls
                        .iter()
                        .map(|w| apply_shrinkage(w, gm, &lambdas))
                        .collect::<fconn::Result<Vec<_>>>()
                        .with_context(|| format!("single-session shrinkage at length {ell}"))?;
                    components.push((method, ell, table));
                    shrunk
                }
            };
            let labeled: Vec<(String, EdgeVector)> = prepared
                .subject_ids
                .iter()
                .cloned()
                .zip(final_estimates)
                .collect();
            estimates.push((method, ell, labeled));
        }
    }

    let endpoint_refs: Vec<(String, EdgeVector)> = prepared
        .subject_ids
        .iter()
        .cloned()
        .zip(prepared.endpoint_reference.iter().cloned())
        .collect();
    let intersession_refs: Option<Vec<(String, EdgeVector)>> =
        prepared.intersession_reference.as_ref().map(|refs| {
            prepared
                .subject_ids
                .iter()
                .cloned()
                .zip(refs.iter().cloned())
                .collect()
        });

    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for &method in methods {
        let sets: Vec<EstimateSet> = estimates
            .iter()
            .filter(|(m, _, _)| *m == method)
            .map(|(_, ell, labeled)| EstimateSet {
                method,
                scan_length: *ell,
                estimates: labeled.clone(),
            })
            .collect();
        for &kind in kinds {
            let cell_records = match kind {
                ReliabilityKind::Intersession => {
                    let refs = intersession_refs
                        .as_ref()
                        .context("intersession scoring requires visit-2 estimates")?;
                    intersession_records(&sets, refs, guard)?
                }
                ReliabilityKind::EndPoint => endpoint_records(&sets, &endpoint_refs, guard)?,
            };
            records.extend(cell_records);
            for &ell in &prepared.scan_lengths {
                summaries.push(summarize(&records, (method, kind, ell))?);
            }
        }
    }
    Ok(SweepOutputs {
        records,
        summaries,
        components,
        group_means,
        estimates,
    })
}

/// Write `subject_id,region_a,region_b,value` rows for a labeled cohort.
pub fn write_cohort_csv(rows: &[(String, EdgeVector)], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("subject_id,region_a,region_b,value\n");
    for (id, ev) in rows {
        let q = ev.n_regions();
        for (k, (a, b)) in edge_iter(q).enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                id,
                ev.region_ids()[a],
                ev.region_ids()[b],
                format_float(ev.values()[k])
            ));
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Read a labeled cohort back (rows grouped by subject, canonical edge
/// order within each subject).
pub fn read_cohort_csv(path: &Path) -> Result<LabeledCohort> {
    // subject id plus the (region_a, region_b) and value columns seen so far
    type Pending = (String, Vec<(String, String)>, Vec<f64>);
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next();
    if header != Some("subject_id,region_a,region_b,value") {
        bail!("{}: unexpected header {header:?}", path.display());
    }
    let mut rows: LabeledCohort = Vec::new();
    let mut current: Option<Pending> = None;
    let flush = |cur: Option<Pending>, rows: &mut LabeledCohort| -> Result<()> {
        let Some((id, pairs, values)) = cur else {
            return Ok(());
        };
        let q = connectivity::region_count_for(pairs.len())
            .with_context(|| format!("subject {id}: bad edge count {}", pairs.len()))?;
        let mut region_ids = Vec::with_capacity(q);
        region_ids.push(pairs[0].0.clone());
        for p in pairs.iter().take(q - 1) {
            region_ids.push(p.1.clone());
        }
        rows.push((id, EdgeVector::from_values(values, region_ids)?));
        Ok(())
    };
    for line in lines {
        let f: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if f.len() != 4 {
            bail!("{}: malformed row {line:?}", path.display());
        }
        let value: f64 = f[3]
            .parse()
            .with_context(|| format!("{}: bad value {:?}", path.display(), f[3]))?;
        let same = current.as_ref().is_some_and(|(id, _, _)| id == f[0]);
        if !same {
            flush(current.take(), &mut rows)?;
            current = Some((f[0].to_string(), Vec::new(), Vec::new()));
        }
        let (_, pairs, values) = current.as_mut().expect("initialized above");
        pairs.push((f[1].to_string(), f[2].to_string()));
        values.push(value);
    }
    flush(current.take(), &mut rows)?;
    Ok(rows)
}

fn cell_dir_name(method: Method, kind: ReliabilityKind, ell: usize) -> String {
    format!("{}_{}_{}", method, kind, ell)
}

/// Write the full output tree for a finished sweep and return its
/// report.
pub fn write_sweep_tree(
    out_dir: &Path,
    prepared: &PreparedCohort,
    outputs: &SweepOutputs,
    echo: ConfigEcho,
) -> Result<RunReport> {
    fs::create_dir_all(out_dir.join("cells"))?;
    fs::create_dir_all(out_dir.join("estimates"))?;
    if !outputs.components.is_empty() {
        fs::create_dir_all(out_dir.join("components"))?;
    }
    if !outputs.group_means.is_empty() {
        fs::create_dir_all(out_dir.join("group_means"))?;
    }
    fs::create_dir_all(out_dir.join("references"))?;

    let records_file = "records.csv".to_string();
    reliability::write_records_csv(&outputs.records, &out_dir.join(&records_file))?;
    let omnibus_file = "omnibus.csv".to_string();
    let summary_refs: Vec<&ReliabilitySummary> = outputs.summaries.iter().collect();
    reliability::write_omnibus_summary_csv(&summary_refs, &out_dir.join(&omnibus_file))?;

    for (ell, gm) in &outputs.group_means {
        connectivity::write_edge_csv(gm, &out_dir.join(format!("group_means/len{ell}.csv")))?;
    }
    for (method, ell, table) in &outputs.components {
        write_components_csv(
            table,
            &out_dir.join(format!("components/{method}_len{ell}.csv")),
        )?;
    }

    let endpoint_refs: Vec<(String, EdgeVector)> = prepared
        .subject_ids
        .iter()
        .cloned()
        .zip(prepared.endpoint_reference.iter().cloned())
        .collect();
    write_cohort_csv(&endpoint_refs, &out_dir.join("references/end_point.csv"))?;
    if let Some(refs) = &prepared.intersession_reference {
        let labeled: Vec<(String, EdgeVector)> = prepared
            .subject_ids
            .iter()
            .cloned()
            .zip(refs.iter().cloned())
            .collect();
        write_cohort_csv(&labeled, &out_dir.join("references/intersession.csv"))?;
    }

    let mut estimate_files: Vec<(Method, usize, String)> = Vec::new();
    for (method, ell, labeled) in &outputs.estimates {
        let rel = format!("estimates/{method}_len{ell}.csv");
        write_cohort_csv(labeled, &out_dir.join(&rel))?;
        estimate_files.push((*method, *ell, rel));
    }

    let mut cells = Vec::new();
    for summary in &outputs.summaries {
        let dir_rel = format!(
            "cells/{}",
            cell_dir_name(summary.method, summary.kind, summary.scan_length)
        );
        fs::create_dir_all(out_dir.join(&dir_rel))?;
        let edge_rel = format!("{dir_rel}/edge_summary.csv");
        let seed_rel = format!("{dir_rel}/seed_summary.csv");
        reliability::write_edge_summary_csv(summary, &out_dir.join(&edge_rel))?;
        reliability::write_seed_summary_csv(summary, &out_dir.join(&seed_rel))?;
        let components = outputs
            .components
            .iter()
            .find(|(m, ell, _)| *m == summary.method && *ell == summary.scan_length)
            .map(|(m, ell, _)| format!("components/{m}_len{ell}.csv"));
        let estimates = estimate_files
            .iter()
            .find(|(m, ell, _)| *m == summary.method && *ell == summary.scan_length)
            .map(|(_, _, rel)| rel.clone())
            .context("estimates written for every cell")?;
        cells.push(CellReport {
            method: summary.method.to_string(),
            kind: summary.kind.to_string(),
            scan_length: summary.scan_length,
            omnibus_median_ape: summary.omnibus,
            n_subjects: summary.n_subjects,
            excluded: summary.excluded,
            edge_summary: edge_rel,
            seed_summary: seed_rel,
            components,
            estimates,
        });
    }

    let report = RunReport {
        config: echo,
        subject_ids: prepared.subject_ids.clone(),
        region_ids: prepared.region_ids.clone(),
        records_file,
        omnibus_file,
        cells,
    };
    report.save(out_dir)?;
    Ok(report)
}
