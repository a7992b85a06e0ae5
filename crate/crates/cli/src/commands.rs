//! Subcommand implementations. Argument parsing stays in the binary;
//! these functions take plain typed options so they are callable from
//! tests without a process boundary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use fconn::connectivity::write_edge_csv;
use fconn::reliability::{
    self, summarize, Method, ReliabilityKind, ReliabilitySummary,
};
use fconn::shrinkage::{
    apply_shrinkage, estimate_oracle_components, estimate_single_session_components,
    write_components_csv,
};
use fconn::simulator::{
    simulate_timeseries_level, t_total_from_toml_str, write_ground_truth, GenerativeParams,
};
use fconn::timeseries::{
    load_manifest, manifest_to_toml, save_timeseries, truncate, ScanManifest, SpatialMaps,
    SubjectRecord, VisitRecord,
};

use crate::config::{default_scan_lengths, sniff_input, InputKind, RunConfig};
use crate::pipeline::{
    column, needs_for, prepare_from_manifest, prepare_from_params, run_cells, write_cohort_csv,
    write_sweep_tree, Needs, PreparedCohort,
};
use crate::report::{write_long_report, ConfigEcho, RunReport, REPORT_FILE};

/// Claim the output directory: it must not exist yet or must be an
/// empty directory. The returned guard removes whatever the run wrote
/// unless `disarm` is called, so failed runs leave no partial tree.
pub struct OutputDirGuard {
    path: PathBuf,
    created: bool,
    armed: bool,
}

impl OutputDirGuard {
    pub fn claim(path: &Path) -> Result<Self> {
        let created = if path.exists() {
            if !path.is_dir() {
                bail!("output path {} exists and is not a directory", path.display());
            }
            if fs::read_dir(path)?.next().is_some() {
                bail!("output directory {} is not empty", path.display());
            }
            false
        } else {
            fs::create_dir_all(path)
                .with_context(|| format!("creating output directory {}", path.display()))?;
            true
        };
        Ok(OutputDirGuard {
            path: path.to_path_buf(),
            created,
            armed: true,
        })
    }

    pub fn disarm(mut self) {
        self.armed = false;
    }
}

impl Drop for OutputDirGuard {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        if self.created {
            let _ = fs::remove_dir_all(&self.path);
        } else if let Ok(entries) = fs::read_dir(&self.path) {
            for entry in entries.flatten() {
                let p = entry.path();
                let _ = if p.is_dir() {
                    fs::remove_dir_all(&p)
                } else {
                    fs::remove_file(&p)
                };
            }
        }
    }
}

/// Run `body` on a dedicated pool of `threads` workers, or on the
/// global pool when unset.
pub fn with_thread_pool<T: Send>(
    threads: Option<usize>,
    body: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .context("building thread pool")?
            .install(body),
        None => body(),
    }
}

fn load_params_file(path: &Path) -> Result<GenerativeParams> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading params {}", path.display()))?;
    GenerativeParams::from_toml_str(&text)
        .with_context(|| format!("params file {}", path.display()))
}

fn load_maps_opt(maps: Option<&Path>) -> Result<Option<SpatialMaps>> {
    maps.map(|p| SpatialMaps::load(p).with_context(|| format!("loading maps {}", p.display())))
        .transpose()
}

/// Generate a synthetic cohort of time series: per-subject-visit CSVs,
/// a manifest pointing at them, and a ground-truth document.
pub fn cmd_simulate(
    params_path: &Path,
    output_dir: &Path,
    seed: Option<u64>,
    t_total: Option<usize>,
    threads: Option<usize>,
) -> Result<()> {
    let mut params = load_params_file(params_path)?;
    if let Some(s) = seed {
        params.seed = s;
    }
    let text = fs::read_to_string(params_path)?;
    let t_total = t_total
        .or(t_total_from_toml_str(&text)?)
        .unwrap_or_else(|| *params.scan_lengths.last().expect("validated nonempty"));
    let guard = OutputDirGuard::claim(output_dir)?;
    with_thread_pool(threads, || {
        let cohort = simulate_timeseries_level(&params, t_total)?;
        let mut subjects = Vec::with_capacity(cohort.len());
        for (subject_id, visits) in &cohort {
            let mut visit_records = Vec::with_capacity(2);
            for (v, ts) in visits.iter().enumerate() {
                let name = format!("{subject_id}_visit{}.csv", v + 1);
                save_timeseries(ts, &output_dir.join(&name), false)?;
                visit_records.push(VisitRecord {
                    visit_id: (v + 1) as u8,
                    path: PathBuf::from(name),
                    n_volumes: t_total,
                    tr_seconds: 1.0,
                });
            }
            subjects.push(SubjectRecord {
                subject_id: subject_id.clone(),
                visits: visit_records,
            });
        }
        let manifest = ScanManifest { subjects };
        fs::write(output_dir.join("manifest.toml"), manifest_to_toml(&manifest)?)?;
        write_ground_truth(&params, &output_dir.join("ground_truth.json"))?;
        Ok(())
    })?;
    guard.disarm();
    Ok(())
}

/// Compute per-subject-visit connectivity estimates from a manifest.
/// Without `--scan-lengths` each full series is used as-is; with a grid
/// every subject-visit gets one file per length.
pub fn cmd_connectivity(cfg: &RunConfig) -> Result<()> {
    if sniff_input(&cfg.input)? != InputKind::Manifest {
        bail!("connectivity needs a scan manifest, not a params file");
    }
    let manifest = load_manifest(&cfg.input).map_err(anyhow::Error::from)?;
    let maps = load_maps_opt(cfg.maps.as_deref())?;
    let guard = OutputDirGuard::claim(&cfg.output_dir)?;
    with_thread_pool(cfg.threads, || {
        for subject in &manifest.subjects {
            for visit in &subject.visits {
                let series = crate::pipeline::load_visit_series(subject, visit.visit_id, maps.as_ref())?;
                let id = &subject.subject_id;
                let v = visit.visit_id;
                match &cfg.scan_lengths {
                    None => {
                        let ev = crate::pipeline::correlate(&series, cfg.fisher_z)
                            .with_context(|| format!("subject {id}: visit {v}"))?;
                        write_edge_csv(&ev, &cfg.output_dir.join(format!("{id}_visit{v}_conn.csv")))?;
                    }
                    Some(lengths) => {
                        for &ell in lengths {
                            let truncated = truncate(&series, ell)
                                .with_context(|| format!("subject {id}: visit {v} at length {ell}"))?;
                            let ev = crate::pipeline::correlate(&truncated, cfg.fisher_z)
                                .with_context(|| format!("subject {id}: visit {v} at length {ell}"))?;
                            write_edge_csv(
                                &ev,
                                &cfg.output_dir.join(format!("{id}_visit{v}_len{ell}_conn.csv")),
                            )?;
                        }
                    }
                }
            }
        }
        Ok(())
    })?;
    guard.disarm();
    Ok(())
}

fn single_length_cohort(
    cfg: &RunConfig,
    scan_length: Option<usize>,
    needs: &Needs,
) -> Result<(PreparedCohort, usize)> {
    match sniff_input(&cfg.input)? {
        InputKind::Manifest => {
            let manifest = load_manifest(&cfg.input).map_err(anyhow::Error::from)?;
            let maps = load_maps_opt(cfg.maps.as_deref())?;
            let ell = match scan_length {
                Some(l) => l,
                None => full_series_length(&manifest)?,
            };
            let prepared =
                prepare_from_manifest(&manifest, &[ell], needs, maps.as_ref(), cfg.fisher_z)?;
            Ok((prepared, 0))
        }
        InputKind::Params => {
            if cfg.maps.is_some() {
                bail!("spatial maps apply to time-series inputs, not params files");
            }
            let mut params = load_params_file(&cfg.input)?;
            if let Some(s) = cfg.seed {
                params.seed = s;
            }
            let ell = scan_length.unwrap_or(*params.scan_lengths.last().expect("nonempty"));
            let idx = params
                .scan_lengths
                .iter()
                .position(|&l| l == ell)
                .ok_or_else(|| {
                    anyhow!(
                        "scan length {ell} is not in the params grid {:?}",
                        params.scan_lengths
                    )
                })?;
            let prepared = prepare_from_params(&params, needs, cfg.fisher_z)?;
            Ok((prepared, idx))
        }
    }
}

fn full_series_length(manifest: &ScanManifest) -> Result<usize> {
    let mut lengths = manifest
        .subjects
        .iter()
        .flat_map(|s| s.visits.iter().map(|v| v.n_volumes));
    let first = lengths.next().context("manifest lists no scans")?;
    if lengths.any(|l| l != first) {
        bail!("scans differ in length; pass --scan-length explicitly");
    }
    Ok(first)
}

/// Estimate variance components at one scan length and write shrunk
/// estimates alongside the raw ones.
pub fn cmd_shrink(cfg: &RunConfig, method: Method, scan_length: Option<usize>) -> Result<()> {
    if method == Method::Raw {
        bail!("raw is not a shrinkage method; pick single_session_shrink or oracle_shrink");
    }
    let needs = Needs {
        subsamples: method == Method::SingleSessionShrink,
        visit2: method == Method::OracleShrink,
    };
    let guard = OutputDirGuard::claim(&cfg.output_dir)?;
    with_thread_pool(cfg.threads, || {
        let (prepared, j) = single_length_cohort(cfg, scan_length, &needs)?;
        let ell = prepared.scan_lengths[j];
        let fulls = column(&prepared.visit1, j, |s| Some(&s.full))?;
        let table = match method {
            Method::OracleShrink => {
                let v2 = prepared
                    .visit2_full
                    .as_ref()
                    .expect("visit 2 prepared for the oracle route");
                let v2_fulls: Vec<_> = v2.iter().map(|per| per[j].clone()).collect();
                estimate_oracle_components(&fulls, &v2_fulls)
                    .with_context(|| format!("oracle components at length {ell}"))?
            }
            Method::SingleSessionShrink => {
                let odd = column(&prepared.visit1, j, |s| s.odd.as_ref())?;
                let even = column(&prepared.visit1, j, |s| s.even.as_ref())?;
                let first = column(&prepared.visit1, j, |s| s.first.as_ref())?;
                let second = column(&prepared.visit1, j, |s| s.second.as_ref())?;
                estimate_single_session_components(&fulls, &odd, &even, &first, &second)
                    .with_context(|| format!("single-session components at length {ell}"))?
            }
            Method::Raw => unreachable!("rejected above"),
        };
        let gm = fconn::connectivity::group_mean(&fulls)?;
        let lambdas = table.lambdas();
        let shrunk: Vec<(String, fconn::connectivity::EdgeVector)> = prepared
            .subject_ids
            .iter()
            .zip(&fulls)
            .map(|(id, w)| Ok((id.clone(), apply_shrinkage(w, &gm, &lambdas)?)))
            .collect::<Result<_>>()?;
        let raw: Vec<_> = prepared
            .subject_ids
            .iter()
            .cloned()
            .zip(fulls.iter().cloned())
            .collect();
        write_components_csv(&table, &cfg.output_dir.join("components.csv"))?;
        write_edge_csv(&gm, &cfg.output_dir.join("group_mean.csv"))?;
        write_cohort_csv(&raw, &cfg.output_dir.join("raw.csv"))?;
        write_cohort_csv(&shrunk, &cfg.output_dir.join("shrunk.csv"))?;
        Ok(())
    })?;
    guard.disarm();
    Ok(())
}

/// Score one (method, kind, scan length) cell and write its records and
/// summaries.
pub fn cmd_reliability(
    cfg: &RunConfig,
    method: Method,
    kind: ReliabilityKind,
    scan_length: Option<usize>,
) -> Result<()> {
    let methods = [method];
    let kinds = [kind];
    let needs = needs_for(&methods, &kinds);
    let guard = OutputDirGuard::claim(&cfg.output_dir)?;
    let omnibus = with_thread_pool(cfg.threads, || {
        let (prepared, j) = single_length_cohort(cfg, scan_length, &needs)?;
        let prepared = restrict_to_length(&prepared, j);
        let outputs = run_cells(&prepared, &methods, &kinds, cfg.guard)?;
        reliability::write_records_csv(&outputs.records, &cfg.output_dir.join("records.csv"))?;
        let summary = &outputs.summaries[0];
        reliability::write_edge_summary_csv(summary, &cfg.output_dir.join("edge_summary.csv"))?;
        reliability::write_seed_summary_csv(summary, &cfg.output_dir.join("seed_summary.csv"))?;
        reliability::write_omnibus_summary_csv(&[summary], &cfg.output_dir.join("omnibus.csv"))?;
        Ok(summary.omnibus)
    })?;
    guard.disarm();
    match omnibus {
        Some(v) => println!("omnibus_median_ape {}", fconn::timeseries::format_float(v)),
        None => println!("omnibus_median_ape nan"),
    }
    Ok(())
}

/// Keep only one scan length of a prepared cohort; references are
/// untouched.
fn restrict_to_length(prepared: &PreparedCohort, j: usize) -> PreparedCohort {
    PreparedCohort {
        subject_ids: prepared.subject_ids.clone(),
        region_ids: prepared.region_ids.clone(),
        scan_lengths: vec![prepared.scan_lengths[j]],
        visit1: prepared
            .visit1
            .iter()
            .map(|per| vec![per[j].clone()])
            .collect(),
        visit2_full: prepared
            .visit2_full
            .as_ref()
            .map(|v2| v2.iter().map(|per| vec![per[j].clone()]).collect()),
        endpoint_reference: prepared.endpoint_reference.clone(),
        intersession_reference: prepared.intersession_reference.clone(),
    }
}

/// The full pipeline: prepare the cohort, run every selected cell, and
/// write the output tree plus `report.json`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<RunReport> {
    let started = Instant::now();
    let needs = needs_for(&cfg.methods, &cfg.reliability_kinds);
    let guard = OutputDirGuard::claim(&cfg.output_dir)?;
    let report = with_thread_pool(cfg.threads, || {
        let prepared = match sniff_input(&cfg.input)? {
            InputKind::Manifest => {
                let manifest = load_manifest(&cfg.input).map_err(anyhow::Error::from)?;
                let maps = load_maps_opt(cfg.maps.as_deref())?;
                let lengths = cfg
                    .scan_lengths
                    .clone()
                    .unwrap_or_else(default_scan_lengths);
                prepare_from_manifest(&manifest, &lengths, &needs, maps.as_ref(), cfg.fisher_z)?
            }
            InputKind::Params => {
                if cfg.maps.is_some() {
                    bail!("spatial maps apply to time-series inputs, not params files");
                }
                let mut params = load_params_file(&cfg.input)?;
                if let Some(s) = cfg.seed {
                    params.seed = s;
                }
                if let Some(lengths) = &cfg.scan_lengths {
                    params.scan_lengths = lengths.clone();
                    params.validate().map_err(anyhow::Error::from)?;
                }
                prepare_from_params(&params, &needs, cfg.fisher_z)?
            }
        };
        let outputs = run_cells(&prepared, &cfg.methods, &cfg.reliability_kinds, cfg.guard)?;
        let echo = ConfigEcho {
            input: cfg.input.display().to_string(),
            scan_lengths: prepared.scan_lengths.clone(),
            methods: cfg.methods.iter().map(|m| m.to_string()).collect(),
            reliability_kinds: cfg.reliability_kinds.iter().map(|k| k.to_string()).collect(),
            guard: cfg.guard,
            fisher_z: cfg.fisher_z,
            maps: cfg.maps.as_ref().map(|p| p.display().to_string()),
            seed: cfg.seed,
        };
        write_sweep_tree(&cfg.output_dir, &prepared, &outputs, echo)
    })?;
    guard.disarm();
    eprintln!(
        "sweep: {} cells, {} subjects, {:.2}s",
        report.cells.len(),
        report.subject_ids.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(report)
}

/// Flatten a finished run into one long-format CSV for plotting.
pub fn cmd_report(run_dir: &Path, output: Option<&Path>) -> Result<PathBuf> {
    if !run_dir.join(REPORT_FILE).exists() {
        return Err(anyhow!(fconn::Error::MissingRun(format!(
            "{} has no {REPORT_FILE}",
            run_dir.display()
        ))));
    }
    let default_out = run_dir.join("report_long.csv");
    let out = output.unwrap_or(&default_out);
    write_long_report(run_dir, out)?;
    Ok(out.to_path_buf())
}

/// Recompute a cell's omnibus median from its emitted records; the
/// pipeline composition check used by tests and doctors.
pub fn recompute_omnibus(
    run_dir: &Path,
    method: Method,
    kind: ReliabilityKind,
    scan_length: usize,
) -> Result<ReliabilitySummary> {
    let report = RunReport::load(run_dir)?;
    let records = reliability::read_records_csv(&run_dir.join(&report.records_file))?;
    summarize(&records, (method, kind, scan_length)).map_err(anyhow::Error::from)
}
