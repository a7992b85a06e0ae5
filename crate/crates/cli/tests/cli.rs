//! End-to-end checks of the subcommands, through the library entry
//! points and (for exit behavior) the compiled binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fconn::reliability::{Method, ReliabilityKind, DEFAULT_GUARD};
use fconn::shrinkage::read_components_csv;
use fconn::timeseries::{
    default_region_ids, save_timeseries, ScanManifest, SubjectRecord, TimeSeriesMatrix,
    VisitRecord,
};
use fconn_cli::commands;
use fconn_cli::config::RunConfig;
use fconn_cli::report::RunReport;

fn base_config(input: PathBuf, output_dir: PathBuf) -> RunConfig {
    RunConfig {
        input,
        scan_lengths: None,
        methods: Method::ALL.to_vec(),
        reliability_kinds: ReliabilityKind::ALL.to_vec(),
        guard: DEFAULT_GUARD,
        fisher_z: false,
        maps: None,
        output_dir,
        seed: None,
        threads: None,
    }
}

#[allow(clippy::too_many_arguments)]
fn write_params(
    path: &Path,
    n: usize,
    q: usize,
    between: f64,
    state: f64,
    coeff: f64,
    lengths: &[usize],
    seed: u64,
) {
    let lengths = lengths
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    fs::write(
        path,
        format!(
            "n_subjects = {n}\nq = {q}\nmu = 0.4\nbetween_var = {between}\n\
             state_var = {state}\nsampling_coeff = {coeff}\nscan_lengths = [{lengths}]\nseed = {seed}\n"
        ),
    )
    .unwrap();
}

/// A manifest of random (uniform) series, written under `dir`.
fn write_manifest(dir: &Path, n_subjects: usize, t: usize, q: usize, visits: u8, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = Vec::new();
    for i in 1..=n_subjects {
        let subject_id = format!("s{i:04}");
        let mut visit_records = Vec::new();
        for v in 1..=visits {
            let data = DMatrix::from_fn(t, q, |_, _| rng.random::<f64>() - 0.5);
            let ts = TimeSeriesMatrix::new(data, default_region_ids(q), 0.72).unwrap();
            let name = format!("{subject_id}_v{v}.csv");
            save_timeseries(&ts, &dir.join(&name), false).unwrap();
            visit_records.push(VisitRecord {
                visit_id: v,
                path: PathBuf::from(name),
                n_volumes: t,
                tr_seconds: 0.72,
            });
        }
        subjects.push(SubjectRecord {
            subject_id,
            visits: visit_records,
        });
    }
    let manifest = ScanManifest { subjects };
    let path = dir.join("manifest.toml");
    fs::write(&path, fconn::timeseries::manifest_to_toml(&manifest).unwrap()).unwrap();
    path
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn simulate_writes_manifest_cohort_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.toml");
    write_params(&params, 4, 3, 0.02, 0.0, 2.0, &[40], 7);
    let out = dir.path().join("cohort");
    commands::cmd_simulate(&params, &out, None, None, None).unwrap();
    let csvs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            (name.ends_with(".csv") && name.contains("_visit")).then_some(name)
        })
        .collect();
    assert_eq!(csvs.len(), 8, "4 subjects x 2 visits: {csvs:?}");
    assert!(out.join("manifest.toml").exists());
    assert!(out.join("ground_truth.json").exists());
    let manifest = fconn::timeseries::load_manifest(&out.join("manifest.toml")).unwrap();
    assert_eq!(manifest.subjects.len(), 4);
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("ground_truth.json")).unwrap()).unwrap();
    assert_eq!(truth["params"]["n_subjects"], 4);
    assert!(truth["lambda_by_length"].as_array().unwrap().len() == 1);
}

#[test]
fn simulate_same_seed_gives_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.toml");
    write_params(&params, 3, 3, 0.02, 0.0, 2.0, &[30], 11);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    commands::cmd_simulate(&params, &a, None, None, Some(1)).unwrap();
    commands::cmd_simulate(&params, &b, None, None, Some(4)).unwrap();
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn simulate_binary_rejects_negative_variance_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.toml");
    write_params(&params, 3, 3, 0.02, -0.5, 2.0, &[30], 11);
    let out = Command::new(env!("CARGO_BIN_EXE_fconn"))
        .args([
            "simulate",
            "--input",
            params.to_str().unwrap(),
            "--output-dir",
            dir.path().join("cohort").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("state_var"), "stderr was: {stderr}");
    assert!(!dir.path().join("cohort").exists(), "failed run left outputs");
}

#[test]
fn sweep_single_subject_full_length_endpoint_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), 1, 40, 3, 1, 21);
    let mut cfg = base_config(manifest, dir.path().join("out"));
    cfg.scan_lengths = Some(vec![40]);
    cfg.methods = vec![Method::Raw];
    cfg.reliability_kinds = vec![ReliabilityKind::EndPoint];
    let report = commands::cmd_sweep(&cfg).unwrap();
    assert_eq!(report.cells.len(), 1);
    assert_eq!(report.cells[0].omnibus_median_ape, Some(0.0));
    let omnibus = fs::read_to_string(dir.path().join("out/omnibus.csv")).unwrap();
    let mut lines = omnibus.lines();
    assert_eq!(lines.next(), Some("method,kind,scan_length,median_ape"));
    let row = lines.next().unwrap();
    let value: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(value, 0.0);
    assert!(row.starts_with("raw,end_point,40,"));
}

#[test]
fn sweep_oracle_lambda_median_tracks_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.toml");
    // between 0.04, state 0.02, c/l = 0.02 at l=300: true lambda = 0.5
    write_params(&params, 1000, 3, 0.04, 0.02, 6.0, &[300], 31);
    let mut cfg = base_config(params, dir.path().join("out"));
    cfg.methods = vec![Method::OracleShrink];
    cfg.reliability_kinds = vec![ReliabilityKind::Intersession];
    commands::cmd_sweep(&cfg).unwrap();
    let table = read_components_csv(&dir.path().join("out/components/oracle_shrink_len300.csv")).unwrap();
    let mut lambdas = table.lambdas();
    lambdas.sort_by(f64::total_cmp);
    let median = lambdas[lambdas.len() / 2];
    assert!(
        (median - 0.5).abs() < 0.1,
        "oracle lambda median {median} not within 0.1 of 0.5"
    );
}

#[test]
fn report_renders_one_omnibus_row_per_cell_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.toml");
    let grid: Vec<usize> = (1..=8).map(|k| k * 300).collect();
    write_params(&params, 8, 3, 0.02, 0.005, 3.0, &grid, 41);
    let mut cfg = base_config(params, dir.path().join("out"));
    cfg.methods = vec![Method::Raw, Method::OracleShrink];
    commands::cmd_sweep(&cfg).unwrap();
    let out = commands::cmd_report(&dir.path().join("out"), None).unwrap();
    let long = fs::read_to_string(&out).unwrap();
    let omnibus_rows: Vec<&str> = long
        .lines()
        .filter(|l| l.split(',').nth(4) == Some("all"))
        .collect();
    assert_eq!(omnibus_rows.len(), 2 * 2 * 8, "rows: {omnibus_rows:#?}");
    // every long-format omnibus value appears verbatim in omnibus.csv
    let source = fs::read_to_string(dir.path().join("out/omnibus.csv")).unwrap();
    for row in &omnibus_rows {
        let f: Vec<&str> = row.split(',').collect();
        let expected = format!("{},{},{},{}", f[0], f[1], f[2], f[5]);
        assert!(
            source.lines().any(|l| l == expected),
            "no source row {expected:?}"
        );
    }
}

#[test]
fn report_missing_run_dir_is_missing_run() {
    let dir = tempfile::tempdir().unwrap();
    let err = commands::cmd_report(&dir.path().join("nope"), None).unwrap_err();
    assert!(matches!(
        err.downcast_ref::<fconn::Error>(),
        Some(fconn::Error::MissingRun(_))
    ));
}

#[test]
fn sweep_omnibus_recomputable_from_emitted_records() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.toml");
    write_params(&params, 6, 3, 0.02, 0.005, 3.0, &[100, 200], 51);
    let cfg = base_config(params, dir.path().join("out"));
    let report = commands::cmd_sweep(&cfg).unwrap();
    assert_eq!(report.cells.len(), 3 * 2 * 2);
    for cell in &report.cells {
        let summary = commands::recompute_omnibus(
            &dir.path().join("out"),
            cell.method.parse().unwrap(),
            cell.kind.parse().unwrap(),
            cell.scan_length,
        )
        .unwrap();
        assert_eq!(
            summary.omnibus, cell.omnibus_median_ape,
            "cell {}/{}/{} disagrees after re-reading records",
            cell.method, cell.kind, cell.scan_length
        );
    }
}

#[test]
fn connectivity_writes_per_visit_edge_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), 2, 40, 3, 2, 61);
    let mut cfg = base_config(manifest, dir.path().join("conn"));
    cfg.scan_lengths = Some(vec![20, 40]);
    commands::cmd_connectivity(&cfg).unwrap();
    for subject in ["s0001", "s0002"] {
        for visit in 1..=2 {
            for ell in [20, 40] {
                let p = dir
                    .path()
                    .join(format!("conn/{subject}_visit{visit}_len{ell}_conn.csv"));
                let ev = fconn::connectivity::read_edge_csv(&p).unwrap();
                assert_eq!(ev.n_regions(), 3);
            }
        }
    }
}

#[test]
fn shrink_writes_components_and_cohorts() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.toml");
    write_params(&params, 20, 3, 0.02, 0.005, 3.0, &[120], 71);
    let cfg = base_config(params, dir.path().join("shrunk"));
    commands::cmd_shrink(&cfg, Method::SingleSessionShrink, None).unwrap();
    let table = read_components_csv(&dir.path().join("shrunk/components.csv")).unwrap();
    assert_eq!(table.components().len(), 3);
    let shrunk = fconn_cli::pipeline::read_cohort_csv(&dir.path().join("shrunk/shrunk.csv")).unwrap();
    assert_eq!(shrunk.len(), 20);
    assert!(dir.path().join("shrunk/group_mean.csv").exists());
    assert!(dir.path().join("shrunk/raw.csv").exists());
}

#[test]
fn reliability_scores_one_cell() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), 3, 40, 3, 2, 81);
    let cfg = base_config(manifest, dir.path().join("rel"));
    commands::cmd_reliability(&cfg, Method::Raw, ReliabilityKind::Intersession, Some(20)).unwrap();
    let records =
        fconn::reliability::read_records_csv(&dir.path().join("rel/records.csv")).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records
        .iter()
        .all(|r| r.kind == ReliabilityKind::Intersession && r.scan_length == 20));
    let omnibus = fs::read_to_string(dir.path().join("rel/omnibus.csv")).unwrap();
    assert_eq!(omnibus.lines().count(), 2);
}

#[test]
fn binary_runs_sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.toml");
    write_params(&params, 6, 3, 0.02, 0.005, 3.0, &[100, 200], 91);
    let out_dir = dir.path().join("run");
    let sweep = Command::new(env!("CARGO_BIN_EXE_fconn"))
        .args([
            "sweep",
            "--input",
            params.to_str().unwrap(),
            "--output-dir",
            out_dir.to_str().unwrap(),
            "--methods",
            "raw,single_session_shrink",
            "--reliability-kinds",
            "end_point",
            "--threads",
            "2",
        ])
        .output()
        .unwrap();
    assert!(
        sweep.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&sweep.stderr)
    );
    let report = RunReport::load(&out_dir).unwrap();
    // 2 methods, 1 scan length, 2 kinds
    assert_eq!(report.cells.len(), 4);
    for file in report.referenced_files() {
        assert!(out_dir.join(&file).exists(), "missing {}", file.display());
    }
    let rep = Command::new(env!("CARGO_BIN_EXE_fconn"))
        .args(["report", "--run-dir", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(rep.status.success());
    assert!(out_dir.join("report_long.csv").exists());
}

#[test]
fn config_file_drives_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.toml");
    write_params(&params, 5, 3, 0.02, 0.005, 3.0, &[100], 101);
    fs::write(
        dir.path().join("run.toml"),
        "input = \"params.toml\"\nmethods = [\"raw\"]\nreliability_kinds = [\"end_point\"]\noutput_dir = \"cfg_run\"\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fconn"))
        .args([
            "sweep",
            "--config",
            dir.path().join("run.toml").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = RunReport::load(&dir.path().join("cfg_run")).unwrap();
    assert_eq!(report.cells.len(), 1);
    assert_eq!(report.config.methods, vec!["raw".to_string()]);
}
