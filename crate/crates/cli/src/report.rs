//! The machine-readable run report and the long-format export built
//! from it.
//!
//! `report.json` is written at the end of a sweep and lists every output
//! file plus per-cell omnibus values and exclusion counts. It echoes the
//! settings that determine output content; volatile settings (thread
//! count, output location) and wall-clock timings are deliberately kept
//! out so that identical runs produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use fconn::reliability::ExclusionCounts;

pub const REPORT_FILE: &str = "report.json";

/// Content-determining settings echoed into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub input: String,
    pub scan_lengths: Vec<usize>,
    pub methods: Vec<String>,
    pub reliability_kinds: Vec<String>,
    pub guard: f64,
    pub fisher_z: bool,
    pub maps: Option<String>,
    pub seed: Option<u64>,
}

/// One (method, kind, scan length) cell with its output files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub method: String,
    pub kind: String,
    pub scan_length: usize,
    pub omnibus_median_ape: Option<f64>,
    pub n_subjects: usize,
    pub excluded: ExclusionCounts,
    /// Paths relative to the run directory.
    pub edge_summary: String,
    pub seed_summary: String,
    pub components: Option<String>,
    pub estimates: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ConfigEcho,
    pub subject_ids: Vec<String>,
    pub region_ids: Vec<String>,
    pub records_file: String,
    pub omnibus_file: String,
    pub cells: Vec<CellReport>,
}

impl RunReport {
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).context("serializing run report")?;
        fs::write(run_dir.join(REPORT_FILE), text + "\n")
            .with_context(|| format!("writing {}", run_dir.join(REPORT_FILE).display()))?;
        Ok(())
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(REPORT_FILE);
        if !path.is_file() {
            return Err(fconn::Error::MissingRun(run_dir.display().to_string()).into());
        }
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Every file the report references, relative to the run directory.
    pub fn referenced_files(&self) -> Vec<PathBuf> {
        let mut files = vec![
            PathBuf::from(&self.records_file),
            PathBuf::from(&self.omnibus_file),
        ];
        for cell in &self.cells {
            files.push(PathBuf::from(&cell.edge_summary));
            files.push(PathBuf::from(&cell.seed_summary));
            if let Some(c) = &cell.components {
                files.push(PathBuf::from(c));
            }
            files.push(PathBuf::from(&cell.estimates));
        }
        files
    }
}

/// Split a CSV line from one of our own writers (no quoting, no embedded
/// commas).
fn fields(line: &str) -> Vec<&str> {
    line.trim_end_matches('\r').split(',').collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Render the long-format table `method,kind,scan_length,level,key,value`
/// from a completed run. Values are passed through verbatim from the
/// summary CSVs.
pub fn long_report(run_dir: &Path) -> Result<String> {
    let report = RunReport::load(run_dir)?;
    let mut out = String::new();
    out.push_str("method,kind,scan_length,level,key,value\n");

    let omnibus_lines = read_lines(&run_dir.join(&report.omnibus_file))?;
    let omnibus_value = |method: &str, kind: &str, ell: usize| -> Result<String> {
        for line in omnibus_lines.iter().skip(1) {
            let f = fields(line);
            if f.len() == 4 && f[0] == method && f[1] == kind && f[2] == ell.to_string() {
                return Ok(f[3].to_string());
            }
        }
        anyhow::bail!("omnibus row for {method}/{kind}/{ell} missing from {}", report.omnibus_file);
    };

    for cell in &report.cells {
        let prefix = format!("{},{},{}", cell.method, cell.kind, cell.scan_length);
        let omni = omnibus_value(&cell.method, &cell.kind, cell.scan_length)?;
        out.push_str(&format!("{prefix},omnibus,all,{omni}\n"));
        for line in read_lines(&run_dir.join(&cell.edge_summary))?.iter().skip(1) {
            let f = fields(line);
            if f.len() != 3 {
                anyhow::bail!("malformed edge summary row in {}: {line:?}", cell.edge_summary);
            }
            out.push_str(&format!("{prefix},edge,{}:{},{}\n", f[0], f[1], f[2]));
        }
        for line in read_lines(&run_dir.join(&cell.seed_summary))?.iter().skip(1) {
            let f = fields(line);
            if f.len() != 2 {
                anyhow::bail!("malformed seed summary row in {}: {line:?}", cell.seed_summary);
            }
            out.push_str(&format!("{prefix},seed,{},{}\n", f[0], f[1]));
        }
    }
    Ok(out)
}

/// Write [`long_report`] to `output`.
pub fn write_long_report(run_dir: &Path, output: &Path) -> Result<()> {
    let text = long_report(run_dir)?;
    fs::write(output, text).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}
