//! Run configuration: defaults, config file, and flag precedence.
//!
//! Settings resolve in three layers: built-in defaults, then the TOML
//! config file (`--config`), then explicit command-line flags. Each
//! layer overrides only the fields it actually sets.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use fconn::reliability::{Method, ReliabilityKind, DEFAULT_GUARD};

/// Scan-length grid used when neither config nor flags choose one
/// (manifest inputs only; params inputs carry their own grid).
pub fn default_scan_lengths() -> Vec<usize> {
    (1..=8).map(|k| k * 300).collect()
}

/// Fully resolved sweep configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: PathBuf,
    /// `None` means: take the grid from the params file, or the default
    /// grid for manifest inputs.
    pub scan_lengths: Option<Vec<usize>>,
    pub methods: Vec<Method>,
    pub reliability_kinds: Vec<ReliabilityKind>,
    pub guard: f64,
    pub fisher_z: bool,
    pub maps: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

/// Unresolved overrides from one layer (config file or flags).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub scan_lengths: Option<Vec<usize>>,
    pub methods: Option<Vec<Method>>,
    pub reliability_kinds: Option<Vec<ReliabilityKind>>,
    pub guard: Option<f64>,
    pub fisher_z: Option<bool>,
    pub maps: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    input: Option<PathBuf>,
    scan_lengths: Option<Vec<usize>>,
    methods: Option<Vec<String>>,
    reliability_kinds: Option<Vec<String>>,
    guard: Option<f64>,
    fisher_z: Option<bool>,
    maps: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
}

fn parse_list<T: FromStr>(field: &str, items: &[String]) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    items
        .iter()
        .map(|s| {
            s.parse::<T>()
                .with_context(|| format!("config field {field}: bad value {s:?}"))
        })
        .collect()
}

/// Read one override layer from a TOML config file. Paths inside the
/// file are taken relative to the file's directory.
pub fn load_config_file(path: &Path) -> Result<Overrides> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let raw: ConfigFile = toml::from_str(&text)
        .with_context(|| format!("parsing config file {}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let rebase = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
    Ok(Overrides {
        input: raw.input.map(rebase),
        scan_lengths: raw.scan_lengths,
        methods: raw
            .methods
            .as_deref()
            .map(|m| parse_list("methods", m))
            .transpose()?,
        reliability_kinds: raw
            .reliability_kinds
            .as_deref()
            .map(|k| parse_list("reliability_kinds", k))
            .transpose()?,
        guard: raw.guard,
        fisher_z: raw.fisher_z,
        maps: raw.maps.map(rebase),
        output_dir: raw.output_dir.map(rebase),
        seed: raw.seed,
        threads: raw.threads,
    })
}

/// Apply defaults, then each override layer in order, and validate.
pub fn resolve(layers: &[Overrides]) -> Result<RunConfig> {
    let mut input = None;
    let mut scan_lengths = None;
    let mut methods = Method::ALL.to_vec();
    let mut reliability_kinds = ReliabilityKind::ALL.to_vec();
    let mut guard = DEFAULT_GUARD;
    let mut fisher_z = false;
    let mut maps = None;
    let mut output_dir = PathBuf::from("fconn_out");
    let mut seed = None;
    let mut threads = None;
    for layer in layers {
        if let Some(v) = &layer.input {
            input = Some(v.clone());
        }
        if let Some(v) = &layer.scan_lengths {
            scan_lengths = Some(v.clone());
        }
        if let Some(v) = &layer.methods {
            methods = v.clone();
        }
        if let Some(v) = &layer.reliability_kinds {
            reliability_kinds = v.clone();
        }
        if let Some(v) = layer.guard {
            guard = v;
        }
        if let Some(v) = layer.fisher_z {
            fisher_z = v;
        }
        if let Some(v) = &layer.maps {
            maps = Some(v.clone());
        }
        if let Some(v) = &layer.output_dir {
            output_dir = v.clone();
        }
        if let Some(v) = layer.seed {
            seed = Some(v);
        }
        if let Some(v) = layer.threads {
            threads = Some(v);
        }
    }
    let Some(input) = input else {
        bail!("no input set: pass --input or put `input` in the config file");
    };
    if let Some(lengths) = &scan_lengths {
        if lengths.is_empty() {
            bail!("scan_lengths must not be empty");
        }
        for w in lengths.windows(2) {
            if w[1] <= w[0] {
                bail!("scan_lengths must be strictly increasing, got {} after {}", w[1], w[0]);
            }
        }
        if let Some(&first) = lengths.first() {
            if first < 2 {
                bail!("scan lengths must be >= 2, got {first}");
            }
        }
    }
    if methods.is_empty() {
        bail!("at least one method must be selected");
    }
    if reliability_kinds.is_empty() {
        bail!("at least one reliability kind must be selected");
    }
    if guard.is_nan() || guard <= 0.0 {
        bail!("guard must be positive, got {guard}");
    }
    if let Some(t) = threads {
        if t == 0 {
            bail!("threads must be at least 1");
        }
    }
    Ok(RunConfig {
        input,
        scan_lengths,
        methods,
        reliability_kinds,
        guard,
        fisher_z,
        maps,
        output_dir,
        seed,
        threads,
    })
}

/// What kind of file the sweep input points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Manifest,
    Params,
}

/// Distinguish a scan manifest from a generative-params file by its
/// top-level keys.
pub fn sniff_input(path: &Path) -> Result<InputKind> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading input {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text)
        .with_context(|| format!("parsing input {}", path.display()))?;
    if table.contains_key("subjects") {
        Ok(InputKind::Manifest)
    } else if table.contains_key("n_subjects") {
        Ok(InputKind::Params)
    } else {
        bail!(
            "{}: neither a manifest (expected [[subjects]]) nor a params file (expected n_subjects)",
            path.display()
        );
    }
}
