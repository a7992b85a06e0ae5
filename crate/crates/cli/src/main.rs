use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};

use fconn::reliability::{Method, ReliabilityKind};
use fconn_cli::commands;
use fconn_cli::config::{self, Overrides};

#[derive(Parser)]
#[command(
    name = "fconn",
    version,
    about = "Functional connectivity reliability pipeline: estimate, shrink, score"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of time series with known ground truth
    Simulate(SimulateArgs),
    /// Compute per-subject-visit connectivity estimates from a manifest
    Connectivity(ConnectivityArgs),
    /// Estimate variance components and shrink toward the group mean
    Shrink(ShrinkArgs),
    /// Score one (method, kind, scan length) reliability cell
    Reliability(ReliabilityArgs),
    /// Run the full sweep over scan lengths, methods, and kinds
    Sweep(SweepArgs),
    /// Flatten a finished sweep into one long-format CSV
    Report(ReportArgs),
}

/// Flags shared by the pipeline subcommands. Each maps to a run-config
/// field; a value given here overrides the config file.
#[derive(Args, Default)]
struct CommonArgs {
    /// TOML config file (flags override its values)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scan manifest or generative-params file
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory to write into (must be new or empty)
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Apply Fisher z before any cross-subject statistics
    #[arg(long, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    fisher_z: Option<bool>,
    /// Spatial maps CSV for dual regression (manifest inputs only)
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Override the params-file seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            input: self.input.clone(),
            fisher_z: self.fisher_z,
            maps: self.maps.clone(),
            output_dir: self.output_dir.clone(),
            seed: self.seed,
            threads: self.threads,
            ..Default::default()
        }
    }

    fn resolve(&self, extra: Overrides) -> Result<config::RunConfig> {
        let mut layers = Vec::new();
        if let Some(path) = &self.config {
            layers.push(config::load_config_file(path)?);
        }
        let mut flags = self.overrides();
        merge(&mut flags, extra);
        layers.push(flags);
        config::resolve(&layers)
    }
}

fn merge(into: &mut Overrides, from: Overrides) {
    if from.scan_lengths.is_some() {
        into.scan_lengths = from.scan_lengths;
    }
    if from.methods.is_some() {
        into.methods = from.methods;
    }
    if from.reliability_kinds.is_some() {
        into.reliability_kinds = from.reliability_kinds;
    }
    if from.guard.is_some() {
        into.guard = from.guard;
    }
}

fn parse_list<T: FromStr>(what: &str, items: &[String]) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    items
        .iter()
        .map(|s| s.parse::<T>().with_context(|| format!("bad {what} {s:?}")))
        .collect()
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Series length in volumes (default: params file t_total, else the
    /// largest scan length)
    #[arg(long)]
    t_total: Option<usize>,
}

#[derive(Args)]
struct ConnectivityArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated truncation lengths; omit to use each full series
    #[arg(long, value_delimiter = ',')]
    scan_lengths: Option<Vec<usize>>,
}

#[derive(Args)]
struct ShrinkArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// single_session_shrink or oracle_shrink
    #[arg(long, default_value = "single_session_shrink")]
    method: String,
    /// Scan length in volumes (default: full series, or the largest
    /// params-grid entry)
    #[arg(long)]
    scan_length: Option<usize>,
}

#[derive(Args)]
struct ReliabilityArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// raw, single_session_shrink, or oracle_shrink
    #[arg(long, default_value = "raw")]
    method: String,
    /// intersession or end_point
    #[arg(long, default_value = "intersession")]
    kind: String,
    /// Scan length in volumes (default: full series, or the largest
    /// params-grid entry)
    #[arg(long)]
    scan_length: Option<usize>,
    /// Reference magnitudes below this leave the APE undefined
    #[arg(long)]
    guard: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated truncation lengths (default: 300,600,...,2400 for
    /// manifests; the file's own grid for params inputs)
    #[arg(long, value_delimiter = ',')]
    scan_lengths: Option<Vec<usize>>,
    /// Comma-separated subset of raw,single_session_shrink,oracle_shrink
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated subset of intersession,end_point
    #[arg(long, value_delimiter = ',')]
    reliability_kinds: Option<Vec<String>>,
    /// Reference magnitudes below this leave the APE undefined
    #[arg(long)]
    guard: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by a finished sweep
    #[arg(long)]
    run_dir: PathBuf,
    /// Output CSV (default: <run_dir>/report_long.csv)
    #[arg(long)]
    output: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.common.resolve(Overrides::default())?;
            commands::cmd_simulate(
                &cfg.input,
                &cfg.output_dir,
                cfg.seed,
                args.t_total,
                cfg.threads,
            )
        }
        Command::Connectivity(args) => {
            let extra = Overrides {
                scan_lengths: args.scan_lengths.clone(),
                ..Default::default()
            };
            let cfg = args.common.resolve(extra)?;
            commands::cmd_connectivity(&cfg)
        }
        Command::Shrink(args) => {
            let cfg = args.common.resolve(Overrides::default())?;
            let method: Method = args
                .method
                .parse()
                .with_context(|| format!("bad method {:?}", args.method))?;
            commands::cmd_shrink(&cfg, method, args.scan_length)
        }
        Command::Reliability(args) => {
            let extra = Overrides {
                guard: args.guard,
                ..Default::default()
            };
            let cfg = args.common.resolve(extra)?;
            let method: Method = args
                .method
                .parse()
                .with_context(|| format!("bad method {:?}", args.method))?;
            let kind: ReliabilityKind = args
                .kind
                .parse()
                .with_context(|| format!("bad kind {:?}", args.kind))?;
            commands::cmd_reliability(&cfg, method, kind, args.scan_length)
        }
        Command::Sweep(args) => {
            let extra = Overrides {
                scan_lengths: args.scan_lengths.clone(),
                methods: args
                    .methods
                    .as_deref()
                    .map(|m| parse_list("method", m))
                    .transpose()?,
                reliability_kinds: args
                    .reliability_kinds
                    .as_deref()
                    .map(|k| parse_list("kind", k))
                    .transpose()?,
                guard: args.guard,
                ..Default::default()
            };
            let cfg = args.common.resolve(extra)?;
            commands::cmd_sweep(&cfg).map(|_| ())
        }
        Command::Report(args) => {
            let out = commands::cmd_report(&args.run_dir, args.output.as_deref())?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
