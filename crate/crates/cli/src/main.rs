//! `bifp`: run pruning sweeps and write plot-ready CSV / JSON-lines files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bifp_core::harness::{
    ablate, interpolation_sweep, measure_iterations, run_sweep, tradeoff_sweep, Ablation, DatasetSource, Format,
    Targets, THREADS_ENV,
};
use bifp_core::{CsvSchema, Method, SweepSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "bifp",
    version,
    about = "Fairness-aware neural network pruning experiments",
    after_help = "Worker threads default to one per core; set BIFP_THREADS to cap them."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accuracy and fairness over the (method × sparsity × seed) grid.
    Sweep(Common),
    /// Accuracy against perf_gap while sweeping the fairness weight.
    Tradeoff(Common),
    /// Steps until accuracy and gap targets hold at the target sparsity.
    Iterations {
        #[command(flatten)]
        common: Common,
        /// Minimum test accuracy.
        #[arg(long, default_value_t = 0.8)]
        min_acc: f64,
        /// Maximum test perf_gap.
        #[arg(long, default_value_t = 0.05)]
        max_gap: f64,
    },
    /// Loss along the line from full BiFP to an ablated variant.
    Interpolate {
        #[command(flatten)]
        common: Common,
        /// Variant at t = 1.
        #[arg(long, default_value = "without-both", value_parser = parse_ablation)]
        counterpart: Ablation,
        /// Points on the segment, endpoints included.
        #[arg(long, default_value_t = 11)]
        steps: usize,
    },
    /// BiFP with and without each fairness term.
    Ablate(Common),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Synthetic,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Jsonl,
}

#[derive(Args)]
struct Common {
    /// JSON document mirroring SweepSpec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data source; `csv` needs --data and the column flags.
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// CSV file for --dataset csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    label_col: String,
    #[arg(long, default_value = "group")]
    sensitive_col: String,
    /// Label value read as the positive class.
    #[arg(long, default_value = "1")]
    positive_label: String,
    /// Sensitive value read as the favorable group.
    #[arg(long, default_value = "1")]
    positive_group: String,
    /// Output file [default: bifp-<subcommand>.<format>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format [default: from the --out extension, else csv].
    #[arg(long, value_enum)]
    format: Option<OutFormat>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated target sparsities, increasing, in [0, 1).
    #[arg(long, value_delimiter = ',')]
    sparsities: Option<Vec<f64>>,
    /// Comma-separated methods: bifp-uns, bifp-str, lottery, snip, fpgm,
    /// prune-then-fair, fair-then-prune.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    method: Option<Vec<Method>>,
    /// Fairness weight; for `tradeoff`, the comma-separated λ grid.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: bifp_core::Error| e.to_string())
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: bifp_core::Error| e.to_string())
}

const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];

impl Common {
    fn spec(&self, takes_grid: bool) -> Result<SweepSpec> {
        let mut spec = match &self.config {
            Some(p) => SweepSpec::from_json_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => SweepSpec::default(),
        };
        match self.dataset {
            Some(DatasetKind::Csv) => {
                let path = self.data.clone().context("--dataset csv needs --data <path>")?;
                spec.dataset = DatasetSource::Csv {
                    path,
                    schema: CsvSchema {
                        label_col: self.label_col.clone(),
                        sensitive_col: self.sensitive_col.clone(),
                        positive_label: self.positive_label.clone(),
                        positive_group: self.positive_group.clone(),
                    },
                };
            }
            Some(DatasetKind::Synthetic) if !matches!(spec.dataset, DatasetSource::Synthetic { .. }) => {
                spec.dataset = DatasetSource::default();
            }
            _ if self.data.is_some() => bail!("--data is only read with --dataset csv"),
            _ => {}
        }
        if let Some(s) = &self.seeds {
            spec.seeds = s.clone();
        }
        if let Some(s) = &self.sparsities {
            spec.sparsities = s.clone();
        }
        if let Some(m) = &self.method {
            spec.methods = m.clone();
        }
        if let Some(l) = &self.lambda {
            if !takes_grid {
                let [one] = l.as_slice() else {
                    bail!("--lambda takes a single value here; only `tradeoff` sweeps a grid")
                };
                spec.base.lambda_fair = *one;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    fn output(&self, command: &str) -> (PathBuf, Format) {
        let format = match (self.format, &self.out) {
            (Some(OutFormat::Csv), _) => Format::Csv,
            (Some(OutFormat::Jsonl), _) => Format::Jsonl,
            (None, Some(p)) => Format::from_path(p),
            (None, None) => Format::Csv,
        };
        let path = self.out.clone().unwrap_or_else(|| PathBuf::from(format!("bifp-{command}.{format}")));
        (path, format)
    }
}

fn report(rows: usize, errors: usize, path: &Path) {
    eprintln!("wrote {rows} rows to {}", path.display());
    if errors > 0 {
        eprintln!("{errors} rows carry an error; see the `error` column");
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        if v.trim().parse::<usize>().map_or(true, |n| n == 0) {
            eprintln!("ignoring {THREADS_ENV}={v}: expected a positive integer");
        }
    }
    match cli.command {
        Command::Sweep(c) => {
            let spec = c.spec(false)?;
            let (path, format) = c.output("sweep");
            let rows = run_sweep(&spec, Some((&path, format)))?;
            report(rows.len(), rows.iter().filter(|r| r.error.is_some()).count(), &path);
        }
        Command::Tradeoff(c) => {
            let mut spec = c.spec(true)?;
            if c.method.is_none() && c.config.is_none() {
                spec.methods = vec![Method::BifpUns, Method::PruneThenFair];
            }
            let lambdas = c.lambda.clone().unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
            let (path, format) = c.output("tradeoff");
            let rows = tradeoff_sweep(&spec, &lambdas, Some((&path, format)))?;
            report(rows.len(), 0, &path);
        }
        Command::Iterations {
            common,
            min_acc,
            max_gap,
        } => {
            let mut spec = common.spec(false)?;
            if common.method.is_none() && common.config.is_none() {
                spec.methods = vec![Method::BifpUns, Method::PruneThenFair];
            }
            let (path, format) = common.output("iterations");
            let rows = measure_iterations(&spec, Targets { min_acc, max_gap }, Some((&path, format)))?;
            report(rows.len(), rows.iter().filter(|r| r.error.is_some()).count(), &path);
        }
        Command::Interpolate {
            common,
            counterpart,
            steps,
        } => {
            let spec = common.spec(false)?;
            let (path, format) = common.output("interpolate");
            let rows = interpolation_sweep(&spec, counterpart, steps, Some((&path, format)))?;
            report(rows.len(), 0, &path);
        }
        Command::Ablate(c) => {
            let spec = c.spec(false)?;
            let (path, format) = c.output("ablate");
            let rows = ablate(&spec, Some((&path, format)))?;
            report(rows.len(), rows.iter().filter(|r| r.record.error.is_some()).count(), &path);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
