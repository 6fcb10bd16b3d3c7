//! Experiment protocol and sweep execution.
//!
//! Per seed: draw (or load) the data, split it 40/30/30, standardize from
//! the training split, pretrain a dense MLP on train, then prune and
//! fine-tune on val. Every metric is measured on test.

mod emit;
mod experiments;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use emit::{emit, read_rows, round_sig9, Cell, Format, Row, Sink};
pub use experiments::{
    ablate, best_baseline, granularity, interpolation_curve, interpolation_sweep, iterations_to_target, measure_iterations,
    tradeoff_curve, tradeoff_sweep, Ablation, AblationRecord, InterpolationRecord, IterationRecord, Targets, TradeoffPoint,
};

use crate::data::{
    generate_synthetic_with_truth, load_csv, split_indices, standardize_from_train, CsvSchema, GroupedDataset,
    SplitRatios, SplitTag, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::fairness::degradation_fairness;
use crate::model::{MaskMode, MaskedModel};
use crate::pruners::{derive_seed, prune, train_dense, Method, PruneConfig};

/// Environment variable capping the worker threads of a sweep.
pub const THREADS_ENV: &str = "BIFP_THREADS";

/// `1 − 0.8^r` for `r = 1..=rounds`.
pub fn lth_ladder(rounds: usize) -> Vec<f64> {
    (1..=rounds).map(|r| 1.0 - 0.8f64.powi(r as i32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Generated per trial. With `per_seed` the generator seed is offset by
    /// the trial seed; with `clean_test` the test split is scored against
    /// the labels before noise injection.
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        #[serde(default = "yes")]
        per_seed: bool,
        #[serde(default = "yes")]
        clean_test: bool,
    },
    Csv { path: PathBuf, schema: CsvSchema },
}

fn yes() -> bool {
    true
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            spec: SyntheticSpec::default(),
            per_seed: true,
            clean_test: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub ratios: SplitRatios,
    /// Hidden widths of the MLP.
    pub hidden: Vec<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_alpha: f64,
    pub batch_size: usize,
    /// Validation cadence of `iterations_to_target`, in steps.
    pub monitor_every: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            ratios: SplitRatios::default(),
            hidden: vec![64, 32],
            pretrain_epochs: 30,
            pretrain_alpha: 0.05,
            batch_size: 64,
            monitor_every: 10,
        }
    }
}

/// A sweep grid. Serialized field-for-field as the CLI config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSource,
    pub protocol: Protocol,
    /// Shared pruner configuration; `method`, `target_sparsity` and `seed`
    /// are set per cell.
    pub base: PruneConfig,
    /// Per-method JSON objects merged over `base`.
    pub overrides: BTreeMap<Method, Value>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            methods: vec![Method::BifpUns, Method::Lottery, Method::Snip, Method::Fpgm],
            sparsities: lth_ladder(7),
            seeds: (0..5).collect(),
            dataset: DatasetSource::default(),
            protocol: Protocol::default(),
            base: PruneConfig::default(),
            overrides: BTreeMap::new(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.methods.is_empty() || self.sparsities.is_empty() || self.seeds.is_empty() {
            return bad("methods, sparsities and seeds must be non-empty");
        }
        if self.sparsities.iter().any(|s| !(0.0..1.0).contains(s)) {
            return bad("sparsities must lie in [0, 1)");
        }
        if self.sparsities.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sparsities must be strictly increasing");
        }
        if self.protocol.batch_size == 0 || self.protocol.monitor_every == 0 {
            return bad("batch_size and monitor_every must be positive");
        }
        for m in &self.methods {
            self.config_for(*m, self.sparsities[0], self.seeds[0])?.validate()?;
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `base` with the method's overrides applied, for one grid cell.
    pub fn config_for(&self, method: Method, sparsity: f64, seed: u64) -> Result<PruneConfig> {
        let mut cfg = match self.overrides.get(&method) {
            None => self.base.clone(),
            Some(patch) => merge_config(&self.base, patch)?,
        };
        cfg.method = method;
        cfg.target_sparsity = sparsity;
        cfg.seed = seed;
        Ok(cfg)
    }

    pub fn grid_size(&self) -> usize {
        self.methods.len() * self.sparsities.len() * self.seeds.len()
    }
}

/// Applies the keys of a JSON object on top of `base`.
pub fn merge_config(base: &PruneConfig, patch: &Value) -> Result<PruneConfig> {
    let Value::Object(patch) = patch else {
        return Err(Error::InvalidConfig(format!("config override must be a JSON object, got {patch}")));
    };
    let mut doc = serde_json::to_value(base)?;
    let obj = doc.as_object_mut().expect("config serializes to an object");
    for (k, v) in patch {
        obj.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(doc)?)
}

/// Everything one seed's cells share.
#[derive(Debug, Clone)]
pub struct Trial {
    pub seed: u64,
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test: GroupedDataset,
    pub dense: MaskedModel,
}

pub fn prepare_trial(source: &DatasetSource, protocol: &Protocol, seed: u64) -> Result<Trial> {
    let (data, clean) = match source {
        DatasetSource::Synthetic {
            spec,
            per_seed,
            clean_test,
        } => {
            let spec = SyntheticSpec {
                seed: if *per_seed { spec.seed.wrapping_add(seed) } else { spec.seed },
                ..spec.clone()
            };
            let s = generate_synthetic_with_truth(&spec)?;
            let clean = clean_test.then_some(s.clean_labels);
            (s.data, clean)
        }
        DatasetSource::Csv { path, schema } => (load_csv(path, schema)?, None),
    };
    let idx = split_indices(&data, protocol.ratios, seed)?;
    let train = data.subset(&idx.train).tagged(SplitTag::Train);
    let val = data.subset(&idx.val).tagged(SplitTag::Val);
    let mut test = data.subset(&idx.test).tagged(SplitTag::Test);
    if let Some(clean) = clean {
        test = test.with_labels(idx.test.iter().map(|&i| clean[i]).collect())?;
    }
    let (train, val, test) = standardize_from_train(&train, &val, &test);
    for part in [&train, &val, &test] {
        part.require_both_groups()?;
    }

    let widths: Vec<usize> = std::iter::once(data.dim())
        .chain(protocol.hidden.iter().copied())
        .chain(std::iter::once(1))
        .collect();
    let init = MaskedModel::mlp(&widths, MaskMode::Unstructured, derive_seed(seed, 100))?;
    let (dense, _) = train_dense(
        &init,
        &train,
        protocol.pretrain_epochs,
        protocol.pretrain_alpha,
        protocol.batch_size,
        derive_seed(seed, 101),
    )?;
    Ok(Trial {
        seed,
        train,
        val,
        test,
        dense,
    })
}

/// One grid cell. Metric fields are NaN when `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub sparsity: f64,
    pub seed: u64,
    pub acc_overall: f64,
    pub acc_pos: f64,
    pub acc_neg: f64,
    pub perf_gap: f64,
    pub degradation_gap: f64,
    pub total_iterations: u64,
    pub wall_time_seconds: f64,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn failed(method: Method, sparsity: f64, seed: u64, err: &Error) -> Self {
        RunRecord {
            method,
            sparsity,
            seed,
            acc_overall: f64::NAN,
            acc_pos: f64::NAN,
            acc_neg: f64::NAN,
            perf_gap: f64::NAN,
            degradation_gap: f64::NAN,
            total_iterations: 0,
            wall_time_seconds: 0.0,
            error: Some(err.to_string()),
        }
    }

    /// Every emitted field except the wall-clock time, as written to disk.
    pub fn metric_key(&self) -> Vec<Cell> {
        let mut c = self.cells();
        c.remove(9);
        c.into_iter()
            .map(|x| match x {
                Cell::Float(f) if f.is_finite() => Cell::Float(round_sig9(f)),
                Cell::Float(_) => Cell::Missing,
                other => other,
            })
            .collect()
    }

    pub fn from_row(row: &serde_json::Map<String, Value>) -> Result<Self> {
        let method = emit::field_str(row, "method")?
            .ok_or_else(|| Error::MissingColumn("method".into()))?
            .parse()?;
        Ok(RunRecord {
            method,
            sparsity: emit::field_f64(row, "sparsity")?,
            seed: emit::field_u64(row, "seed")?,
            acc_overall: emit::field_f64(row, "acc_overall")?,
            acc_pos: emit::field_f64(row, "acc_pos")?,
            acc_neg: emit::field_f64(row, "acc_neg")?,
            perf_gap: emit::field_f64(row, "perf_gap")?,
            degradation_gap: emit::field_f64(row, "degradation_gap")?,
            total_iterations: emit::field_u64(row, "total_iterations")?,
            wall_time_seconds: emit::field_f64(row, "wall_time_seconds")?,
            error: emit::field_str(row, "error")?,
        })
    }
}

impl Row for RunRecord {
    fn columns() -> &'static [&'static str] {
        &[
            "method",
            "sparsity",
            "seed",
            "acc_overall",
            "acc_pos",
            "acc_neg",
            "perf_gap",
            "degradation_gap",
            "total_iterations",
            "wall_time_seconds",
            "error",
        ]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Str(self.method.to_string()),
            Cell::Float(self.sparsity),
            Cell::Int(self.seed),
            Cell::Float(self.acc_overall),
            Cell::Float(self.acc_pos),
            Cell::Float(self.acc_neg),
            Cell::Float(self.perf_gap),
            Cell::Float(self.degradation_gap),
            Cell::Int(self.total_iterations),
            Cell::Float(self.wall_time_seconds),
            self.error.clone().map_or(Cell::Missing, Cell::Str),
        ]
    }
}

pub fn read_records(path: &Path, format: Format) -> Result<Vec<RunRecord>> {
    read_rows(path, format)?.iter().map(RunRecord::from_row).collect()
}

/// Prunes `trial.dense` on val with `cfg` and scores the result on test.
pub fn run_cell(trial: &Trial, cfg: &PruneConfig) -> RunRecord {
    let start = Instant::now();
    let outcome = prune(&trial.dense, &trial.val, cfg)
        .and_then(|(m, log)| Ok((degradation_fairness(&trial.dense, &m, &trial.test)?, log)));
    match outcome {
        Ok((rep, log)) => RunRecord {
            method: cfg.method,
            sparsity: cfg.target_sparsity,
            seed: cfg.seed,
            acc_overall: rep.acc_overall,
            acc_pos: rep.acc_pos,
            acc_neg: rep.acc_neg,
            perf_gap: rep.perf_gap,
            degradation_gap: rep.degradation_gap,
            total_iterations: log.total_iterations as u64,
            wall_time_seconds: start.elapsed().as_secs_f64(),
            error: None,
        },
        Err(e) => RunRecord {
            wall_time_seconds: start.elapsed().as_secs_f64(),
            ..RunRecord::failed(cfg.method, cfg.target_sparsity, cfg.seed, &e)
        },
    }
}

/// Worker pool sized by `BIFP_THREADS` when set to a positive integer.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            b = b.num_threads(n);
        }
    }
    b.build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))
}

/// Prepares one trial per seed in parallel; a failed seed keeps its error.
pub(crate) fn prepare_trials(spec: &SweepSpec) -> Vec<(u64, std::result::Result<Trial, String>)> {
    spec.seeds
        .par_iter()
        .map(|&s| (s, prepare_trial(&spec.dataset, &spec.protocol, s).map_err(|e| e.to_string())))
        .collect()
}

/// Runs `cells` in parallel, appending each finished row to `sink` (in
/// completion order), and returns the rows in `cells` order.
pub(crate) fn run_grid<C, R, F>(cells: &[C], sink: Option<&Mutex<Sink>>, f: F) -> Result<Vec<R>>
where
    C: Sync,
    R: Row + Send,
    F: Fn(&C) -> R + Sync,
{
    let pool = thread_pool()?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                let r = f(c);
                if let Some(s) = sink {
                    s.lock().expect("sink lock").push(&r)?;
                }
                Ok(r)
            })
            .collect()
    })
}

/// Executes the full (method × sparsity × seed) grid. Failing cells become
/// records with `error` set. With `out`, rows are appended as they finish
/// and the file is rewritten in grid order at the end.
pub fn run_sweep(spec: &SweepSpec, out: Option<(&Path, Format)>) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let pool = thread_pool()?;
    let trials = pool.install(|| prepare_trials(spec));
    let mut cells = Vec::with_capacity(spec.grid_size());
    for &m in &spec.methods {
        for &s in &spec.sparsities {
            for (seed, trial) in &trials {
                cells.push((m, s, *seed, trial));
            }
        }
    }
    let sink = out.map(|(p, f)| Sink::create::<RunRecord>(p, f).map(Mutex::new)).transpose()?;
    let records = run_grid(&cells, sink.as_ref(), |&(m, s, seed, trial)| {
        let cfg = match spec.config_for(m, s, seed) {
            Ok(c) => c,
            Err(e) => return RunRecord::failed(m, s, seed, &e),
        };
        match trial {
            Ok(t) => run_cell(t, &cfg),
            Err(msg) => RunRecord::failed(m, s, seed, &Error::InvalidConfig(msg.clone())),
        }
    })?;
    if let Some((p, f)) = out {
        emit(&records, p, f)?;
    }
    Ok(records)
}
