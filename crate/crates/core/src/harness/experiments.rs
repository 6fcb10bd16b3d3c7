//! Trade-off curves, iteration counts, ablations and loss interpolation.

use std::cell::Cell as StdCell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::emit::{emit, Cell, Format, Row, Sink};
use super::{prepare_trials, run_cell, run_grid, thread_pool, RunRecord, SweepSpec, Trial};
use crate::error::{Error, Result};
use crate::fairness::group_accuracy_from_logits;
use crate::model::MaskedModel;
use crate::pruners::{loss_interpolation, prune, prune_monitored, Method, PruneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub method: Method,
    pub sparsity: f64,
    pub seed: u64,
    pub lambda: f64,
    pub acc: f64,
    pub perf_gap: f64,
}

impl Row for TradeoffPoint {
    fn columns() -> &'static [&'static str] {
        &["method", "sparsity", "seed", "lambda", "acc", "perf_gap"]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Str(self.method.to_string()),
            Cell::Float(self.sparsity),
            Cell::Int(self.seed),
            Cell::Float(self.lambda),
            Cell::Float(self.acc),
            Cell::Float(self.perf_gap),
        ]
    }
}

/// One pruning run per λ at a fixed sparsity, scored on test.
pub fn tradeoff_curve(
    trial: &Trial,
    base: &PruneConfig,
    method: Method,
    sparsity: f64,
    lambdas: &[f64],
) -> Result<Vec<TradeoffPoint>> {
    if !method.uses_lambda() {
        return Err(Error::InvalidConfig(format!("{method} has no fairness weight to sweep")));
    }
    let pool = thread_pool()?;
    pool.install(|| {
        lambdas
            .par_iter()
            .map(|&lambda| {
                let cfg = PruneConfig {
                    method,
                    target_sparsity: sparsity,
                    seed: trial.seed,
                    lambda_fair: lambda,
                    ..base.clone()
                };
                let r = run_cell(trial, &cfg);
                if let Some(e) = r.error {
                    return Err(Error::InvalidConfig(format!("{method} at λ = {lambda}: {e}")));
                }
                Ok(TradeoffPoint {
                    method,
                    sparsity,
                    seed: trial.seed,
                    lambda,
                    acc: r.acc_overall,
                    perf_gap: r.perf_gap,
                })
            })
            .collect()
    })
}

/// `tradeoff_curve` for every λ-using method of the spec at each of its
/// sparsities and seeds. Each finished curve is appended to `out`; the first
/// failure aborts.
pub fn tradeoff_sweep(spec: &SweepSpec, lambdas: &[f64], out: Option<(&Path, Format)>) -> Result<Vec<TradeoffPoint>> {
    spec.validate()?;
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("the λ grid is empty".into()));
    }
    let methods: Vec<Method> = spec.methods.iter().copied().filter(|m| m.uses_lambda()).collect();
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no method in the spec takes a fairness weight".into()));
    }
    let pool = thread_pool()?;
    let trials = pool.install(|| prepare_trials(spec));
    let mut sink = out.map(|(p, f)| Sink::create::<TradeoffPoint>(p, f)).transpose()?;
    let mut rows = Vec::new();
    for &m in &methods {
        for &s in &spec.sparsities {
            for (seed, t) in &trials {
                let t = t.as_ref().map_err(|msg| Error::InvalidConfig(format!("seed {seed}: {msg}")))?;
                let base = spec.config_for(m, s, *seed)?;
                for p in tradeoff_curve(t, &base, m, s, lambdas)? {
                    if let Some(k) = sink.as_mut() {
                        k.push(&p)?;
                    }
                    rows.push(p);
                }
            }
        }
    }
    if let Some((p, f)) = out {
        emit(&rows, p, f)?;
    }
    Ok(rows)
}

/// Accuracy floor and gap ceiling for `iterations_to_target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub min_acc: f64,
    pub max_gap: f64,
}

/// Sparsity resolution of a method on `model`: one weight, or for the
/// structured methods one row of the widest prunable layer.
pub fn granularity(model: &MaskedModel, method: Method) -> f64 {
    let total = model.weight_count() as f64;
    if method.is_structured() {
        let widest = model.layers.iter().filter(|l| l.out_dim() > 1).map(|l| l.in_dim()).max().unwrap_or(1);
        widest as f64 / total
    } else {
        1.0 / total
    }
}

/// First step (checked every `every` steps, and at the last step) at which
/// the model sits at the target sparsity and reaches both targets on `eval`.
/// `None` when the method's own schedule ends, or diverges, first.
pub fn iterations_to_target(
    model: &MaskedModel,
    train: &crate::data::GroupedDataset,
    eval: &crate::data::GroupedDataset,
    cfg: &PruneConfig,
    targets: Targets,
    every: usize,
) -> Result<Option<usize>> {
    let every = every.max(1);
    let unit = granularity(model, cfg.method) + 1e-12;
    let meets = |m: &MaskedModel| -> bool {
        if (m.sparsity() - cfg.target_sparsity).abs() > unit {
            return false;
        }
        let Ok(logits) = m.forward(eval.features()) else {
            return false;
        };
        let Ok((p, n)) = group_accuracy_from_logits(&logits, eval.labels(), eval.groups()) else {
            return false;
        };
        let acc = logits
            .iter()
            .zip(eval.labels())
            .filter(|(z, y)| crate::fairness::predict(**z) == **y)
            .count() as f64
            / logits.len() as f64;
        acc >= targets.min_acc && (p - n).abs() <= targets.max_gap
    };
    let hit = StdCell::new(None);
    let mut check = |step: usize, m: &MaskedModel| -> bool {
        if step.is_multiple_of(every) && meets(m) {
            hit.set(Some(step));
            return true;
        }
        false
    };
    match prune_monitored(model, train, cfg, Some(&mut check)) {
        Ok((m, log)) if hit.get().is_none() && !log.total_iterations.is_multiple_of(every) && meets(&m) => {
            Ok(Some(log.total_iterations))
        }
        Ok(_) | Err(Error::Diverged { .. }) => Ok(hit.get()),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub method: Method,
    pub sparsity: f64,
    pub seed: u64,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

impl Row for IterationRecord {
    fn columns() -> &'static [&'static str] {
        &["method", "sparsity", "seed", "iterations", "error"]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Str(self.method.to_string()),
            Cell::Float(self.sparsity),
            Cell::Int(self.seed),
            self.iterations.map_or(Cell::Missing, |i| Cell::Int(i as u64)),
            self.error.clone().map_or(Cell::Missing, Cell::Str),
        ]
    }
}

/// `iterations_to_target` over the spec's (method × sparsity × seed) grid,
/// pruning on val and checking on test.
pub fn measure_iterations(spec: &SweepSpec, targets: Targets, out: Option<(&Path, Format)>) -> Result<Vec<IterationRecord>> {
    spec.validate()?;
    let pool = thread_pool()?;
    let trials = pool.install(|| prepare_trials(spec));
    let mut cells = Vec::new();
    for &m in &spec.methods {
        for &s in &spec.sparsities {
            for (seed, t) in &trials {
                cells.push((m, s, *seed, t));
            }
        }
    }
    let sink = out.map(|(p, f)| Sink::create::<IterationRecord>(p, f).map(Mutex::new)).transpose()?;
    let rows = run_grid(&cells, sink.as_ref(), |&(m, s, seed, t)| {
        let outcome = match t {
            Ok(t) => spec
                .config_for(m, s, seed)
                .and_then(|cfg| iterations_to_target(&t.dense, &t.val, &t.test, &cfg, targets, spec.protocol.monitor_every)),
            Err(msg) => Err(Error::InvalidConfig(msg.clone())),
        };
        let (iterations, error) = match outcome {
            Ok(i) => (i, None),
            Err(e) => (None, Some(e.to_string())),
        };
        IterationRecord {
            method: m,
            sparsity: s,
            seed,
            iterations,
            error,
        }
    })?;
    if let Some((p, f)) = out {
        emit(&rows, p, f)?;
    }
    Ok(rows)
}

/// The comparable baseline: fewest iterations among the non-BiFP methods
/// that reached the targets (ties go to the earlier entry).
pub fn best_baseline(counts: &[(Method, Option<usize>)]) -> Option<(Method, usize)> {
    counts
        .iter()
        .filter(|(m, _)| !m.is_bifp())
        .filter_map(|&(m, c)| c.map(|c| (m, c)))
        .min_by_key(|&(_, c)| c)
}

/// BiFP with fairness dropped from the mask level, the weight level, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    WithoutMask,
    WithoutWeight,
    WithoutBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::WithoutMask, Ablation::WithoutWeight, Ablation::WithoutBoth];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutMask => "without-mask",
            Ablation::WithoutWeight => "without-weight",
            Ablation::WithoutBoth => "without-both",
        }
    }

    pub fn apply(self, cfg: &PruneConfig) -> PruneConfig {
        let (m, w) = match self {
            Ablation::Full => (true, true),
            Ablation::WithoutMask => (false, true),
            Ablation::WithoutWeight => (true, false),
            Ablation::WithoutBoth => (false, false),
        };
        PruneConfig {
            fair_mask_on: m,
            fair_weight_on: w,
            ..cfg.clone()
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub variant: Ablation,
    pub record: RunRecord,
}

impl Row for AblationRecord {
    fn columns() -> &'static [&'static str] {
        &[
            "variant",
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
        let mut c = vec![Cell::Str(self.variant.to_string())];
        c.extend(self.record.cells());
        c
    }
}

/// Every BiFP method of the spec (BiFP-uns if there is none) under all four
/// ablation variants, across the spec's sparsities and seeds.
pub fn ablate(spec: &SweepSpec, out: Option<(&Path, Format)>) -> Result<Vec<AblationRecord>> {
    spec.validate()?;
    let mut methods: Vec<Method> = spec.methods.iter().copied().filter(|m| m.is_bifp()).collect();
    if methods.is_empty() {
        methods.push(Method::BifpUns);
    }
    let pool = thread_pool()?;
    let trials = pool.install(|| prepare_trials(spec));
    let mut cells = Vec::new();
    for &m in &methods {
        for v in Ablation::ALL {
            for &s in &spec.sparsities {
                for (seed, t) in &trials {
                    cells.push((m, v, s, *seed, t));
                }
            }
        }
    }
    let sink = out.map(|(p, f)| Sink::create::<AblationRecord>(p, f).map(Mutex::new)).transpose()?;
    let rows = run_grid(&cells, sink.as_ref(), |&(m, v, s, seed, t)| {
        let record = match (t, spec.config_for(m, s, seed)) {
            (Ok(t), Ok(cfg)) => run_cell(t, &v.apply(&cfg)),
            (Err(msg), _) => RunRecord::failed(m, s, seed, &Error::InvalidConfig(msg.clone())),
            (_, Err(e)) => RunRecord::failed(m, s, seed, &e),
        };
        AblationRecord { variant: v, record }
    })?;
    if let Some((p, f)) = out {
        emit(&rows, p, f)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationRecord {
    pub method: Method,
    pub counterpart: Ablation,
    pub sparsity: f64,
    pub seed: u64,
    pub t: f64,
    pub loss: f64,
    pub fhat: f64,
}

impl Row for InterpolationRecord {
    fn columns() -> &'static [&'static str] {
        &["method", "counterpart", "sparsity", "seed", "t", "loss", "fhat"]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            Cell::Str(self.method.to_string()),
            Cell::Str(self.counterpart.to_string()),
            Cell::Float(self.sparsity),
            Cell::Int(self.seed),
            Cell::Float(self.t),
            Cell::Float(self.loss),
            Cell::Float(self.fhat),
        ]
    }
}

/// Loss and surrogate gap on test along the line from full BiFP (`t = 0`)
/// to its `counterpart` variant (`t = 1`).
pub fn interpolation_curve(
    trial: &Trial,
    cfg: &PruneConfig,
    counterpart: Ablation,
    steps: usize,
) -> Result<Vec<InterpolationRecord>> {
    if !cfg.method.is_bifp() {
        return Err(Error::InvalidConfig(format!("interpolation compares BiFP variants, not {}", cfg.method)));
    }
    let (a, _) = prune(&trial.dense, &trial.val, &Ablation::Full.apply(cfg))?;
    let (b, _) = prune(&trial.dense, &trial.val, &counterpart.apply(cfg))?;
    Ok(loss_interpolation(&a, &b, &trial.test, steps, cfg.surrogate)?
        .into_iter()
        .map(|p| InterpolationRecord {
            method: cfg.method,
            counterpart,
            sparsity: cfg.target_sparsity,
            seed: cfg.seed,
            t: p.t,
            loss: p.loss,
            fhat: p.fhat,
        })
        .collect())
}

/// `interpolation_curve` for every BiFP method of the spec (BiFP-uns if
/// there is none) at each sparsity and seed. The first failure aborts.
pub fn interpolation_sweep(
    spec: &SweepSpec,
    counterpart: Ablation,
    steps: usize,
    out: Option<(&Path, Format)>,
) -> Result<Vec<InterpolationRecord>> {
    spec.validate()?;
    let mut methods: Vec<Method> = spec.methods.iter().copied().filter(|m| m.is_bifp()).collect();
    if methods.is_empty() {
        methods.push(Method::BifpUns);
    }
    let pool = thread_pool()?;
    let trials = pool.install(|| prepare_trials(spec));
    let mut cells = Vec::new();
    for &m in &methods {
        for &s in &spec.sparsities {
            for (seed, t) in &trials {
                cells.push((m, s, *seed, t));
            }
        }
    }
    let sink = out.map(|(p, f)| Sink::create::<InterpolationRecord>(p, f).map(Mutex::new)).transpose()?;
    let curves: Vec<Vec<InterpolationRecord>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, s, seed, t)| {
                let t = t.as_ref().map_err(|msg| Error::InvalidConfig(format!("seed {seed}: {msg}")))?;
                let curve = interpolation_curve(t, &spec.config_for(m, s, seed)?, counterpart, steps)?;
                if let Some(k) = sink.as_ref() {
                    let mut k = k.lock().expect("sink lock");
                    for r in &curve {
                        k.push(r)?;
                    }
                }
                Ok(curve)
            })
            .collect::<Result<_>>()
    })?;
    let rows: Vec<InterpolationRecord> = curves.into_iter().flatten().collect();
    if let Some((p, f)) = out {
        emit(&rows, p, f)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_spec;
    use super::super::prepare_trial;
    use super::*;

    #[test]
    fn vacuous_and_impossible_targets() {
        let spec = tiny_spec();
        let t = prepare_trial(&spec.dataset, &spec.protocol, 3).unwrap();
        let cfg = spec.config_for(Method::BifpUns, 0.36, 3).unwrap();
        let easy = Targets { min_acc: 0.0, max_gap: 1.0 };
        assert_eq!(iterations_to_target(&t.dense, &t.val, &t.test, &cfg, easy, 10).unwrap(), Some(10));
        let hard = Targets { min_acc: 1.01, max_gap: -1.0 };
        assert_eq!(iterations_to_target(&t.dense, &t.val, &t.test, &cfg, hard, 10).unwrap(), None);
    }

    #[test]
    fn comparable_baseline_is_fastest_reacher() {
        let c = [
            (Method::BifpUns, Some(5)),
            (Method::Lottery, Some(300)),
            (Method::Snip, None),
            (Method::PruneThenFair, Some(120)),
        ];
        assert_eq!(best_baseline(&c), Some((Method::PruneThenFair, 120)));
        assert_eq!(best_baseline(&c[..1]), None);
    }

    #[test]
    fn tradeoff_needs_lambda_method() {
        let spec = tiny_spec();
        let t = prepare_trial(&spec.dataset, &spec.protocol, 3).unwrap();
        assert!(tradeoff_curve(&t, &spec.base, Method::Snip, 0.36, &[0.0]).is_err());
        let pts = tradeoff_curve(&t, &spec.base, Method::BifpUns, 0.36, &[0.5]).unwrap();
        assert_eq!(pts.len(), 1);
    }

    #[test]
    fn ablation_flags() {
        let c = Ablation::WithoutBoth.apply(&PruneConfig::default());
        assert!(!c.fair_mask_on && !c.fair_weight_on);
        assert_eq!("without-mask".parse::<Ablation>().unwrap(), Ablation::WithoutMask);
    }

    #[test]
    fn tradeoff_sweep_shape_and_file() {
        let spec = SweepSpec {
            methods: vec![Method::Lottery, Method::PruneThenFair],
            ..tiny_spec()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = tradeoff_sweep(&spec, &[0.0, 1.0], Some((&path, Format::Csv))).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.method == Method::PruneThenFair));
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
        assert!(tradeoff_sweep(&spec, &[], None).is_err());
        let only_snip = SweepSpec {
            methods: vec![Method::Snip],
            ..tiny_spec()
        };
        assert!(tradeoff_sweep(&only_snip, &[1.0], None).is_err());
    }

    #[test]
    fn interpolation_sweep_defaults_to_bifp() {
        let spec = SweepSpec {
            base: PruneConfig {
                outer_steps: 2,
                ..tiny_spec().base
            },
            ..tiny_spec()
        };
        let rows = interpolation_sweep(&spec, Ablation::WithoutBoth, 3, None).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.method == Method::BifpUns && r.counterpart == Ablation::WithoutBoth));
        assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
    }
}

