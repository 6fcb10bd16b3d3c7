//! Pruning methods and the training machinery they share.
//!
//! Every method takes a (usually pretrained, dense) model plus the data it
//! may train on, and returns a masked copy with a [`TrainLog`]. A step is one
//! gradient update at either level; `TrainLog::total_iterations` counts them.

mod bifp;
mod fpgm;
mod interpolate;
mod lottery;
mod snip;
mod two_stage;

use std::cell::Cell;
use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bifp::{bifp_prune, bifp_prune_monitored, mask_hypergradient, outer_update, InnerStep};
pub use fpgm::{fpgm_prune, fpgm_row_scores, fpgm_select_rows};
pub use interpolate::{interpolate_models, loss_interpolation, InterpolationPoint};
pub use lottery::{lottery, lottery_rounds, magnitude_prune_round};
pub use snip::{snip_prune, snip_sensitivity};
pub use two_stage::two_stage;

use crate::autodiff::{Tape, Tensor};
use crate::data::{Group, GroupedBatch, GroupedDataset};
use crate::error::{Error, Result};
use crate::fairness::{fairness_surrogate, surrogate_value, GroupStats, Surrogate};
use crate::model::{MaskedModel, Scope, Track};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BifpStr,
    BifpUns,
    Lottery,
    Snip,
    Fpgm,
    FairThenPrune,
    PruneThenFair,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::BifpStr,
        Method::BifpUns,
        Method::Lottery,
        Method::Snip,
        Method::Fpgm,
        Method::FairThenPrune,
        Method::PruneThenFair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BifpStr => "bifp-str",
            Method::BifpUns => "bifp-uns",
            Method::Lottery => "lottery",
            Method::Snip => "snip",
            Method::Fpgm => "fpgm",
            Method::FairThenPrune => "fair-then-prune",
            Method::PruneThenFair => "prune-then-fair",
        }
    }

    pub fn is_bifp(self) -> bool {
        matches!(self, Method::BifpStr | Method::BifpUns)
    }

    pub fn is_structured(self) -> bool {
        matches!(self, Method::BifpStr | Method::Fpgm)
    }

    /// Whether `lambda_fair` changes what the method does.
    pub fn uses_lambda(self) -> bool {
        matches!(
            self,
            Method::BifpStr | Method::BifpUns | Method::FairThenPrune | Method::PruneThenFair
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// How the mask gradient accounts for `dθ*(m)/dm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Hypergrad {
    /// Drop the implicit term; θ is treated as a constant.
    FirstOrder,
    /// Differentiate through the last `n` inner SGD steps.
    Unrolled(usize),
}

impl fmt::Display for Hypergrad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hypergrad::FirstOrder => f.write_str("first-order"),
            Hypergrad::Unrolled(n) => write!(f, "unrolled-{n}"),
        }
    }
}

impl FromStr for Hypergrad {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "first-order" {
            return Ok(Hypergrad::FirstOrder);
        }
        s.strip_prefix("unrolled-")
            .and_then(|n| n.parse().ok())
            .filter(|&n| n >= 1)
            .map(Hypergrad::Unrolled)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown hypergradient `{s}`")))
    }
}

impl TryFrom<String> for Hypergrad {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Hypergrad> for String {
    fn from(h: Hypergrad) -> String {
        h.to_string()
    }
}

/// Full configuration of one pruning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub method: Method,
    pub target_sparsity: f64,
    /// Inner (weight) learning rate.
    pub alpha: f64,
    /// Outer (mask score) learning rate.
    pub beta: f64,
    /// Weight of the λ·F̂² penalty.
    pub lambda_fair: f64,
    pub inner_steps_t: usize,
    pub outer_steps: usize,
    pub hypergrad: Hypergrad,
    pub surrogate: Surrogate,
    pub seed: u64,
    pub fair_mask_on: bool,
    pub fair_weight_on: bool,
    pub batch_size: usize,
    /// Lottery training epochs per pruning round.
    pub epochs_per_round: usize,
    /// Fixed-mask training after pruning (lottery's final round, SNIP, FPGM,
    /// and the fair stage of prune-then-fair).
    pub finetune_epochs: usize,
    /// Fairness-penalized dense epochs of fair-then-prune.
    pub fair_epochs: usize,
    pub scope: Scope,
    /// Reported only; the optimizer uses the λ penalty.
    pub tau: f64,
    /// Abort threshold for the training loss.
    pub max_loss: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            method: Method::BifpUns,
            target_sparsity: 0.5,
            alpha: 0.05,
            beta: 0.01,
            lambda_fair: 1.0,
            inner_steps_t: 5,
            outer_steps: 20,
            hypergrad: Hypergrad::FirstOrder,
            surrogate: Surrogate::default(),
            seed: 0,
            fair_mask_on: true,
            fair_weight_on: true,
            batch_size: 64,
            epochs_per_round: 10,
            finetune_epochs: 10,
            fair_epochs: 10,
            scope: Scope::PerLayer,
            tau: 0.05,
            max_loss: 1e6,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return bad(format!("target_sparsity {} outside [0,1)", self.target_sparsity));
        }
        if self.inner_steps_t == 0 {
            return bad("inner_steps_t must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda_fair >= 0.0 && self.lambda_fair.is_finite()) {
            return bad(format!("lambda_fair must be non-negative, got {}", self.lambda_fair));
        }
        self.surrogate.validate()
    }

    pub(crate) fn inner_lambda(&self) -> f64 {
        if self.fair_weight_on {
            self.lambda_fair
        } else {
            0.0
        }
    }

    pub(crate) fn outer_lambda(&self) -> f64 {
        if self.fair_mask_on {
            self.lambda_fair
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Inner,
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub level: Level,
    pub loss: f64,
    pub fhat: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub total_iterations: usize,
}

impl TrainLog {
    pub fn count(&self, level: Level) -> usize {
        self.records.iter().filter(|r| r.level == level).count()
    }
}

/// Called after every step with the running iteration count; returning
/// `true` stops the run early, keeping the model as it is.
pub type Monitor<'a> = &'a mut dyn FnMut(usize, &MaskedModel) -> bool;

pub(crate) struct Run<'a> {
    pub log: TrainLog,
    monitor: Option<Monitor<'a>>,
    pub stopped: bool,
    max_loss: f64,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &PruneConfig, monitor: Option<Monitor<'a>>) -> Self {
        Run {
            log: TrainLog::default(),
            monitor,
            stopped: false,
            max_loss: cfg.max_loss,
        }
    }

    pub fn record(&mut self, level: Level, stats: StepStats, model: &MaskedModel) -> Result<()> {
        self.log.total_iterations += 1;
        let step = self.log.total_iterations;
        self.log.records.push(StepRecord {
            step,
            level,
            loss: stats.loss,
            fhat: stats.fhat,
            sparsity: model.sparsity(),
        });
        if stats.total.is_nan() || stats.total > self.max_loss {
            return Err(Error::Diverged {
                iteration: step,
                loss: stats.total,
                log: Box::new(std::mem::take(&mut self.log)),
            });
        }
        if let Some(m) = self.monitor.as_mut() {
            if m(step, model) {
                self.stopped = true;
            }
        }
        Ok(())
    }
}

thread_local! {
    static UPDATES: Cell<u64> = const { Cell::new(0) };
}

/// Parameter updates (weight SGD steps plus mask-score steps) applied on the
/// current thread so far. Diagnostic counter, independent of `TrainLog`.
pub fn update_counter() -> u64 {
    UPDATES.with(|c| c.get())
}

fn bump_updates() {
    UPDATES.with(|c| c.set(c.get() + 1));
}

/// Loss, surrogate gap and penalized total of one evaluated step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub fhat: f64,
    pub total: f64,
}

/// `ℓ_c + λ·F̂²`, with the surrogate probabilities held fixed.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub lambda: f64,
    pub surrogate: Surrogate,
    pub stats: GroupStats,
}

/// Objective value and its gradients. Score gradients are empty unless
/// requested; weight gradients already carry the mask factor.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub stats: StepStats,
    pub weight_grads: Vec<Vec<f64>>,
    pub bias_grads: Vec<Vec<f64>>,
    pub score_grads: Vec<Vec<f64>>,
}

pub fn evaluate_objective(model: &MaskedModel, batch: &GroupedBatch, obj: &Objective, track: Track) -> Result<ObjectiveEval> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.x.clone())?;
    let (logits, vars) = model.forward_on(&mut tape, x, track)?;
    let loss = tape.logistic_loss(logits, &batch.labels)?;
    let loss_value = tape.value(loss).item();
    let (total, fhat) = if obj.lambda != 0.0 {
        let f = fairness_surrogate(&mut tape, logits, batch, &obj.stats, obj.surrogate)?;
        let fv = tape.value(f).item();
        let sq = tape.square(f)?;
        let pen = tape.scale(sq, obj.lambda)?;
        (tape.add(loss, pen)?, fv)
    } else {
        let fv = surrogate_value(tape.value(logits).data(), &batch.labels, &batch.groups, &obj.stats, obj.surrogate)
            .unwrap_or(f64::NAN);
        (loss, fv)
    };
    let total_value = tape.value(total).item();
    tape.backward(total)?;

    let grab = |vs: &[crate::autodiff::Var], what: &str| -> Result<Vec<Vec<f64>>> {
        vs.iter()
            .enumerate()
            .map(|(i, &v)| {
                let g = tape
                    .grad(v)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        context: format!("{what} of layer {i}"),
                    });
                }
                Ok(g)
            })
            .collect()
    };
    let (weight_grads, bias_grads) = if track.weights {
        (grab(&vars.weights, "weights")?, grab(&vars.biases, "biases")?)
    } else {
        (Vec::new(), Vec::new())
    };
    let score_grads = if track.scores {
        let s: Vec<_> = vars.scores.iter().map(|s| s.expect("scores tracked")).collect();
        grab(&s, "mask scores")?
    } else {
        Vec::new()
    };
    Ok(ObjectiveEval {
        stats: StepStats {
            loss: loss_value,
            fhat,
            total: total_value,
        },
        weight_grads,
        bias_grads,
        score_grads,
    })
}

/// One plain SGD step on weights and biases with the masks held fixed.
pub fn sgd_step(model: &mut MaskedModel, batch: &GroupedBatch, obj: &Objective, alpha: f64) -> Result<StepStats> {
    let eval = evaluate_objective(model, batch, obj, Track::WEIGHTS)?;
    for ((layer, gw), gb) in model.layers.iter_mut().zip(&eval.weight_grads).zip(&eval.bias_grads) {
        for (w, g) in layer.weight.data_mut().iter_mut().zip(gw) {
            *w -= alpha * g;
        }
        for (b, g) in layer.bias.data_mut().iter_mut().zip(gb) {
            *b -= alpha * g;
        }
    }
    bump_updates();
    Ok(eval.stats)
}

/// Inner-level update: `θ ← θ − α ∇_θ (ℓ_c + λ·F̂²)`; the penalty is dropped
/// when `fair_weight_on` is off. Masks and scores are untouched.
pub fn inner_update(model: &mut MaskedModel, batch: &GroupedBatch, cfg: &PruneConfig, stats: &GroupStats) -> Result<StepStats> {
    let obj = Objective {
        lambda: cfg.inner_lambda(),
        surrogate: cfg.surrogate,
        stats: *stats,
    };
    sgd_step(model, batch, &obj, cfg.alpha)
}

/// Endless stream of minibatch index sets. Each epoch reshuffles both groups
/// and deals them proportionally into `ceil(n / batch_size)` batches, so
/// every batch sees both groups whenever each group has at least that many
/// samples.
pub struct BatchStream {
    by_group: [Vec<usize>; 2],
    n_batches: usize,
    rng: ChaCha8Rng,
    queue: VecDeque<Vec<usize>>,
}

impl BatchStream {
    pub fn new(data: &GroupedDataset, batch_size: usize, seed: u64) -> Self {
        let n = data.len();
        BatchStream {
            by_group: [data.indices_of(Group::Favorable), data.indices_of(Group::Unfavorable)],
            n_batches: n.div_ceil(batch_size.max(1)).max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: VecDeque::new(),
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n_batches
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            let nb = self.n_batches;
            let mut batches = vec![Vec::new(); nb];
            for g in &mut self.by_group {
                g.shuffle(&mut self.rng);
                let ng = g.len();
                for (b, batch) in batches.iter_mut().enumerate() {
                    batch.extend_from_slice(&g[b * ng / nb..(b + 1) * ng / nb]);
                }
            }
            self.queue.extend(batches);
        }
        self.queue.pop_front().expect("refilled")
    }

    pub fn next_batch(&mut self, data: &GroupedDataset) -> GroupedBatch {
        let idx = self.next_indices();
        data.batch(&idx)
    }
}

/// Seeds for independent streams derived from one run seed.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 finalizer over (seed, stream).
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Masked SGD for `epochs` passes over `data`, recording every step.
pub(crate) fn train_epochs(
    model: &mut MaskedModel,
    data: &GroupedDataset,
    stream: &mut BatchStream,
    epochs: usize,
    obj: &Objective,
    alpha: f64,
    run: &mut Run<'_>,
) -> Result<()> {
    for _ in 0..epochs * stream.batches_per_epoch() {
        if run.stopped {
            return Ok(());
        }
        let batch = stream.next_batch(data);
        let stats = sgd_step(model, &batch, obj, alpha)?;
        run.record(Level::Inner, stats, model)?;
    }
    Ok(())
}

/// Dense training from scratch settings: all masks on, plain logistic loss.
pub fn train_dense(model: &MaskedModel, data: &GroupedDataset, epochs: usize, alpha: f64, batch_size: usize, seed: u64) -> Result<(MaskedModel, TrainLog)> {
    let mut m = model.clone();
    m.reset_masks();
    let cfg = PruneConfig {
        alpha,
        batch_size,
        ..PruneConfig::default()
    };
    let obj = Objective {
        lambda: 0.0,
        surrogate: cfg.surrogate,
        stats: GroupStats::of(data)?,
    };
    let mut run = Run::new(&cfg, None);
    let mut stream = BatchStream::new(data, batch_size, derive_seed(seed, 1));
    train_epochs(&mut m, data, &mut stream, epochs, &obj, alpha, &mut run)?;
    m.init_scores_from_magnitude();
    Ok((m, run.log))
}

/// Runs the pruner named by `cfg.method`.
pub fn prune(model: &MaskedModel, data: &GroupedDataset, cfg: &PruneConfig) -> Result<(MaskedModel, TrainLog)> {
    prune_monitored(model, data, cfg, None)
}

pub fn prune_monitored(model: &MaskedModel, data: &GroupedDataset, cfg: &PruneConfig, monitor: Option<Monitor<'_>>) -> Result<(MaskedModel, TrainLog)> {
    cfg.validate()?;
    data.require_both_groups()?;
    match cfg.method {
        Method::BifpStr | Method::BifpUns => bifp_prune_monitored(model, data, cfg, monitor),
        Method::Lottery => lottery::lottery_monitored(model, data, cfg, monitor),
        Method::Snip => snip::snip_monitored(model, data, cfg, monitor),
        Method::Fpgm => fpgm::fpgm_monitored(model, data, cfg, monitor),
        Method::FairThenPrune | Method::PruneThenFair => two_stage::two_stage_monitored(model, data, cfg, monitor),
    }
}

pub(crate) fn snapshot_params(model: &MaskedModel) -> (Vec<Tensor>, Vec<Tensor>) {
    (
        model.layers.iter().map(|l| l.weight.clone()).collect(),
        model.layers.iter().map(|l| l.bias.clone()).collect(),
    )
}

pub(crate) fn restore_params(model: &mut MaskedModel, weights: &[Tensor], biases: &[Tensor]) {
    for ((l, w), b) in model.layers.iter_mut().zip(weights).zip(biases) {
        l.weight = w.clone();
        l.bias = b.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{MaskMode, MaskedLayer};

    fn synth(n: usize, seed: u64) -> GroupedDataset {
        generate_synthetic(&SyntheticSpec {
            n,
            d: 6,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
        assert_eq!("unrolled-3".parse::<Hypergrad>().unwrap(), Hypergrad::Unrolled(3));
        assert_eq!(Hypergrad::FirstOrder.to_string(), "first-order");
        assert!("unrolled-0".parse::<Hypergrad>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::default().validate().is_ok());
        for bad in [
            PruneConfig { alpha: 0.0, ..Default::default() },
            PruneConfig { beta: -1.0, ..Default::default() },
            PruneConfig { target_sparsity: 1.0, ..Default::default() },
            PruneConfig { inner_steps_t: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn config_json_defaults_fill_in() {
        let cfg: PruneConfig = serde_json::from_str(r#"{"method":"snip","hypergrad":"unrolled-2"}"#).unwrap();
        assert_eq!(cfg.method, Method::Snip);
        assert_eq!(cfg.hypergrad, Hypergrad::Unrolled(2));
        assert_eq!(cfg.alpha, 0.05);
        assert!(serde_json::from_str::<PruneConfig>(r#"{"alfa":1}"#).is_err());
    }

    #[test]
    fn quadratic_sgd_step_by_hand() {
        // One weight, no bias effect: logit = w·x with x = 1. Use the tape
        // directly for (w − 3)² to mirror the update rule w ← w − α·2(w − 3).
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.0]), true).unwrap();
        let d = tape.add_scalar(w, -3.0).unwrap();
        let sq = tape.square(d).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(w).unwrap().data()[0];
        assert!((0.0 - 0.1 * g - 0.6).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_inner_update_is_plain_sgd() {
        let data = synth(120, 1);
        let stats = GroupStats::of(&data).unwrap();
        let mut m = MaskedModel::mlp(&[6, 8, 1], MaskMode::Unstructured, 4).unwrap();
        m.binarize_masks(0.5, Scope::PerLayer);
        let batch = data.full_batch();
        let cfg = PruneConfig {
            lambda_fair: 0.0,
            ..Default::default()
        };

        let mut reference = m.clone();
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone()).unwrap();
        let (logits, vars) = reference.forward_on(&mut tape, x, Track::WEIGHTS).unwrap();
        let loss = tape.logistic_loss(logits, &batch.labels).unwrap();
        tape.backward(loss).unwrap();
        for (i, l) in reference.layers.iter_mut().enumerate() {
            let gw = tape.grad(vars.weights[i]).unwrap().data().to_vec();
            let gb = tape.grad(vars.biases[i]).unwrap().data().to_vec();
            l.weight.data_mut().iter_mut().zip(gw).for_each(|(w, g)| *w -= cfg.alpha * g);
            l.bias.data_mut().iter_mut().zip(gb).for_each(|(b, g)| *b -= cfg.alpha * g);
        }

        inner_update(&mut m, &batch, &cfg, &stats).unwrap();
        assert_eq!(m, reference);

        // fair_weight_on = false is the same ablation.
        let mut a = m.clone();
        let mut b = m.clone();
        let off = PruneConfig {
            fair_weight_on: false,
            ..Default::default()
        };
        inner_update(&mut a, &batch, &off, &stats).unwrap();
        inner_update(&mut b, &batch, &cfg, &stats).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inner_update_leaves_masked_weights_and_scores() {
        let data = synth(100, 2);
        let stats = GroupStats::of(&data).unwrap();
        let mut m = MaskedModel::mlp(&[6, 5, 1], MaskMode::Unstructured, 8).unwrap();
        m.binarize_masks(0.6, Scope::PerLayer);
        let before = m.clone();
        inner_update(&mut m, &data.full_batch(), &PruneConfig::default(), &stats).unwrap();
        for (a, b) in m.layers.iter().zip(&before.layers) {
            assert_eq!(a.mask_scores, b.mask_scores);
            assert_eq!(a.binary_mask, b.binary_mask);
            for ((wa, wb), mk) in a.weight.data().iter().zip(b.weight.data()).zip(b.binary_mask.data()) {
                if *mk == 0.0 {
                    assert_eq!(wa, wb);
                }
            }
        }
        assert_ne!(m, before);
    }

    #[test]
    fn batches_cover_epoch_with_both_groups() {
        let data = synth(200, 3);
        let mut s = BatchStream::new(&data, 32, 9);
        let nb = s.batches_per_epoch();
        assert_eq!(nb, 7);
        let mut seen = Vec::new();
        for _ in 0..nb {
            let idx = s.next_indices();
            let b = data.batch(&idx);
            assert!(b.groups.contains(&Group::Favorable) && b.groups.contains(&Group::Unfavorable));
            seen.extend(idx);
        }
        seen.sort();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let l = MaskedLayer::new(
            Tensor::matrix(1, 1, vec![1e300]).unwrap(),
            Tensor::vector(vec![0.0]),
            MaskMode::Unstructured,
        )
        .unwrap();
        let mut m = MaskedModel::new(vec![l]).unwrap();
        let batch = GroupedBatch {
            x: Tensor::matrix(2, 1, vec![1e10, -1e10]).unwrap(),
            labels: vec![-1.0, 1.0],
            groups: vec![Group::Favorable, Group::Unfavorable],
        };
        let stats = GroupStats::from_groups(&batch.groups).unwrap();
        let err = inner_update(&mut m, &batch, &PruneConfig::default(), &stats).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_) | Error::NonFiniteGradient { .. }), "{err}");
    }
}
