//! Bi-level fairness-aware pruning: SGD on weights below, SGD on mask scores
//! above, with the hard masks re-projected after every outer step.

use std::collections::VecDeque;

use super::{
    derive_seed, evaluate_objective, inner_update, restore_params, snapshot_params, BatchStream, Hypergrad, Level,
    Method, Monitor, Objective, PruneConfig, Run, StepStats, TrainLog,
};
use crate::autodiff::Tensor;
use crate::data::{GroupedBatch, GroupedDataset};
use crate::error::{Error, Result};
use crate::fairness::GroupStats;
use crate::model::{MaskMode, MaskedModel, Track};

/// Finite-difference radius of the Hessian-vector products, relative to ‖v‖.
const FD_RADIUS: f64 = 0.01;

/// Parameters and batch of one inner step, taken before the update.
#[derive(Debug, Clone)]
pub struct InnerStep {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub batch: GroupedBatch,
}

impl InnerStep {
    pub fn capture(model: &MaskedModel, batch: &GroupedBatch) -> Self {
        let (weights, biases) = snapshot_params(model);
        InnerStep {
            weights,
            biases,
            batch: batch.clone(),
        }
    }
}

fn objectives(cfg: &PruneConfig, stats: &GroupStats) -> (Objective, Objective) {
    let inner = Objective {
        lambda: cfg.inner_lambda(),
        surrogate: cfg.surrogate,
        stats: *stats,
    };
    let outer = Objective {
        lambda: cfg.outer_lambda(),
        ..inner
    };
    (inner, outer)
}

/// Gradient of the outer objective with respect to the mask scores.
///
/// First-order: the straight-through gradient at the current weights.
/// Unrolled-n: additionally back-propagates through the last `n` entries of
/// `history` (oldest first), approximating each Hessian-vector product by a
/// central difference of inner gradients.
pub fn mask_hypergradient(
    model: &MaskedModel,
    batch: &GroupedBatch,
    cfg: &PruneConfig,
    stats: &GroupStats,
    history: &[InnerStep],
) -> Result<(StepStats, Vec<Vec<f64>>)> {
    let (inner, outer) = objectives(cfg, stats);
    let unroll = match cfg.hypergrad {
        Hypergrad::FirstOrder => 0,
        Hypergrad::Unrolled(n) => n.min(history.len()),
    };
    let track = if unroll > 0 { Track::BOTH } else { Track::SCORES };
    let eval = evaluate_objective(model, batch, &outer, track)?;
    let mut g_m = eval.score_grads;
    if unroll == 0 {
        return Ok((eval.stats, g_m));
    }

    let mut v: Vec<Vec<f64>> = eval.weight_grads.into_iter().chain(eval.bias_grads).collect();
    let n_layers = model.layers.len();
    let mut probe = model.clone();
    for step in history[history.len() - unroll..].iter().rev() {
        let norm = v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let eps = FD_RADIUS / norm;
        let mut side = |sign: f64| -> Result<_> {
            restore_params(&mut probe, &step.weights, &step.biases);
            for (l, layer) in probe.layers.iter_mut().enumerate() {
                for (p, d) in layer.weight.data_mut().iter_mut().zip(&v[l]) {
                    *p += sign * eps * d;
                }
                for (p, d) in layer.bias.data_mut().iter_mut().zip(&v[n_layers + l]) {
                    *p += sign * eps * d;
                }
            }
            evaluate_objective(&probe, &step.batch, &inner, Track::BOTH)
        };
        let plus = side(1.0)?;
        let minus = side(-1.0)?;
        let c = cfg.alpha / (2.0 * eps);
        for (g, (p, m)) in g_m.iter_mut().zip(plus.score_grads.iter().zip(&minus.score_grads)) {
            for ((gi, pi), mi) in g.iter_mut().zip(p).zip(m) {
                *gi -= c * (pi - mi);
            }
        }
        let plus_theta = plus.weight_grads.iter().chain(&plus.bias_grads);
        let minus_theta = minus.weight_grads.iter().chain(&minus.bias_grads);
        for (vl, (p, m)) in v.iter_mut().zip(plus_theta.zip(minus_theta)) {
            for ((vi, pi), mi) in vl.iter_mut().zip(p).zip(m) {
                *vi -= c * (pi - mi);
            }
        }
    }
    for (i, g) in g_m.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                context: format!("hypergradient of layer {i}"),
            });
        }
    }
    Ok((eval.stats, g_m))
}

/// One outer step: `s ← clip(s − β g_m, 0, 1)`, then hard top-k at
/// `cfg.target_sparsity` in the model's current mask mode. Weights are
/// untouched.
pub fn outer_update(
    model: &mut MaskedModel,
    batch: &GroupedBatch,
    cfg: &PruneConfig,
    stats: &GroupStats,
    history: &[InnerStep],
) -> Result<StepStats> {
    let (step_stats, g_m) = mask_hypergradient(model, batch, cfg, stats, history)?;
    for (layer, g) in model.layers.iter_mut().zip(&g_m) {
        for (s, gi) in layer.mask_scores.data_mut().iter_mut().zip(g) {
            *s = (*s - cfg.beta * gi).clamp(0.0, 1.0);
        }
    }
    model.binarize_masks(cfg.target_sparsity, cfg.scope);
    super::bump_updates();
    Ok(step_stats)
}

pub fn bifp_prune(model: &MaskedModel, data: &GroupedDataset, cfg: &PruneConfig) -> Result<(MaskedModel, TrainLog)> {
    bifp_prune_monitored(model, data, cfg, None)
}

/// `T` inner steps, then `outer_steps` rounds of (one outer step, `T` inner
/// steps). The mode comes from the method (`bifp-str` is structured) and the
/// scores start from weight magnitudes, so the initial mask is magnitude
/// pruning.
pub fn bifp_prune_monitored(
    model: &MaskedModel,
    data: &GroupedDataset,
    cfg: &PruneConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<(MaskedModel, TrainLog)> {
    cfg.validate()?;
    let stats = GroupStats::of(data)?;
    let mut m = model.clone();
    m.set_mode(if cfg.method == Method::BifpStr {
        MaskMode::Structured
    } else {
        MaskMode::Unstructured
    });
    m.init_scores_from_magnitude();
    m.binarize_masks(cfg.target_sparsity, cfg.scope);

    let keep = match cfg.hypergrad {
        Hypergrad::FirstOrder => 0,
        Hypergrad::Unrolled(n) => n,
    };
    let mut history: VecDeque<InnerStep> = VecDeque::with_capacity(keep);
    let mut stream = BatchStream::new(data, cfg.batch_size, derive_seed(cfg.seed, 2));
    let mut run = Run::new(cfg, monitor);

    for round in 0..=cfg.outer_steps {
        if round > 0 {
            let batch = stream.next_batch(data);
            let past: Vec<InnerStep> = history.drain(..).collect();
            let s = outer_update(&mut m, &batch, cfg, &stats, &past)?;
            run.record(Level::Outer, s, &m)?;
            if run.stopped {
                break;
            }
        }
        for _ in 0..cfg.inner_steps_t {
            let batch = stream.next_batch(data);
            if keep > 0 {
                if history.len() == keep {
                    history.pop_front();
                }
                history.push_back(InnerStep::capture(&m, &batch));
            }
            let s = inner_update(&mut m, &batch, cfg, &stats)?;
            run.record(Level::Inner, s, &m)?;
            if run.stopped {
                break;
            }
        }
        if run.stopped {
            break;
        }
    }
    Ok((m, run.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Group, SyntheticSpec};
    use crate::fairness::Surrogate;
    use crate::model::{MaskedLayer, Scope};
    use crate::pruners::train_dense;

    fn synth(n: usize, seed: u64) -> GroupedDataset {
        generate_synthetic(&SyntheticSpec {
            n,
            d: 5,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_model(seed: u64) -> MaskedModel {
        let mut m = MaskedModel::mlp(&[5, 6, 1], MaskMode::Unstructured, seed).unwrap();
        m.init_scores_from_magnitude();
        m.binarize_masks(0.4, Scope::PerLayer);
        m
    }

    /// Outer objective as a function of the relaxed mask: weights are
    /// multiplied by `masks` directly (no hard re-projection).
    fn outer_at(model: &MaskedModel, masks: &[Vec<f64>], batch: &GroupedBatch, obj: &Objective) -> f64 {
        let mut m = model.clone();
        for (l, mk) in m.layers.iter_mut().zip(masks) {
            l.binary_mask.data_mut().copy_from_slice(mk);
        }
        evaluate_objective(&m, batch, obj, Track::NONE).unwrap().stats.total
    }

    fn fd_mask_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, masks: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for l in 0..masks.len() {
            let mut row = Vec::new();
            for j in 0..masks[l].len() {
                let mut p = masks.to_vec();
                let mut q = masks.to_vec();
                p[l][j] += h;
                q[l][j] -= h;
                row.push((f(&p) - f(&q)) / (2.0 * h));
            }
            out.push(row);
        }
        out
    }

    #[test]
    fn first_order_matches_finite_difference() {
        let data = synth(80, 1);
        let stats = GroupStats::of(&data).unwrap();
        let batch = data.full_batch();
        let model = small_model(3);
        let cfg = PruneConfig::default();
        let (_, g) = mask_hypergradient(&model, &batch, &cfg, &stats, &[]).unwrap();

        let obj = Objective {
            lambda: cfg.lambda_fair,
            surrogate: cfg.surrogate,
            stats,
        };
        let masks: Vec<Vec<f64>> = model.layers.iter().map(|l| l.binary_mask.data().to_vec()).collect();
        let fd = fd_mask_grad(&|mk| outer_at(&model, mk, &batch, &obj), &masks, 1e-6);
        for (a, b) in g.iter().flatten().zip(fd.iter().flatten()) {
            assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn unrolled_one_matches_total_derivative_on_toy() {
        // Two weights, one bias, logit = w·x + b; smooth in (θ, M).
        let data = generate_synthetic(&SyntheticSpec {
            n: 40,
            d: 2,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let stats = GroupStats::of(&data).unwrap();
        let inner_batch = data.batch(&(0..20).collect::<Vec<_>>());
        let outer_batch = data.batch(&(20..40).collect::<Vec<_>>());
        let layer = MaskedLayer::new(
            Tensor::matrix(1, 2, vec![0.7, -0.4]).unwrap(),
            Tensor::vector(vec![0.1]),
            MaskMode::Unstructured,
        )
        .unwrap();
        let mut model0 = MaskedModel::new(vec![layer]).unwrap();
        model0.layers[0].binary_mask = Tensor::matrix(1, 2, vec![1.0, 0.8]).unwrap();
        let cfg = PruneConfig {
            hypergrad: Hypergrad::Unrolled(1),
            alpha: 0.5,
            ..Default::default()
        };
        let (inner, outer) = objectives(&cfg, &stats);

        // Relaxed masks M: θ1 = θ0 − α ∇θ L_in(θ0, M); J(M) = L_out(θ1(M), M).
        let j = |mk: &[Vec<f64>]| -> f64 {
            let mut m = model0.clone();
            for (l, row) in m.layers.iter_mut().zip(mk) {
                l.binary_mask.data_mut().copy_from_slice(row);
            }
            super::super::sgd_step(&mut m, &inner_batch, &inner, cfg.alpha).unwrap();
            evaluate_objective(&m, &outer_batch, &outer, Track::NONE).unwrap().stats.total
        };
        let masks: Vec<Vec<f64>> = model0.layers.iter().map(|l| l.binary_mask.data().to_vec()).collect();
        let fd = fd_mask_grad(&j, &masks, 1e-5);

        let history = vec![InnerStep::capture(&model0, &inner_batch)];
        let mut model1 = model0.clone();
        inner_update(&mut model1, &inner_batch, &cfg, &stats).unwrap();
        let (_, g) = mask_hypergradient(&model1, &outer_batch, &cfg, &stats, &history).unwrap();
        for (a, b) in g.iter().flatten().zip(fd.iter().flatten()) {
            assert!((a - b).abs() <= 1e-3 * b.abs(), "{a} vs {b}");
        }

        // The first-order gradient misses a visible part of it.
        let fo = PruneConfig {
            hypergrad: Hypergrad::FirstOrder,
            ..cfg.clone()
        };
        let (_, g0) = mask_hypergradient(&model1, &outer_batch, &fo, &stats, &history).unwrap();
        let worst = g0.iter().flatten().zip(fd.iter().flatten()).map(|(a, b)| (a - b).abs() / b.abs()).fold(0.0, f64::max);
        assert!(worst > 1e-2, "{worst}");
    }

    #[test]
    fn beta_zero_leaves_scores_and_mask() {
        let data = synth(60, 3);
        let stats = GroupStats::of(&data).unwrap();
        let mut m = small_model(7);
        let cfg = PruneConfig {
            target_sparsity: 0.4,
            beta: 0.0,
            ..Default::default()
        };
        let before = m.clone();
        outer_update(&mut m, &data.full_batch(), &cfg, &stats, &[]).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn outer_update_keeps_weights_and_sparsity() {
        let data = synth(60, 4);
        let stats = GroupStats::of(&data).unwrap();
        let mut m = small_model(9);
        let cfg = PruneConfig {
            target_sparsity: 0.4,
            beta: 5.0,
            ..Default::default()
        };
        let before = m.clone();
        outer_update(&mut m, &data.full_batch(), &cfg, &stats, &[]).unwrap();
        for (a, b) in m.layers.iter().zip(&before.layers) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
            assert!(a.mask_scores.data().iter().all(|s| (0.0..=1.0).contains(s)));
        }
        assert_eq!(m.kept_count(), before.kept_count());
    }

    #[test]
    fn score_step_by_hand() {
        // Single weight w = 2, x = 1, y = +1, bias 0: ℓ = softplus(−2),
        // ∂ℓ/∂m = −σ(−2)·w. λ = 0, β = 0.1, s0 = 0.5.
        let l = MaskedLayer::new(
            Tensor::matrix(1, 1, vec![2.0]).unwrap(),
            Tensor::vector(vec![0.0]),
            MaskMode::Unstructured,
        )
        .unwrap();
        let mut m = MaskedModel::new(vec![l]).unwrap();
        m.layers[0].mask_scores = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        let batch = GroupedBatch {
            x: Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
            labels: vec![1.0, 1.0],
            groups: vec![Group::Favorable, Group::Unfavorable],
        };
        let stats = GroupStats::from_groups(&batch.groups).unwrap();
        let cfg = PruneConfig {
            lambda_fair: 0.0,
            beta: 0.1,
            target_sparsity: 0.0,
            ..Default::default()
        };
        outer_update(&mut m, &batch, &cfg, &stats, &[]).unwrap();
        let expect = 0.5 + 0.1 * crate::autodiff::sigmoid(-2.0) * 2.0;
        assert!((m.layers[0].mask_scores.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn run_shape_and_sparsity() {
        let data = synth(200, 5);
        let (dense, _) = train_dense(&MaskedModel::mlp(&[5, 8, 4, 1], MaskMode::Unstructured, 1).unwrap(), &data, 3, 0.1, 32, 0).unwrap();
        for method in [Method::BifpUns, Method::BifpStr] {
            let cfg = PruneConfig {
                method,
                target_sparsity: 0.5,
                inner_steps_t: 3,
                outer_steps: 4,
                batch_size: 32,
                ..Default::default()
            };
            let (m, log) = bifp_prune(&dense, &data, &cfg).unwrap();
            assert_eq!(log.count(Level::Outer), 4);
            assert_eq!(log.count(Level::Inner), 15);
            assert_eq!(log.total_iterations, 19);
            let unit = if method == Method::BifpStr { 8.0 / 36.0 } else { 1.0 / 36.0 };
            assert!((m.sparsity() - 0.5).abs() <= unit, "{method}: {}", m.sparsity());
            for r in &log.records {
                assert!((r.sparsity - m.sparsity()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_outer_steps_is_magnitude_mask_plus_inner_block() {
        let data = synth(120, 6);
        let m0 = MaskedModel::mlp(&[5, 6, 1], MaskMode::Unstructured, 2).unwrap();
        let cfg = PruneConfig {
            outer_steps: 0,
            inner_steps_t: 2,
            batch_size: 40,
            ..Default::default()
        };
        let (m, log) = bifp_prune(&m0, &data, &cfg).unwrap();
        assert_eq!(log.total_iterations, 2);
        let mut mag = m0.clone();
        mag.init_scores_from_magnitude();
        mag.binarize_masks(cfg.target_sparsity, cfg.scope);
        for (a, b) in m.layers.iter().zip(&mag.layers) {
            assert_eq!(a.binary_mask, b.binary_mask);
        }
    }

    #[test]
    fn divergence_is_reported_with_log() {
        let data = synth(100, 7);
        let m0 = MaskedModel::mlp(&[5, 6, 1], MaskMode::Unstructured, 2).unwrap();
        let cfg = PruneConfig {
            alpha: 1e4,
            outer_steps: 50,
            lambda_fair: 0.0,
            max_loss: 1e3,
            ..Default::default()
        };
        match bifp_prune(&m0, &data, &cfg) {
            Err(Error::Diverged { log, iteration, .. }) => {
                assert_eq!(log.total_iterations, iteration);
                assert!(iteration >= 1);
            }
            Err(Error::NonFinite(_)) | Err(Error::NonFiniteGradient { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let data = synth(150, 8);
        let m0 = MaskedModel::mlp(&[5, 6, 1], MaskMode::Unstructured, 2).unwrap();
        let cfg = PruneConfig {
            outer_steps: 5,
            hypergrad: Hypergrad::Unrolled(2),
            surrogate: Surrogate::Sigmoid { kappa: 2.0 },
            ..Default::default()
        };
        let a = bifp_prune(&m0, &data, &cfg).unwrap();
        let b = bifp_prune(&m0, &data, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
