//! Paired-run behavior on the synthetic biased set (5 seeds, default
//! protocol) plus the experiment drivers' edge cases.

use bifp_core::fairness::{dataset_surrogate, performance_fairness, GroupStats, Surrogate};
use bifp_core::harness::{
    ablate, interpolation_curve, lth_ladder, measure_iterations, prepare_trial, run_cell, tradeoff_curve, Ablation,
    DatasetSource, Protocol, SweepSpec, Targets, TradeoffPoint, Trial,
};
use bifp_core::pruners::{inner_update, loss_interpolation, train_dense, BatchStream, Method, PruneConfig};
use bifp_core::SyntheticSpec;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const CLEAN_GAP_MAX: f64 = 0.03;
const BIASED_GAP_MIN: f64 = 0.05;
const ACC_NOISE: f64 = 0.02;

fn trials(source: &DatasetSource) -> Vec<Trial> {
    SEEDS.iter().map(|&s| prepare_trial(source, &Protocol::default(), s).unwrap()).collect()
}

fn biased() -> Vec<Trial> {
    trials(&DatasetSource::default())
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn cfg(method: Method, sparsity: f64, seed: u64) -> PruneConfig {
    PruneConfig {
        method,
        target_sparsity: sparsity,
        seed,
        ..PruneConfig::default()
    }
}

#[test]
fn unbiased_generator_gives_small_dense_gap() {
    let source = DatasetSource::Synthetic {
        spec: SyntheticSpec {
            label_noise_pos: 0.05,
            label_noise_neg: 0.05,
            cov_inflation: 1.0,
            ..SyntheticSpec::default()
        },
        per_seed: true,
        clean_test: true,
    };
    let gap = mean(trials(&source).iter().map(|t| performance_fairness(&t.dense, &t.test).unwrap()));
    println!("equal noise, identical covariance: mean dense perf_gap {gap:.4}");
    assert!(gap <= CLEAN_GAP_MAX, "{gap}");
}

#[test]
fn biased_generator_gap_and_lottery_at_ninety() {
    let ts = biased();
    let dense = mean(ts.iter().map(|t| performance_fairness(&t.dense, &t.test).unwrap()));
    let recs: Vec<_> = ts.iter().map(|t| run_cell(t, &cfg(Method::Lottery, 0.9, t.seed))).collect();
    assert!(recs.iter().all(|r| r.error.is_none()));
    let pruned = mean(recs.iter().map(|r| r.perf_gap));
    let degradation = mean(recs.iter().map(|r| r.degradation_gap));
    println!("dense perf_gap {dense:.4}; lottery at 0.9: perf_gap {pruned:.4}, degradation_gap {degradation:.4}");
    assert!(dense >= BIASED_GAP_MIN);
    assert!(degradation > 0.0);
    assert!(pruned > dense);
}

#[test]
fn fairness_penalty_shrinks_the_surrogate() {
    let mut wins = 0;
    for t in &biased() {
        let stats = GroupStats::of(&t.train).unwrap();
        let fhat = |lambda: f64| {
            let cfg = PruneConfig {
                lambda_fair: lambda,
                ..PruneConfig::default()
            };
            let mut m = t.dense.clone();
            let mut stream = BatchStream::new(&t.train, cfg.batch_size, t.seed);
            for _ in 0..200 {
                inner_update(&mut m, &stream.next_batch(&t.train), &cfg, &stats).unwrap();
            }
            dataset_surrogate(&m, &t.train, Surrogate::default()).unwrap().abs()
        };
        let (with, without) = (fhat(1.0), fhat(0.0));
        println!("seed {}: |F_hat| after 200 steps {with:.4} (λ = 1) vs {without:.4} (λ = 0)", t.seed);
        wins += usize::from(with < without);
    }
    assert_eq!(wins, SEEDS.len());
}

#[test]
fn bifp_at_zero_sparsity_trains_towards_fairness() {
    let ts = biased();
    let before = mean(ts.iter().map(|t| performance_fairness(&t.dense, &t.test).unwrap()));
    let after = mean(ts.iter().map(|t| run_cell(t, &cfg(Method::BifpUns, 0.0, t.seed)).perf_gap));
    println!("bifp-uns at sparsity 0: perf_gap {after:.4} vs input model {before:.4}");
    assert!(after < before);
}

#[test]
fn unpenalized_bifp_accuracy_matches_lottery() {
    let s = lth_ladder(7)[6];
    let spec = SweepSpec {
        methods: vec![Method::BifpUns],
        sparsities: vec![s],
        seeds: SEEDS.to_vec(),
        ..SweepSpec::default()
    };
    let bare = mean(
        ablate(&spec, None)
            .unwrap()
            .iter()
            .filter(|r| r.variant == Ablation::WithoutBoth)
            .map(|r| r.record.acc_overall),
    );
    let lottery = mean(biased().iter().map(|t| run_cell(t, &cfg(Method::Lottery, s, t.seed)).acc_overall));
    println!("sparsity {s:.3}: accuracy without w&m {bare:.4} vs lottery {lottery:.4}");
    assert!((bare - lottery).abs() <= ACC_NOISE);
}

fn mean_curve(points: &[TradeoffPoint], lambdas: &[f64]) -> Vec<(f64, f64)> {
    lambdas
        .iter()
        .map(|&l| {
            let at: Vec<_> = points.iter().filter(|p| p.lambda == l).collect();
            (mean(at.iter().map(|p| p.acc)), mean(at.iter().map(|p| p.perf_gap)))
        })
        .collect()
}

#[test]
fn bifp_tradeoff_is_not_dominated_by_prune_then_fair() {
    let lambdas = [0.0, 0.5, 1.0, 2.0, 4.0];
    let s = lth_ladder(5)[4];
    let ts = biased();
    let curve = |m: Method| {
        let pts: Vec<TradeoffPoint> = ts
            .iter()
            .flat_map(|t| tradeoff_curve(t, &PruneConfig::default(), m, s, &lambdas).unwrap())
            .collect();
        mean_curve(&pts, &lambdas)
    };
    let bifp = curve(Method::BifpUns);
    let pnf = curve(Method::PruneThenFair);
    println!("bifp-uns (acc, gap) by λ: {bifp:.4?}");
    println!("prune-then-fair (acc, gap) by λ: {pnf:.4?}");
    for &(acc, gap) in &pnf {
        assert!(
            !bifp.iter().all(|&(a, g)| acc > a && gap < g),
            "({acc}, {gap}) dominates every bifp point"
        );
    }
}

#[test]
fn tradeoff_edge_cases() {
    let t = &biased()[0];
    let base = PruneConfig::default();
    let one = tradeoff_curve(t, &base, Method::BifpUns, 0.36, &[0.7]).unwrap();
    assert_eq!(one.len(), 1);

    let zero = tradeoff_curve(t, &base, Method::BifpUns, 0.36, &[0.0]).unwrap()[0];
    let plain = run_cell(
        t,
        &PruneConfig {
            lambda_fair: 0.0,
            ..cfg(Method::BifpUns, 0.36, t.seed)
        },
    );
    assert_eq!((zero.acc, zero.perf_gap), (plain.acc_overall, plain.perf_gap));

    let pnf = tradeoff_curve(t, &base, Method::PruneThenFair, 0.36, &[0.0]).unwrap()[0];
    let lottery = run_cell(t, &cfg(Method::Lottery, 0.36, t.seed));
    assert_eq!((pnf.acc, pnf.perf_gap), (lottery.acc_overall, lottery.perf_gap));

    assert!(tradeoff_curve(t, &base, Method::Snip, 0.36, &[1.0]).is_err());
}

#[test]
fn interpolation_constant_and_barrier_report() {
    let ts = biased();
    let t = &ts[0];
    let flat = loss_interpolation(&t.dense, &t.dense, &t.test, 5, Surrogate::default()).unwrap();
    assert!(flat.iter().all(|p| p.loss == flat[0].loss && p.fhat == flat[0].fhat));

    let curve = interpolation_curve(t, &cfg(Method::BifpUns, 0.672, t.seed), Ablation::WithoutBoth, 5).unwrap();
    assert_eq!(curve.len(), 5);
    assert_eq!(curve[0].t, 0.0);

    // Independently initialized nets: reported only.
    let mut barriers = 0;
    for t in &ts {
        let protocol = Protocol::default();
        let train = |seed: u64| {
            let mut widths = vec![t.train.dim()];
            widths.extend(&protocol.hidden);
            widths.push(1);
            let init = bifp_core::MaskedModel::mlp(&widths, bifp_core::MaskMode::Unstructured, seed).unwrap();
            train_dense(&init, &t.train, protocol.pretrain_epochs, protocol.pretrain_alpha, protocol.batch_size, seed)
                .unwrap()
                .0
        };
        let (a, b) = (train(1000 + t.seed), train(2000 + t.seed));
        let pts = loss_interpolation(&a, &b, &t.test, 3, Surrogate::default()).unwrap();
        barriers += usize::from(pts[1].loss >= pts[0].loss.max(pts[2].loss));
    }
    println!("midpoint loss above both endpoints in {barriers}/{} seeds", ts.len());
}

#[test]
fn prune_then_fair_costs_more_iterations() {
    // Not-reached runs count as a cap above either budget.
    const CENSORED: usize = 10_000;
    let mut spec = SweepSpec {
        methods: vec![Method::BifpUns, Method::PruneThenFair],
        sparsities: vec![lth_ladder(5)[4]],
        seeds: SEEDS.to_vec(),
        ..SweepSpec::default()
    };
    spec.overrides.insert(Method::BifpUns, serde_json::json!({ "outer_steps": 100 }));
    let targets = Targets {
        min_acc: 0.8,
        max_gap: 0.05,
    };
    let rows = measure_iterations(&spec, targets, None).unwrap();
    let total = |m: Method| -> usize {
        rows.iter()
            .filter(|r| r.method == m)
            .map(|r| {
                assert!(r.error.is_none());
                r.iterations.unwrap_or(CENSORED)
            })
            .sum()
    };
    let (bifp, pnf) = (total(Method::BifpUns), total(Method::PruneThenFair));
    println!("iterations over 5 seeds (not reached = {CENSORED}): bifp-uns {bifp}, prune-then-fair {pnf}");
    assert!(pnf > bifp);
}
