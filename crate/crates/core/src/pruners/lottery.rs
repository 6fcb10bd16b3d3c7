//! Iterative magnitude pruning with weight rewinding.

use super::{derive_seed, restore_params, snapshot_params, train_epochs, BatchStream, Monitor, Objective, PruneConfig, Run, TrainLog};
use crate::data::GroupedDataset;
use crate::error::Result;
use crate::fairness::GroupStats;
use crate::model::{apportion_per_layer, kept_for, top_k, MaskMode, MaskedModel, Scope};

/// Fraction of the remaining weights removed per round.
pub const ROUND_RATE: f64 = 0.2;

/// Rounds needed to reach `target` at 20% per round.
pub fn lottery_rounds(target: f64) -> usize {
    if target <= 0.0 {
        return 0;
    }
    ((1.0 - target).ln() / (1.0 - ROUND_RATE).ln() - 1e-9).ceil().max(1.0) as usize
}

/// Keeps the `keep` largest-magnitude weights among those currently kept.
/// Per-layer scope splits `keep` in proportion to each layer's current kept
/// count, so no pruned weight comes back.
pub fn magnitude_prune_round(model: &mut MaskedModel, keep: usize, scope: Scope) {
    let scores: Vec<Vec<f64>> = model
        .layers
        .iter()
        .map(|l| {
            l.weight
                .data()
                .iter()
                .zip(l.binary_mask.data())
                .map(|(w, m)| if *m != 0.0 { w.abs() } else { -1.0 })
                .collect()
        })
        .collect();
    let masks: Vec<Vec<bool>> = match scope {
        Scope::Global => {
            let flat: Vec<f64> = scores.iter().flatten().copied().collect();
            let kept = top_k(&flat, keep);
            let mut off = 0;
            scores
                .iter()
                .map(|s| {
                    let m = kept[off..off + s.len()].to_vec();
                    off += s.len();
                    m
                })
                .collect()
        }
        Scope::PerLayer => {
            let current: Vec<usize> = model.layers.iter().map(|l| l.kept()).collect();
            let alloc = apportion_per_layer(&current, keep);
            scores.iter().zip(alloc).map(|(s, k)| top_k(s, k)).collect()
        }
    };
    for (l, m) in model.layers.iter_mut().zip(masks) {
        for (dst, k) in l.binary_mask.data_mut().iter_mut().zip(m) {
            *dst = if k { 1.0 } else { 0.0 };
        }
        l.mask_scores = l.binary_mask.clone();
    }
}

pub fn lottery(model: &MaskedModel, data: &GroupedDataset, cfg: &PruneConfig) -> Result<(MaskedModel, TrainLog)> {
    lottery_monitored(model, data, cfg, None)
}

pub(crate) fn lottery_monitored(
    model: &MaskedModel,
    data: &GroupedDataset,
    cfg: &PruneConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<(MaskedModel, TrainLog)> {
    cfg.validate()?;
    let mut run = Run::new(cfg, monitor);
    let m = lottery_with(model, data, cfg, 0.0, &mut run)?;
    Ok((m, run.log))
}

/// Each round trains `epochs_per_round` epochs, drops 20% of the remaining
/// weights by magnitude (the last round lands exactly on the target) and
/// rewinds the survivors to the starting weights. The final ticket is then
/// trained for `finetune_epochs` with penalty weight `final_lambda`.
pub(crate) fn lottery_with(
    model: &MaskedModel,
    data: &GroupedDataset,
    cfg: &PruneConfig,
    final_lambda: f64,
    run: &mut Run<'_>,
) -> Result<MaskedModel> {
    let rounds = lottery_rounds(cfg.target_sparsity);
    let mut m = model.clone();
    if rounds == 0 {
        return Ok(m);
    }
    m.set_mode(MaskMode::Unstructured);
    m.reset_masks();
    let (w0, b0) = snapshot_params(&m);
    let total = m.weight_count();
    let stats = GroupStats::of(data)?;
    let plain = Objective {
        lambda: 0.0,
        surrogate: cfg.surrogate,
        stats,
    };
    let mut stream = BatchStream::new(data, cfg.batch_size, derive_seed(cfg.seed, 3));
    let final_keep = kept_for(total, cfg.target_sparsity);

    for r in 1..=rounds {
        train_epochs(&mut m, data, &mut stream, cfg.epochs_per_round, &plain, cfg.alpha, run)?;
        if run.stopped {
            return Ok(m);
        }
        let keep = if r == rounds {
            final_keep
        } else {
            ((total as f64 * (1.0 - ROUND_RATE).powi(r as i32)).round() as usize).max(final_keep)
        };
        magnitude_prune_round(&mut m, keep, cfg.scope);
        restore_params(&mut m, &w0, &b0);
    }
    let fine = Objective {
        lambda: final_lambda,
        ..plain
    };
    train_epochs(&mut m, data, &mut stream, cfg.finetune_epochs, &fine, cfg.alpha, run)?;
    Ok(m)
}
