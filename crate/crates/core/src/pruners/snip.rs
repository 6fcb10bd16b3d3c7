//! Single-shot pruning by connection sensitivity |g ⊙ θ|.

use super::{derive_seed, evaluate_objective, train_epochs, BatchStream, Monitor, Objective, PruneConfig, Run, TrainLog};
use crate::data::{GroupedBatch, GroupedDataset};
use crate::error::{Error, Result};
use crate::fairness::GroupStats;
use crate::model::{kept_for, top_k, MaskMode, MaskedModel, Track};

/// Normalized `|∂ℓ/∂w · w|` per weight at the dense model; sums to one.
pub fn snip_sensitivity(model: &MaskedModel, batch: &GroupedBatch) -> Result<Vec<Vec<f64>>> {
    let mut dense = model.clone();
    dense.reset_masks();
    let obj = Objective {
        lambda: 0.0,
        surrogate: Default::default(),
        stats: GroupStats::from_groups(&batch.groups).unwrap_or(GroupStats {
            n_pos_group: 1,
            n_neg_group: 1,
            p_pos: 0.5,
            p_neg: 0.5,
        }),
    };
    let eval = evaluate_objective(&dense, batch, &obj, Track::WEIGHTS)?;
    let raw: Vec<Vec<f64>> = eval
        .weight_grads
        .iter()
        .zip(&dense.layers)
        .map(|(g, l)| g.iter().zip(l.weight.data()).map(|(g, w)| (g * w).abs()).collect())
        .collect();
    let total: f64 = raw.iter().flatten().sum();
    if total == 0.0 {
        return Err(Error::ZeroSensitivity);
    }
    Ok(raw.into_iter().map(|r| r.into_iter().map(|x| x / total).collect()).collect())
}

pub fn snip_prune(model: &MaskedModel, data: &GroupedDataset, cfg: &PruneConfig) -> Result<(MaskedModel, TrainLog)> {
    snip_monitored(model, data, cfg, None)
}

/// One minibatch of sensitivities, a global top-k mask, then
/// `finetune_epochs` of masked training. An all-zero sensitivity draws one
/// more batch before giving up.
pub(crate) fn snip_monitored(
    model: &MaskedModel,
    data: &GroupedDataset,
    cfg: &PruneConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<(MaskedModel, TrainLog)> {
    cfg.validate()?;
    let mut m = model.clone();
    m.set_mode(MaskMode::Unstructured);
    m.reset_masks();
    let mut stream = BatchStream::new(data, cfg.batch_size, derive_seed(cfg.seed, 4));
    let sens = match snip_sensitivity(&m, &stream.next_batch(data)) {
        Err(Error::ZeroSensitivity) => snip_sensitivity(&m, &stream.next_batch(data))?,
        other => other?,
    };
    let flat: Vec<f64> = sens.iter().flatten().copied().collect();
    let kept = top_k(&flat, kept_for(flat.len(), cfg.target_sparsity));
    let mut off = 0;
    for l in &mut m.layers {
        let n = l.weight.len();
        for (dst, &k) in l.binary_mask.data_mut().iter_mut().zip(&kept[off..off + n]) {
            *dst = if k { 1.0 } else { 0.0 };
        }
        l.mask_scores = l.binary_mask.clone();
        off += n;
    }

    let mut run = Run::new(cfg, monitor);
    let obj = Objective {
        lambda: 0.0,
        surrogate: cfg.surrogate,
        stats: GroupStats::of(data)?,
    };
    train_epochs(&mut m, data, &mut stream, cfg.finetune_epochs, &obj, cfg.alpha, &mut run)?;
    Ok((m, run.log))
}
