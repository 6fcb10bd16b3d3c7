//! Filter pruning via geometric median: rows closest to the rest of their
//! layer are the most replaceable and go first.

use super::{derive_seed, train_epochs, BatchStream, Monitor, Objective, PruneConfig, Run, TrainLog};
use crate::autodiff::Tensor;
use crate::data::GroupedDataset;
use crate::error::Result;
use crate::fairness::GroupStats;
use crate::model::{allocate_rows, MaskMode, MaskedModel};

/// Sum of Euclidean distances from each row to every other row.
pub fn fpgm_row_scores(weight: &Tensor) -> Vec<f64> {
    let rows = weight.rows();
    let mut scores = vec![0.0; rows];
    for i in 0..rows {
        for j in i + 1..rows {
            let d = weight
                .row(i)
                .iter()
                .zip(weight.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            scores[i] += d;
            scores[j] += d;
        }
    }
    scores
}

/// Rows to keep: everything except the `rows − keep` with the smallest
/// summed distance (ties toward the lower index).
pub fn fpgm_select_rows(weight: &Tensor, keep: usize) -> Vec<bool> {
    let scores = fpgm_row_scores(weight);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept = vec![true; scores.len()];
    for &r in order.iter().take(scores.len().saturating_sub(keep)) {
        kept[r] = false;
    }
    kept
}

pub fn fpgm_prune(model: &MaskedModel, data: &GroupedDataset, cfg: &PruneConfig) -> Result<(MaskedModel, TrainLog)> {
    fpgm_monitored(model, data, cfg, None)
}

pub(crate) fn fpgm_monitored(
    model: &MaskedModel,
    data: &GroupedDataset,
    cfg: &PruneConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<(MaskedModel, TrainLog)> {
    cfg.validate()?;
    let mut m = model.clone();
    m.set_mode(MaskMode::Structured);
    m.reset_masks();
    let keep = allocate_rows(&m.layer_shapes(), cfg.target_sparsity);
    for (l, k) in m.layers.iter_mut().zip(keep) {
        if l.out_dim() <= 1 {
            continue;
        }
        let rows = fpgm_select_rows(&l.weight, k);
        let width = l.in_dim();
        let mask = l.binary_mask.data_mut();
        for (r, &on) in rows.iter().enumerate() {
            let v = if on { 1.0 } else { 0.0 };
            mask[r * width..(r + 1) * width].iter_mut().for_each(|x| *x = v);
        }
        l.mask_scores = l.binary_mask.clone();
    }

    let mut run = Run::new(cfg, monitor);
    let obj = Objective {
        lambda: 0.0,
        surrogate: cfg.surrogate,
        stats: GroupStats::of(data)?,
    };
    let mut stream = BatchStream::new(data, cfg.batch_size, derive_seed(cfg.seed, 5));
    train_epochs(&mut m, data, &mut stream, cfg.finetune_epochs, &obj, cfg.alpha, &mut run)?;
    Ok((m, run.log))
}
