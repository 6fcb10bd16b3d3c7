//! Fairness and pruning applied one after the other.

use super::lottery::lottery_with;
use super::{derive_seed, train_epochs, BatchStream, Method, Monitor, Objective, PruneConfig, Run, TrainLog};
use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::fairness::GroupStats;
use crate::model::MaskedModel;

pub fn two_stage(model: &MaskedModel, data: &GroupedDataset, cfg: &PruneConfig) -> Result<(MaskedModel, TrainLog)> {
    two_stage_monitored(model, data, cfg, None)
}

/// `fair-then-prune`: `fair_epochs` of dense training on `ℓ + λF̂²`, then the
/// lottery pruner. `prune-then-fair`: the lottery pruner with its final
/// fine-tune on `ℓ + λF̂²` instead of `ℓ`.
pub(crate) fn two_stage_monitored(
    model: &MaskedModel,
    data: &GroupedDataset,
    cfg: &PruneConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<(MaskedModel, TrainLog)> {
    cfg.validate()?;
    let mut run = Run::new(cfg, monitor);
    let m = match cfg.method {
        Method::FairThenPrune => {
            let mut m = model.clone();
            m.reset_masks();
            let obj = Objective {
                lambda: cfg.lambda_fair,
                surrogate: cfg.surrogate,
                stats: GroupStats::of(data)?,
            };
            let mut stream = BatchStream::new(data, cfg.batch_size, derive_seed(cfg.seed, 6));
            train_epochs(&mut m, data, &mut stream, cfg.fair_epochs, &obj, cfg.alpha, &mut run)?;
            if run.stopped {
                m
            } else {
                lottery_with(&m, data, cfg, 0.0, &mut run)?
            }
        }
        Method::PruneThenFair => lottery_with(model, data, cfg, cfg.lambda_fair, &mut run)?,
        other => return Err(Error::InvalidConfig(format!("{other} is not a two-stage method"))),
    };
    Ok((m, run.log))
}
