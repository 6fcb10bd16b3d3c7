//! Group accuracy metrics and the differentiable accuracy-gap surrogate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Group, GroupedBatch, GroupedDataset};
use crate::error::{Error, Result};
use crate::model::MaskedModel;

/// Group sizes and empirical probabilities P(S = s⁺), P(S = s⁻).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n_pos_group: usize,
    pub n_neg_group: usize,
    pub p_pos: f64,
    pub p_neg: f64,
}

impl GroupStats {
    pub fn from_groups(groups: &[Group]) -> Result<Self> {
        let n_pos = groups.iter().filter(|&&g| g == Group::Favorable).count();
        let n_neg = groups.len() - n_pos;
        if groups.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::SingleGroupData);
        }
        let n = groups.len() as f64;
        Ok(GroupStats {
            n_pos_group: n_pos,
            n_neg_group: n_neg,
            p_pos: n_pos as f64 / n,
            p_neg: n_neg as f64 / n,
        })
    }

    pub fn of(data: &GroupedDataset) -> Result<Self> {
        GroupStats::from_groups(data.groups())
    }

    fn inv_p(&self, g: Group) -> f64 {
        match g {
            Group::Favorable => 1.0 / self.p_pos,
            Group::Unfavorable => 1.0 / self.p_neg,
        }
    }
}

/// Stand-in `u` for the 0/1 indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Surrogate {
    /// `u(z) = σ(κ z)`, so `u′(0) = κ/4`.
    Sigmoid { kappa: f64 },
    /// The exact indicator: u = 1 on a correct prediction. Not differentiable;
    /// used to check the surrogate against the true accuracy gap.
    Indicator,
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate::Sigmoid { kappa: 4.0 }
    }
}

impl Surrogate {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Surrogate::Sigmoid { kappa } if !(kappa.is_finite() && kappa > 0.0) => {
                Err(Error::InvalidSurrogate(format!("sharpness must be positive and finite, got {kappa}")))
            }
            _ => Ok(()),
        }
    }
}

/// Accuracy, per-group accuracies and the two fairness gaps for a
/// (dense, pruned) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub acc_overall: f64,
    pub acc_pos: f64,
    pub acc_neg: f64,
    pub perf_gap: f64,
    pub degradation_pos: f64,
    pub degradation_neg: f64,
    pub degradation_gap: f64,
}

/// +1 when the logit is strictly positive, −1 otherwise.
pub fn predict(logit: f64) -> f64 {
    if logit > 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn correct(logits: &[f64], labels: &[f64]) -> Vec<bool> {
    logits.iter().zip(labels).map(|(&z, &y)| predict(z) == y).collect()
}

pub fn accuracy_from_logits(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = correct(logits, labels).into_iter().filter(|&c| c).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-group accuracies `(acc⁺, acc⁻)`.
pub fn group_accuracy_from_logits(logits: &[f64], labels: &[f64], groups: &[Group]) -> Result<(f64, f64)> {
    let c = correct(logits, labels);
    let mut hits = [0usize; 2];
    let mut n = [0usize; 2];
    for (ok, g) in c.into_iter().zip(groups) {
        let k = (*g == Group::Unfavorable) as usize;
        n[k] += 1;
        hits[k] += ok as usize;
    }
    if n[0] == 0 {
        return Err(Error::EmptyGroup("s+"));
    }
    if n[1] == 0 {
        return Err(Error::EmptyGroup("s-"));
    }
    Ok((hits[0] as f64 / n[0] as f64, hits[1] as f64 / n[1] as f64))
}

pub fn accuracy(model: &MaskedModel, data: &GroupedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = model.forward(data.features())?;
    accuracy_from_logits(&logits, data.labels())
}

pub fn group_accuracy(model: &MaskedModel, data: &GroupedDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = model.forward(data.features())?;
    group_accuracy_from_logits(&logits, data.labels(), data.groups())
}

/// `|acc⁺ − acc⁻|`.
pub fn performance_fairness(model: &MaskedModel, data: &GroupedDataset) -> Result<f64> {
    let (p, n) = group_accuracy(model, data)?;
    Ok((p - n).abs())
}

/// Accuracy lost per group from `dense` to `pruned`, and the gap between
/// those losses, along with the pruned model's own accuracy figures.
pub fn degradation_fairness(dense: &MaskedModel, pruned: &MaskedModel, data: &GroupedDataset) -> Result<FairnessReport> {
    dense.check_same_architecture(pruned)?;
    let (dp, dn) = group_accuracy(dense, data)?;
    let logits = pruned.forward(data.features())?;
    let (pp, pn) = group_accuracy_from_logits(&logits, data.labels(), data.groups())?;
    let acc = accuracy_from_logits(&logits, data.labels())?;
    let (rp, rn) = (dp - pp, dn - pn);
    Ok(FairnessReport {
        acc_overall: acc,
        acc_pos: pp,
        acc_neg: pn,
        perf_gap: (pp - pn).abs(),
        degradation_pos: rp,
        degradation_neg: rn,
        degradation_gap: (rp - rn).abs(),
    })
}

/// Per-sample sign that turns a logit into the argument of `u`: `+y` for
/// s⁺ (rewarding correct predictions), `−y` for s⁻ (rewarding errors).
fn surrogate_signs(labels: &[f64], groups: &[Group]) -> Vec<f64> {
    labels
        .iter()
        .zip(groups)
        .map(|(&y, &g)| if g == Group::Favorable { y } else { -y })
        .collect()
}

fn surrogate_weights(groups: &[Group], stats: &GroupStats) -> Vec<f64> {
    let n = groups.len() as f64;
    groups.iter().map(|&g| stats.inv_p(g) / n).collect()
}

fn check_batch(labels: &[f64], groups: &[Group]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let has_pos = groups.contains(&Group::Favorable);
    let has_neg = groups.contains(&Group::Unfavorable);
    if !(has_pos && has_neg) {
        return Err(Error::SingleGroupBatch);
    }
    Ok(())
}

/// Indicator values: correct on s⁺, incorrect on s⁻.
fn indicator_terms(logits: &[f64], labels: &[f64], groups: &[Group]) -> Vec<f64> {
    logits
        .iter()
        .zip(labels)
        .zip(groups)
        .map(|((&z, &y), &g)| {
            let ok = predict(z) == y;
            let hit = if g == Group::Favorable { ok } else { !ok };
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Surrogate accuracy gap
///
/// `F̂ = (1/N) [ Σ_{s⁺} u(y f(x)) / p⁺ + Σ_{s⁻} u(−y f(x)) / p⁻ ] − 1`
///
/// recorded on `tape` from `logits`. With the indicator this is exactly
/// `acc⁺ − acc⁻` when `stats` come from the same samples.
pub fn fairness_surrogate(
    tape: &mut Tape,
    logits: Var,
    batch: &GroupedBatch,
    stats: &GroupStats,
    surrogate: Surrogate,
) -> Result<Var> {
    surrogate.validate()?;
    check_batch(&batch.labels, &batch.groups)?;
    let weights = surrogate_weights(&batch.groups, stats);
    match surrogate {
        Surrogate::Sigmoid { kappa } => {
            let signs: Vec<f64> = surrogate_signs(&batch.labels, &batch.groups).into_iter().map(|s| s * kappa).collect();
            let margin = tape.mul_const(logits, &signs)?;
            let u = tape.sigmoid(margin)?;
            let s = tape.dot_const(u, &weights)?;
            tape.add_scalar(s, -1.0)
        }
        Surrogate::Indicator => {
            let terms = indicator_terms(tape.value(logits).data(), &batch.labels, &batch.groups);
            let value: f64 = terms.iter().zip(&weights).map(|(t, w)| t * w).sum::<f64>() - 1.0;
            tape.constant(crate::autodiff::Tensor::scalar(value))
        }
    }
}

/// Value of [`fairness_surrogate`] without a tape.
pub fn surrogate_value(logits: &[f64], labels: &[f64], groups: &[Group], stats: &GroupStats, surrogate: Surrogate) -> Result<f64> {
    surrogate.validate()?;
    check_batch(labels, groups)?;
    let weights = surrogate_weights(groups, stats);
    let terms: Vec<f64> = match surrogate {
        Surrogate::Sigmoid { kappa } => surrogate_signs(labels, groups)
            .iter()
            .zip(logits)
            .map(|(s, z)| crate::autodiff::sigmoid(kappa * s * z))
            .collect(),
        Surrogate::Indicator => indicator_terms(logits, labels, groups),
    };
    Ok(terms.iter().zip(&weights).map(|(t, w)| t * w).sum::<f64>() - 1.0)
}

/// Surrogate gap of `model` over a whole dataset, with `stats` from the
/// same data.
pub fn dataset_surrogate(model: &MaskedModel, data: &GroupedDataset, surrogate: Surrogate) -> Result<f64> {
    let stats = GroupStats::of(data)?;
    let logits = model.forward(data.features())?;
    surrogate_value(&logits, data.labels(), data.groups(), &stats, surrogate)
}
