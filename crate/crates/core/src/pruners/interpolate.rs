//! Loss along the straight line between two models in effective-weight space.

use serde::{Deserialize, Serialize};

use crate::autodiff::softplus;
use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::fairness::{dataset_surrogate, Surrogate};
use crate::model::MaskedModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationPoint {
    pub t: f64,
    pub loss: f64,
    pub fhat: f64,
}

/// Dense model with effective weights `(1 − t)·a + t·b`.
pub fn interpolate_models(a: &MaskedModel, b: &MaskedModel, t: f64) -> Result<MaskedModel> {
    a.check_same_architecture(b)?;
    let wa = a.effective_weights();
    let wb = b.effective_weights();
    let mix: Vec<f64> = wa.iter().zip(&wb).map(|(x, y)| (1.0 - t) * x + t * y).collect();
    let mut m = a.clone();
    m.load_effective_weights(&mix)?;
    Ok(m)
}

/// Logistic loss and surrogate gap at `steps` evenly spaced `t ∈ [0, 1]`.
pub fn loss_interpolation(
    a: &MaskedModel,
    b: &MaskedModel,
    data: &GroupedDataset,
    steps: usize,
    surrogate: Surrogate,
) -> Result<Vec<InterpolationPoint>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("interpolation needs at least one step".into()));
    }
    a.check_same_architecture(b)?;
    (0..steps)
        .map(|i| {
            let t = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let m = interpolate_models(a, b, t)?;
            let logits = m.forward(data.features())?;
            let loss = logits.iter().zip(data.labels()).map(|(z, y)| softplus(-y * z)).sum::<f64>() / logits.len() as f64;
            Ok(InterpolationPoint {
                t,
                loss,
                fhat: dataset_surrogate(&m, data, surrogate)?,
            })
        })
        .collect()
}
