//! Masked feed-forward classifiers.
//!
//! Each layer carries dense weights, continuous mask scores in `[0, 1]` and a
//! hard 0/1 mask. The network evaluated is always `binary_mask ⊙ weight`;
//! gradients reach the scores through a straight-through estimator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Unstructured,
    /// Masks are constant along each weight row (one output neuron).
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    PerLayer,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLayer {
    /// `[out × in]`.
    pub weight: Tensor,
    /// `[out]`; never masked.
    pub bias: Tensor,
    pub mask_scores: Tensor,
    pub binary_mask: Tensor,
    pub mode: MaskMode,
}

impl MaskedLayer {
    pub fn new(weight: Tensor, bias: Tensor, mode: MaskMode) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::ShapeMismatch {
                op: "layer",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let mut layer = MaskedLayer {
            binary_mask: Tensor::filled(weight.shape(), 1.0),
            mask_scores: Tensor::filled(weight.shape(), 1.0),
            weight,
            bias,
            mode,
        };
        layer.init_scores_from_magnitude();
        Ok(layer)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Scores ← |w| / max|w|, so the top-k score mask equals per-layer
    /// magnitude pruning.
    pub fn init_scores_from_magnitude(&mut self) {
        let max = self.weight.data().iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        let fill_one = max == 0.0;
        for (s, w) in self.mask_scores.data_mut().iter_mut().zip(self.weight.data()) {
            *s = if fill_one { 1.0 } else { w.abs() * scale };
        }
    }

    pub fn kept(&self) -> usize {
        self.binary_mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    pub fn effective_weight(&self) -> Vec<f64> {
        self.weight
            .data()
            .iter()
            .zip(self.binary_mask.data())
            .map(|(w, m)| w * m)
            .collect()
    }
}

/// Which parameters get gradients in a taped forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Track {
    pub weights: bool,
    pub scores: bool,
}

impl Track {
    pub const WEIGHTS: Track = Track {
        weights: true,
        scores: false,
    };
    pub const SCORES: Track = Track {
        weights: false,
        scores: true,
    };
    pub const BOTH: Track = Track {
        weights: true,
        scores: true,
    };
    pub const NONE: Track = Track {
        weights: false,
        scores: false,
    };
}

/// Tape handles of the parameters used in one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub scores: Vec<Option<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedModel {
    pub layers: Vec<MaskedLayer>,
    pub activation: Activation,
}

impl MaskedModel {
    pub fn new(layers: Vec<MaskedLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ArchitectureMismatch("model needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::ArchitectureMismatch(format!(
                    "layer widths {} -> {} do not chain",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        if layers.last().map(|l| l.out_dim()) != Some(1) {
            return Err(Error::ArchitectureMismatch("output layer must have width 1".into()));
        }
        Ok(MaskedModel {
            layers,
            activation: Activation::Relu,
        })
    }

    /// ReLU MLP with widths `[d, h₁, …, 1]`, weights and biases drawn from
    /// U(−1/√fan_in, 1/√fan_in).
    pub fn mlp(widths: &[usize], mode: MaskMode, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            let (fan_in, out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = (0..out * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
            let bias = (0..out).map(|_| rng.random_range(-bound..bound)).collect();
            layers.push(MaskedLayer::new(
                Tensor::matrix(out, fan_in, weight)?,
                Tensor::vector(bias),
                mode,
            )?);
        }
        MaskedModel::new(layers)
    }

    /// Default experiment network: d → 64 → 32 → 1.
    pub fn default_mlp(d: usize, mode: MaskMode, seed: u64) -> Result<Self> {
        MaskedModel::mlp(&[d, 64, 32, 1], mode, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn set_mode(&mut self, mode: MaskMode) {
        self.layers.iter_mut().for_each(|l| l.mode = mode);
    }

    pub fn mode(&self) -> MaskMode {
        self.layers[0].mode
    }

    pub fn init_scores_from_magnitude(&mut self) {
        self.layers.iter_mut().for_each(|l| l.init_scores_from_magnitude());
    }

    pub fn reset_masks(&mut self) {
        for l in &mut self.layers {
            l.binary_mask.data_mut().iter_mut().for_each(|m| *m = 1.0);
        }
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn kept_count(&self) -> usize {
        self.layers.iter().map(|l| l.kept()).sum()
    }

    /// `1 − ‖m‖₀ / ‖θ‖₀` over maskable weights (biases excluded).
    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept_count() as f64 / self.weight_count() as f64
    }

    /// Same layer shapes, in order.
    pub fn same_architecture(&self, other: &MaskedModel) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape())
    }

    pub fn check_same_architecture(&self, other: &MaskedModel) -> Result<()> {
        if self.same_architecture(other) {
            Ok(())
        } else {
            Err(Error::ArchitectureMismatch(format!(
                "{:?} vs {:?}",
                self.layer_shapes(),
                other.layer_shapes()
            )))
        }
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.out_dim(), l.in_dim())).collect()
    }

    /// Logits for `x: [n × d]`, no tape.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: x.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let n = x.rows();
        let mut h = x.data().to_vec();
        let mut width = x.cols();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let out = layer.out_dim();
            let eff = layer.effective_weight();
            let bias = layer.bias.data();
            let mut next = vec![0.0; n * out];
            for i in 0..n {
                let row = &h[i * width..(i + 1) * width];
                for j in 0..out {
                    let w = &eff[j * width..(j + 1) * width];
                    let z: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + bias[j];
                    next[i * out + j] = if li < last && z < 0.0 { 0.0 } else { z };
                }
            }
            h = next;
            width = out;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward"));
        }
        Ok(h)
    }

    /// Records the forward pass on `tape`; returns `[n]` logits.
    pub fn forward_on(&self, tape: &mut Tape, x: Var, track: Track) -> Result<(Var, ParamVars)> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: xs,
                right: vec![self.input_dim()],
            });
        }
        let n = xs[0];
        let mut vars = ParamVars {
            weights: Vec::new(),
            biases: Vec::new(),
            scores: Vec::new(),
        };
        let mut h = x;
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.weight.clone(), track.weights)?;
            let b = tape.leaf(layer.bias.clone(), track.weights)?;
            let (mask, score) = if track.scores {
                let s = tape.leaf(layer.mask_scores.clone(), true)?;
                (tape.straight_through(s, &layer.binary_mask)?, Some(s))
            } else {
                (tape.constant(layer.binary_mask.clone())?, None)
            };
            let eff = tape.mul(w, mask)?;
            let z = tape.matmul_nt(h, eff)?;
            let z = tape.add_row(z, b)?;
            h = if li < last { tape.relu(z)? } else { z };
            vars.weights.push(w);
            vars.biases.push(b);
            vars.scores.push(score);
        }
        let logits = tape.reshape(h, &[n])?;
        Ok((logits, vars))
    }

    /// Re-derives the hard masks from the scores at the given sparsity.
    ///
    /// Unstructured: exactly `round((1 − sparsity) · count)` weights survive
    /// (per layer via largest-remainder apportionment with at least one weight
    /// per layer, or globally). Structured: rows ranked by mean score, with
    /// the kept-row count per layer chosen so the kept-weight fraction is as
    /// close as possible to `1 − sparsity`. Ties go to the lowest index.
    pub fn binarize_masks(&mut self, sparsity: f64, scope: Scope) {
        assert!((0.0..1.0).contains(&sparsity), "sparsity {sparsity} outside [0,1)");
        match self.mode() {
            MaskMode::Unstructured => self.binarize_unstructured(sparsity, scope),
            MaskMode::Structured => {
                let rows = allocate_rows(&self.layer_shapes(), sparsity);
                for (layer, keep) in self.layers.iter_mut().zip(rows) {
                    let (out, inp) = (layer.out_dim(), layer.in_dim());
                    let means: Vec<f64> = (0..out)
                        .map(|r| layer.mask_scores.row(r).iter().sum::<f64>() / inp as f64)
                        .collect();
                    let kept = top_k(&means, keep);
                    let mask = layer.binary_mask.data_mut();
                    for r in 0..out {
                        let v = if kept[r] { 1.0 } else { 0.0 };
                        mask[r * inp..(r + 1) * inp].iter_mut().for_each(|m| *m = v);
                    }
                }
            }
        }
    }

    fn binarize_unstructured(&mut self, sparsity: f64, scope: Scope) {
        let scores: Vec<Vec<f64>> = self.layers.iter().map(|l| l.mask_scores.data().to_vec()).collect();
        let masks = unstructured_masks(&scores, sparsity, scope);
        for (layer, mask) in self.layers.iter_mut().zip(masks) {
            layer.binary_mask.data_mut().copy_from_slice(&mask);
        }
    }

    /// All `binary_mask ⊙ weight` entries (layer order), then all biases.
    pub fn effective_weights(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.layers.iter().flat_map(|l| l.effective_weight()).collect();
        v.extend(self.layers.iter().flat_map(|l| l.bias.data().iter().copied()));
        v
    }

    /// Inverse of [`effective_weights`](Self::effective_weights): weights take
    /// the given values and every mask entry is set to one.
    pub fn load_effective_weights(&mut self, v: &[f64]) -> Result<()> {
        let total = self.weight_count() + self.layers.iter().map(|l| l.bias.len()).sum::<usize>();
        if v.len() != total {
            return Err(Error::ShapeMismatch {
                op: "load_effective_weights",
                left: vec![v.len()],
                right: vec![total],
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.data_mut().copy_from_slice(&v[off..off + n]);
            l.binary_mask.data_mut().iter_mut().for_each(|m| *m = 1.0);
            l.mask_scores.data_mut().iter_mut().for_each(|m| *m = 1.0);
            off += n;
        }
        for l in &mut self.layers {
            let n = l.bias.len();
            l.bias.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let doc = Checkpoint::from_model(self);
        let text = serde_json::to_string(&doc)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Checkpoint = serde_json::from_str(&text)?;
        doc.into_model()
    }
}

/// Hard masks for unstructured scores. Shared by BiFP, lottery and SNIP.
pub(crate) fn unstructured_masks(scores: &[Vec<f64>], sparsity: f64, scope: Scope) -> Vec<Vec<f64>> {
    let counts: Vec<usize> = scores.iter().map(|s| s.len()).collect();
    let total: usize = counts.iter().sum();
    let keep_total = kept_for(total, sparsity);
    match scope {
        Scope::Global => {
            let flat: Vec<f64> = scores.iter().flatten().copied().collect();
            let kept = top_k(&flat, keep_total);
            let mut off = 0;
            counts
                .iter()
                .map(|&n| {
                    let m = kept[off..off + n].iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                    off += n;
                    m
                })
                .collect()
        }
        Scope::PerLayer => {
            let keep = apportion_per_layer(&counts, keep_total);
            scores
                .iter()
                .zip(keep)
                .map(|(s, k)| top_k(s, k).into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())
                .collect()
        }
    }
}

/// `round((1 − sparsity) · total)`, at least one.
pub fn kept_for(total: usize, sparsity: f64) -> usize {
    (((1.0 - sparsity) * total as f64).round() as usize).clamp(1, total)
}

/// Splits `keep` kept weights over layers in proportion to their sizes
/// (largest remainder), with every layer keeping at least one.
pub(crate) fn apportion_per_layer(counts: &[usize], keep: usize) -> Vec<usize> {
    let keep = keep.max(counts.len());
    let mut alloc = crate::data::apportion(keep, &counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    for (a, &c) in alloc.iter_mut().zip(counts) {
        *a = (*a).clamp(1, c);
    }
    // Clamping can move the total off `keep`; repair against the layers with
    // the most room, lowest index first.
    let mut sum: usize = alloc.iter().sum();
    while sum != keep {
        let pick = if sum < keep {
            (0..counts.len()).filter(|&i| alloc[i] < counts[i]).max_by_key(|&i| (counts[i] - alloc[i], usize::MAX - i))
        } else {
            (0..counts.len()).filter(|&i| alloc[i] > 1).max_by_key(|&i| (alloc[i], usize::MAX - i))
        };
        let Some(i) = pick else { break };
        if sum < keep {
            alloc[i] += 1;
            sum += 1;
        } else {
            alloc[i] -= 1;
            sum -= 1;
        }
    }
    alloc
}

/// Rows to keep per layer so the kept-weight fraction is as close as possible
/// to `1 − sparsity`. Single-row layers are always kept whole.
pub fn allocate_rows(shapes: &[(usize, usize)], sparsity: f64) -> Vec<usize> {
    let total: usize = shapes.iter().map(|(o, i)| o * i).sum();
    let target = (1.0 - sparsity) * total as f64;
    let mut keep: Vec<usize> = shapes
        .iter()
        .map(|&(rows, _)| {
            if rows <= 1 {
                rows
            } else {
                (((1.0 - sparsity) * rows as f64).round() as usize).clamp(1, rows)
            }
        })
        .collect();
    let kept = |keep: &[usize]| -> f64 { keep.iter().zip(shapes).map(|(k, (_, w))| (k * w) as f64).sum() };
    loop {
        let current = (kept(&keep) - target).abs();
        let mut best: Option<(f64, usize, bool)> = None;
        for (l, &(rows, width)) in shapes.iter().enumerate() {
            if rows <= 1 {
                continue;
            }
            let base = kept(&keep);
            if keep[l] < rows {
                let err = (base + width as f64 - target).abs();
                if err < current - 1e-9 && best.is_none_or(|b| err < b.0 - 1e-12) {
                    best = Some((err, l, true));
                }
            }
            if keep[l] > 1 {
                let err = (base - width as f64 - target).abs();
                if err < current - 1e-9 && best.is_none_or(|b| err < b.0 - 1e-12) {
                    best = Some((err, l, false));
                }
            }
        }
        match best {
            Some((_, l, true)) => keep[l] += 1,
            Some((_, l, false)) => keep[l] -= 1,
            None => break,
        }
    }
    keep
}

/// Marks the `k` largest values; ties resolved toward the lowest index.
pub fn top_k(values: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut keep = vec![false; values.len()];
    for &i in idx.iter().take(k) {
        keep[i] = true;
    }
    keep
}

const CHECKPOINT_FORMAT: &str = "bifp-masked-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    activation: Activation,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    mode: MaskMode,
    out: usize,
    #[serde(rename = "in")]
    inp: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    mask_scores: Vec<f64>,
    binary_mask: Vec<f64>,
}

impl Checkpoint {
    fn from_model(m: &MaskedModel) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            activation: m.activation,
            layers: m
                .layers
                .iter()
                .map(|l| LayerDoc {
                    mode: l.mode,
                    out: l.out_dim(),
                    inp: l.in_dim(),
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                    mask_scores: l.mask_scores.data().to_vec(),
                    binary_mask: l.binary_mask.data().to_vec(),
                })
                .collect(),
        }
    }

    fn into_model(self) -> Result<MaskedModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("{} v{}", self.format, self.version)));
        }
        let mut layers = Vec::new();
        for d in self.layers {
            let shape = vec![d.out, d.inp];
            let layer = MaskedLayer {
                weight: Tensor::new(shape.clone(), d.weight)?,
                bias: Tensor::new(vec![d.out], d.bias)?,
                mask_scores: Tensor::new(shape.clone(), d.mask_scores)?,
                binary_mask: Tensor::new(shape, d.binary_mask)?,
                mode: d.mode,
            };
            if layer.binary_mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(Error::Checkpoint("binary_mask entries must be 0 or 1".into()));
            }
            layers.push(layer);
        }
        let mut m = MaskedModel::new(layers)?;
        m.activation = self.activation;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(weights: &[f64], out: usize, mode: MaskMode) -> MaskedModel {
        let inp = weights.len() / out;
        let l = MaskedLayer::new(
            Tensor::matrix(out, inp, weights.to_vec()).unwrap(),
            Tensor::vector(vec![0.0; out]),
            mode,
        )
        .unwrap();
        MaskedModel { layers: vec![l], activation: Activation::Relu }
    }

    #[test]
    fn hand_arithmetic_logit() {
        let mut m = single(&[2.0, -1.0], 1, MaskMode::Unstructured);
        m.layers[0].binary_mask = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![3.0, 5.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap(), vec![6.0]);
    }

    #[test]
    fn zero_mask_gives_bias_network() {
        let mut m = MaskedModel::mlp(&[3, 4, 1], MaskMode::Unstructured, 1).unwrap();
        for l in &mut m.layers {
            l.binary_mask.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::matrix(2, 3, vec![1., 2., 3., -4., 5., 6.]).unwrap();
        let out = m.forward(&x).unwrap();
        // Output layer weights are masked too, so only its bias survives.
        let expected = m.layers[1].bias.data()[0];
        assert_eq!(out, vec![expected, expected]);
    }

    #[test]
    fn forward_matches_taped_forward() {
        let m = MaskedModel::mlp(&[3, 5, 4, 1], MaskMode::Unstructured, 9).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.0, 0.5, -0.7]).unwrap();
        let plain = m.forward(&x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let (logits, _) = m.forward_on(&mut tape, xv, Track::NONE).unwrap();
        for (a, b) in plain.iter().zip(tape.value(logits).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_shape_error() {
        let m = MaskedModel::mlp(&[3, 2, 1], MaskMode::Unstructured, 0).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn binarize_order_statistics() {
        let mut m = single(&[1.0; 4], 1, MaskMode::Unstructured);
        m.layers[0].mask_scores = Tensor::matrix(1, 4, vec![0.9, 0.1, 0.5, 0.7]).unwrap();
        m.binarize_masks(0.5, Scope::PerLayer);
        assert_eq!(m.layers[0].binary_mask.data(), &[1., 0., 0., 1.]);
        m.binarize_masks(0.0, Scope::PerLayer);
        assert_eq!(m.layers[0].binary_mask.data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn binarize_structured_rows() {
        let mut m = single(&[1.0; 6], 3, MaskMode::Structured);
        m.layers[0].mask_scores = Tensor::matrix(3, 2, vec![0.2, 0.2, 0.7, 0.9, 0.5, 0.5]).unwrap();
        m.binarize_masks(1.0 / 3.0, Scope::PerLayer);
        assert_eq!(m.layers[0].binary_mask.data(), &[0., 0., 1., 1., 1., 1.]);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        assert_eq!(top_k(&[0.5, 0.5, 0.5], 2), vec![true, true, false]);
    }

    #[test]
    fn sparsity_counts() {
        let mut m = single(&[1.0; 4], 1, MaskMode::Unstructured);
        assert_eq!(m.sparsity(), 0.0);
        m.layers[0].binary_mask = Tensor::matrix(1, 4, vec![1., 0., 1., 0.]).unwrap();
        assert_eq!(m.sparsity(), 0.5);
    }

    #[test]
    fn global_binarize_hits_target_within_one_weight() {
        let mut m = MaskedModel::default_mlp(20, MaskMode::Unstructured, 3).unwrap();
        m.binarize_masks(0.7, Scope::Global);
        let total = m.weight_count() as f64;
        assert!((m.sparsity() - 0.7).abs() <= 1.0 / total);
        m.binarize_masks(0.7, Scope::PerLayer);
        assert!((m.sparsity() - 0.7).abs() <= 1.0 / total);
    }

    #[test]
    fn magnitude_scores_match_magnitude_pruning() {
        let m0 = MaskedModel::mlp(&[4, 6, 1], MaskMode::Unstructured, 5).unwrap();
        let mut m = m0.clone();
        m.binarize_masks(0.5, Scope::PerLayer);
        for l in &m.layers {
            let kept: Vec<f64> = l.weight.data().iter().zip(l.binary_mask.data()).filter(|(_, &k)| k == 1.0).map(|(w, _)| w.abs()).collect();
            let dropped: Vec<f64> = l.weight.data().iter().zip(l.binary_mask.data()).filter(|(_, &k)| k == 0.0).map(|(w, _)| w.abs()).collect();
            let min_kept = kept.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(dropped.iter().all(|&d| d <= min_kept));
        }
    }

    #[test]
    fn effective_weights_layout_and_roundtrip() {
        let mut m = MaskedModel::mlp(&[3, 2, 1], MaskMode::Unstructured, 2).unwrap();
        for l in &mut m.layers {
            l.binary_mask.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let v = m.effective_weights();
        assert!(v[..8].iter().all(|&x| x == 0.0));
        assert_eq!(&v[8..10], m.layers[0].bias.data());
        assert_eq!(&v[10..], m.layers[1].bias.data());

        let dense = MaskedModel::mlp(&[3, 2, 1], MaskMode::Unstructured, 2).unwrap();
        let plain: Vec<f64> = dense.layers.iter().flat_map(|l| l.weight.data().to_vec()).chain(dense.layers.iter().flat_map(|l| l.bias.data().to_vec())).collect();
        assert_eq!(dense.effective_weights(), plain);

        let mut other = dense.clone();
        other.layers[0].binary_mask.data_mut()[1] = 0.0;
        let eff = other.effective_weights();
        let mut loaded = dense.clone();
        loaded.load_effective_weights(&eff).unwrap();
        assert_eq!(loaded.effective_weights(), eff);
    }

    #[test]
    fn allocate_rows_stays_within_a_row() {
        let shapes = [(64, 20), (32, 64), (1, 32)];
        for s in [0.2, 0.36, 0.488, 0.59, 0.672, 0.738, 0.79] {
            let keep = allocate_rows(&shapes, s);
            let kept: usize = keep.iter().zip(&shapes).map(|(k, (_, w))| k * w).sum();
            let target = (1.0 - s) * 3360.0;
            assert!((kept as f64 - target).abs() <= 64.0, "{s}: {kept} vs {target}");
            assert_eq!(keep[2], 1);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut m = MaskedModel::mlp(&[3, 4, 1], MaskMode::Structured, 11).unwrap();
        m.binarize_masks(0.5, Scope::PerLayer);
        let f = tempfile::NamedTempFile::new().unwrap();
        m.save_json(f.path()).unwrap();
        let back = MaskedModel::load_json(f.path()).unwrap();
        assert_eq!(m, back);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn binarize_idempotent_and_structured_rows(seed in 0u64..500, s in 0.0f64..0.95, structured: bool, global: bool) {
                let mode = if structured { MaskMode::Structured } else { MaskMode::Unstructured };
                let scope = if global { Scope::Global } else { Scope::PerLayer };
                let mut m = MaskedModel::mlp(&[5, 7, 3, 1], mode, seed).unwrap();
                m.binarize_masks(s, scope);
                let first = m.clone();
                m.binarize_masks(s, scope);
                prop_assert_eq!(&first, &m);
                for l in &m.layers {
                    prop_assert!(l.binary_mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
                    if structured {
                        for r in 0..l.out_dim() {
                            let row = l.binary_mask.row(r);
                            prop_assert!(row.iter().all(|&v| v == row[0]));
                        }
                    }
                }
                if !structured {
                    let total = m.weight_count() as f64;
                    prop_assert!((m.sparsity() - s).abs() <= 1.0 / total + 1e-12);
                }
            }
        }
    }
}
