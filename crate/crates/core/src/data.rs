//! Grouped datasets: CSV ingestion, standardization, stratified splitting and
//! a synthetic generator with controllable group bias.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Binary sensitive attribute. `Favorable` is s⁺, `Unfavorable` is s⁻.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Favorable,
    Unfavorable,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Favorable => "s+",
            Group::Unfavorable => "s-",
        }
    }

    pub fn swapped(self) -> Group {
        match self {
            Group::Favorable => Group::Unfavorable,
            Group::Unfavorable => Group::Favorable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

/// Per-column affine map `z = (x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics; constant columns get unit scale.
    pub fn fit(features: &Tensor) -> Self {
        let (n, d) = (features.rows(), features.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(features.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((v, x), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, features: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = features
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| (x - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(features.shape().to_vec(), data).expect("same shape")
    }

    pub fn invert(&self, features: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = features
            .data()
            .iter()
            .enumerate()
            .map(|(i, z)| z * self.std[i % d] + self.mean[i % d])
            .collect();
        Tensor::new(features.shape().to_vec(), data).expect("same shape")
    }

    /// The map equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &Standardizer) -> Standardizer {
        let mean = self
            .mean
            .iter()
            .zip(&self.std)
            .zip(&next.mean)
            .map(|((m1, s1), m2)| m1 + s1 * m2)
            .collect();
        let std = self.std.iter().zip(&next.std).map(|(s1, s2)| s1 * s2).collect();
        Standardizer { mean, std }
    }
}

/// Features, ±1 labels and a binary sensitive attribute.
#[derive(Debug, Clone)]
pub struct GroupedDataset {
    features: Tensor,
    labels: Vec<f64>,
    groups: Vec<Group>,
    split: SplitTag,
    standardizer: Standardizer,
}

impl GroupedDataset {
    /// Builds a dataset from already-prepared features; labels must be ±1.
    pub fn new(features: Tensor, labels: Vec<f64>, groups: Vec<Group>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let n = features.rows();
        if labels.len() != n || groups.len() != n {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: features.shape().to_vec(),
                right: vec![labels.len(), groups.len()],
            });
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidConfig("labels must be -1 or +1".into()));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        let d = features.cols();
        Ok(GroupedDataset {
            features,
            labels,
            groups,
            split: SplitTag::Full,
            standardizer: Standardizer::identity(d),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn group_count(&self, g: Group) -> usize {
        self.groups.iter().filter(|&&x| x == g).count()
    }

    pub fn indices_of(&self, g: Group) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.groups[i] == g).collect()
    }

    /// Features mapped back to the original (pre-standardization) scale.
    pub fn raw_features(&self) -> Tensor {
        self.standardizer.invert(&self.features)
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> GroupedDataset {
        let d = self.dim();
        let mut feats = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            feats.extend_from_slice(self.features.row(i));
        }
        GroupedDataset {
            features: Tensor::new(vec![idx.len().max(1), d], pad_empty(feats, d)).expect("subset shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            split: self.split,
            standardizer: self.standardizer.clone(),
        }
    }

    /// Minibatch view of the rows at `idx`.
    pub fn batch(&self, idx: &[usize]) -> GroupedBatch {
        let s = self.subset(idx);
        GroupedBatch {
            x: s.features,
            labels: s.labels,
            groups: s.groups,
        }
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> GroupedBatch {
        GroupedBatch {
            x: self.features.clone(),
            labels: self.labels.clone(),
            groups: self.groups.clone(),
        }
    }

    pub fn with_labels(&self, labels: Vec<f64>) -> Result<GroupedDataset> {
        let mut out = GroupedDataset::new(self.features.clone(), labels, self.groups.clone())?;
        out.split = self.split;
        out.standardizer = self.standardizer.clone();
        Ok(out)
    }

    pub fn with_groups(&self, groups: Vec<Group>) -> Result<GroupedDataset> {
        let mut out = GroupedDataset::new(self.features.clone(), self.labels.clone(), groups)?;
        out.split = self.split;
        out.standardizer = self.standardizer.clone();
        Ok(out)
    }

    pub fn tagged(mut self, tag: SplitTag) -> Self {
        self.split = tag;
        self
    }

    /// Re-expresses the features under `st`, keeping the raw-feature mapping.
    pub fn standardized_with(&self, st: &Standardizer) -> GroupedDataset {
        GroupedDataset {
            features: st.apply(&self.features),
            labels: self.labels.clone(),
            groups: self.groups.clone(),
            split: self.split,
            standardizer: self.standardizer.then(st),
        }
    }

    /// Standardizes with this dataset's own statistics.
    pub fn standardized(&self) -> GroupedDataset {
        self.standardized_with(&Standardizer::fit(&self.features))
    }

    pub fn require_both_groups(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.group_count(Group::Favorable) == 0 || self.group_count(Group::Unfavorable) == 0 {
            return Err(Error::SingleGroupData);
        }
        Ok(())
    }
}

fn pad_empty(v: Vec<f64>, d: usize) -> Vec<f64> {
    if v.is_empty() {
        vec![0.0; d]
    } else {
        v
    }
}

/// Owned minibatch.
#[derive(Debug, Clone)]
pub struct GroupedBatch {
    pub x: Tensor,
    pub labels: Vec<f64>,
    pub groups: Vec<Group>,
}

impl GroupedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_col: String,
    pub sensitive_col: String,
    /// Label cell value mapped to +1; every other value maps to −1.
    pub positive_label: String,
    /// Sensitive cell value mapped to s⁺; every other value maps to s⁻.
    pub positive_group: String,
}

/// Reads a CSV with a header row, one label column, one sensitive column and
/// numeric feature columns. Features come back standardized over the file;
/// the inverse map is kept on the dataset.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<GroupedDataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let label_idx = find(&schema.label_col)?;
    let sens_idx = find(&schema.sensitive_col)?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_idx && c != sens_idx).collect();
    if feature_cols.is_empty() {
        return Err(Error::InvalidConfig(format!("{}: no feature columns", path.display())));
    }

    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = row + 1;
        for &c in &feature_cols {
            let cell = rec.get(c).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row,
                column: headers[c].to_string(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    row,
                    column: headers[c].to_string(),
                    value: cell.to_string(),
                });
            }
            feats.push(v);
        }
        let label = rec.get(label_idx).unwrap_or("");
        labels.push(if label == schema.positive_label { 1.0 } else { -1.0 });
        let sens = rec.get(sens_idx).unwrap_or("");
        groups.push(if sens == schema.positive_group {
            Group::Favorable
        } else {
            Group::Unfavorable
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let features = Tensor::matrix(labels.len(), feature_cols.len(), feats)?;
    let ds = GroupedDataset::new(features, labels, groups)?;
    ds.require_both_groups()?;
    Ok(ds.standardized())
}

/// Split proportions; must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.4,
            val: 0.3,
            test: 0.3,
        }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Index sets of a three-way stratified split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified by (label, group). Samples are laid out group-major, then
/// label, shuffled within each stratum, and dealt to splits by the quota
/// rule, so every prefix (and hence every group block) is proportioned to
/// within one sample.
pub fn split_indices(data: &GroupedDataset, ratios: SplitRatios, seed: u64) -> Result<SplitIndices> {
    let r = ratios.as_array();
    if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split ratios {r:?} must be in [0,1] and sum to 1")));
    }
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let active = r.iter().filter(|&&x| x > 0.0).count();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(n);
    for g in [Group::Favorable, Group::Unfavorable] {
        for y in [1.0, -1.0] {
            let mut cell: Vec<usize> = (0..n).filter(|&i| data.groups[i] == g && data.labels[i] == y).collect();
            if cell.len() < active {
                return Err(Error::SmallStratum {
                    label: y as i8,
                    group: g.name(),
                    count: cell.len(),
                    splits: active,
                });
            }
            cell.shuffle(&mut rng);
            order.extend(cell);
        }
    }

    let targets = apportion(n, &r);
    let quotas: Vec<f64> = targets.iter().map(|&t| t as f64 / n as f64).collect();
    let mut out: [Vec<usize>; 3] = Default::default();
    for (p, &i) in order.iter().enumerate() {
        let mut best = 0;
        let mut best_def = f64::NEG_INFINITY;
        for k in 0..3 {
            if out[k].len() >= targets[k] {
                continue;
            }
            let def = quotas[k] * (p + 1) as f64 - out[k].len() as f64;
            if def > best_def + 1e-12 {
                best_def = def;
                best = k;
            }
        }
        out[best].push(i);
    }
    let [train, val, test] = out;
    Ok(SplitIndices { train, val, test })
}

/// Largest-remainder apportionment of `n` items by `weights`.
pub(crate) fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut rema: Vec<(usize, f64)> = exact.iter().enumerate().map(|(i, x)| (i, x - x.floor())).collect();
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in rema {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified three-way split. Each piece keeps the parent's standardization.
pub fn split(data: &GroupedDataset, ratios: SplitRatios, seed: u64) -> Result<(GroupedDataset, GroupedDataset, GroupedDataset)> {
    let idx = split_indices(data, ratios, seed)?;
    Ok((
        data.subset(&idx.train).tagged(SplitTag::Train),
        data.subset(&idx.val).tagged(SplitTag::Val),
        data.subset(&idx.test).tagged(SplitTag::Test),
    ))
}

/// Re-standardizes all three splits with statistics fitted on `train` only.
pub fn standardize_from_train(
    train: &GroupedDataset,
    val: &GroupedDataset,
    test: &GroupedDataset,
) -> (GroupedDataset, GroupedDataset, GroupedDataset) {
    let st = Standardizer::fit(train.features());
    (train.standardized_with(&st), val.standardized_with(&st), test.standardized_with(&st))
}

/// Generator parameters for a two-cluster task with an intrinsically harder
/// unfavorable group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    /// P(s = s⁺).
    pub group_ratio: f64,
    pub label_noise_pos: f64,
    pub label_noise_neg: f64,
    pub class_sep: f64,
    /// Variance multiplier for s⁻ along one direction inclined 45° to the
    /// class axis; 1.0 gives both groups identical covariance.
    pub cov_inflation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 2000,
            d: 20,
            group_ratio: 0.8,
            label_noise_pos: 0.05,
            label_noise_neg: 0.25,
            class_sep: 3.0,
            cov_inflation: 25.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic spec: {m}")));
        if self.n < 2 || self.d == 0 {
            return bad("n >= 2 and d >= 1 required");
        }
        if !(self.group_ratio > 0.0 && self.group_ratio < 1.0) {
            return bad("group_ratio must lie in (0,1)");
        }
        for eta in [self.label_noise_pos, self.label_noise_neg] {
            if !(0.0..0.5).contains(&eta) {
                return bad("label noise must lie in [0, 0.5)");
            }
        }
        if !(self.class_sep.is_finite() && self.class_sep >= 0.0) || !(self.cov_inflation.is_finite() && self.cov_inflation > 0.0) {
            return bad("class_sep must be >= 0 and cov_inflation > 0");
        }
        Ok(())
    }
}

/// A generated dataset together with the labels before noise was injected.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub data: GroupedDataset,
    pub clean_labels: Vec<f64>,
}

/// Two Gaussian class clusters at ±class_sep/2 along a random unit
/// direction. s⁻ samples get their own label-flip rate and inflated variance
/// along a second direction. Deterministic per seed; features are returned
/// standardized over the full sample.
pub fn generate_synthetic_with_truth(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let d = spec.d;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let mut axis: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
    normalize(&mut axis);
    // Direction of the s⁻ covariance inflation: halfway between the class
    // axis and a random orthogonal direction (the axis itself when d = 1).
    let mut ortho: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
    let proj = dotp(&ortho, &axis);
    ortho.iter_mut().zip(&axis).for_each(|(o, a)| *o -= proj * a);
    let inflate_dir = if normalize(&mut ortho) {
        let mut u: Vec<f64> = axis.iter().zip(&ortho).map(|(a, o)| a + o).collect();
        normalize(&mut u);
        u
    } else {
        axis.clone()
    };
    let stretch = spec.cov_inflation.sqrt() - 1.0;

    let mut feats = Vec::with_capacity(spec.n * d);
    let mut labels = Vec::with_capacity(spec.n);
    let mut clean = Vec::with_capacity(spec.n);
    let mut groups = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let group = if rng.random::<f64>() < spec.group_ratio {
            Group::Favorable
        } else {
            Group::Unfavorable
        };
        let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mut z: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        if group == Group::Unfavorable {
            let c = stretch * dotp(&z, &inflate_dir);
            z.iter_mut().zip(&inflate_dir).for_each(|(zi, ui)| *zi += c * ui);
        }
        for (zi, ai) in z.iter().zip(&axis) {
            feats.push(zi + y * 0.5 * spec.class_sep * ai);
        }
        let eta = match group {
            Group::Favorable => spec.label_noise_pos,
            Group::Unfavorable => spec.label_noise_neg,
        };
        let flip = rng.random::<f64>() < eta;
        clean.push(y);
        labels.push(if flip { -y } else { y });
        groups.push(group);
    }
    let features = Tensor::matrix(spec.n, d, feats)?;
    let data = GroupedDataset::new(features, labels, groups)?.standardized();
    Ok(SyntheticData { data, clean_labels: clean })
}

/// Noisy-label synthetic dataset; see [`generate_synthetic_with_truth`].
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<GroupedDataset> {
    Ok(generate_synthetic_with_truth(spec)?.data)
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = dotp(v, v).sqrt();
    if norm < 1e-12 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

/// Counts per (label, group) stratum.
pub fn strata_counts(data: &GroupedDataset) -> HashMap<(i8, Group), usize> {
    let mut m = HashMap::new();
    for (y, g) in data.labels().iter().zip(data.groups()) {
        *m.entry((*y as i8, *g)).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn toy(n: usize) -> GroupedDataset {
        let feats: Vec<f64> = (0..n * 2).map(|i| i as f64).collect();
        let labels = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let groups = (0..n)
            .map(|i| if (i / 2) % 2 == 0 { Group::Favorable } else { Group::Unfavorable })
            .collect();
        GroupedDataset::new(Tensor::matrix(n, 2, feats).unwrap(), labels, groups).unwrap()
    }

    #[test]
    fn standardizes_column_exactly() {
        let t = Tensor::matrix(3, 1, vec![1., 2., 3.]).unwrap();
        let st = Standardizer::fit(&t);
        let z = st.apply(&t);
        let mean: f64 = z.data().iter().sum::<f64>() / 3.0;
        let var: f64 = z.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-15);
        assert!((var.sqrt() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_fixture_loads() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/toy.csv");
        let schema = CsvSchema {
            label_col: "label".into(),
            sensitive_col: "sex".into(),
            positive_label: "1".into(),
            positive_group: "male".into(),
        };
        let ds = load_csv(path, &schema).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.group_count(Group::Favorable), 2);
        assert_eq!(ds.group_count(Group::Unfavorable), 2);
        let raw = ds.raw_features();
        assert!((raw.data()[0] - 1.0).abs() < 1e-9);
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn schema() -> CsvSchema {
        CsvSchema {
            label_col: "y".into(),
            sensitive_col: "s".into(),
            positive_label: "1".into(),
            positive_group: "a".into(),
        }
    }

    #[test]
    fn csv_errors() {
        let one_group = write_csv("x,y,s\n1,1,a\n2,0,a\n");
        assert!(matches!(load_csv(one_group.path(), &schema()), Err(Error::SingleGroupData)));

        let missing = write_csv("x,label,s\n1,1,a\n");
        assert!(matches!(load_csv(missing.path(), &schema()), Err(Error::MissingColumn(c)) if c == "y"));

        let bad = write_csv("x,y,s\n1,1,a\nfoo,0,b\n");
        match load_csv(bad.path(), &schema()) {
            Err(Error::NonNumeric { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "x");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = toy(100);
        let r = SplitRatios {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        };
        let a = split_indices(&ds, r, 7).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (50, 25, 25));
        assert_eq!(a, split_indices(&ds, r, 7).unwrap());
        assert_ne!(a, split_indices(&ds, r, 8).unwrap());
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_tiny_stratum() {
        let ds = toy(6);
        assert!(matches!(
            split_indices(&ds, SplitRatios::default(), 0),
            Err(Error::SmallStratum { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_standardized() {
        let spec = SyntheticSpec {
            n: 300,
            d: 5,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.labels(), b.labels());
        for c in 0..5 {
            let col: Vec<f64> = (0..300).map(|i| a.features().row(i)[c]).collect();
            let m = col.iter().sum::<f64>() / 300.0;
            let s = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 300.0).sqrt();
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn synthetic_group_sizes_follow_ratio() {
        let spec = SyntheticSpec {
            n: 1000,
            group_ratio: 0.5,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        // 99% binomial interval for Bin(1000, 0.5): 500 ± 2.576·√250 ≈ 500 ± 40.7
        let k = ds.group_count(Group::Favorable) as i64;
        assert!((k - 500).abs() <= 40, "{k}");
    }

    #[test]
    fn synthetic_noise_rates_match_spec() {
        let spec = SyntheticSpec {
            n: 20000,
            d: 3,
            ..Default::default()
        };
        let s = generate_synthetic_with_truth(&spec).unwrap();
        for (g, eta) in [(Group::Favorable, 0.05), (Group::Unfavorable, 0.25)] {
            let idx = s.data.indices_of(g);
            let flips = idx.iter().filter(|&&i| s.data.labels()[i] != s.clean_labels[i]).count();
            let rate = flips as f64 / idx.len() as f64;
            assert!((rate - eta).abs() < 0.02, "{g:?}: {rate}");
        }
    }

    #[test]
    fn invalid_synthetic_spec() {
        let spec = SyntheticSpec {
            label_noise_neg: 0.5,
            ..Default::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn split_group_ratio_within_one_sample(n in 24usize..200, seed in 0u64..1000, p in 0.2f64..0.8) {
                let spec = SyntheticSpec { n, d: 2, group_ratio: p, seed, ..Default::default() };
                let ds = generate_synthetic(&spec).unwrap();
                let counts = strata_counts(&ds);
                prop_assume!(counts.len() == 4 && counts.values().all(|&c| c >= 3));
                let idx = split_indices(&ds, SplitRatios::default(), seed).unwrap();
                let global = ds.group_count(Group::Favorable) as f64 / n as f64;
                for part in [&idx.train, &idx.val, &idx.test] {
                    let k = part.iter().filter(|&&i| ds.groups()[i] == Group::Favorable).count() as f64;
                    let size = part.len() as f64;
                    prop_assert!((k / size - global).abs() <= 1.0 / size + 1e-12);
                }
            }

            #[test]
            fn destandardize_recovers_raw(vals in proptest::collection::vec(-1e3f64..1e3, 6..30)) {
                let n = vals.len() / 2;
                let t = Tensor::matrix(n, 2, vals[..2 * n].to_vec()).unwrap();
                let labels = vec![1.0; n];
                let groups = (0..n).map(|i| if i % 2 == 0 { Group::Favorable } else { Group::Unfavorable }).collect();
                let ds = GroupedDataset::new(t.clone(), labels, groups).unwrap();
                let once = ds.standardized();
                let twice = once.subset(&(0..n / 2 + 1).collect::<Vec<_>>()).standardized();
                let back = once.raw_features();
                for (a, b) in back.data().iter().zip(t.data()) {
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
                }
                let back2 = twice.raw_features();
                for (a, b) in back2.data().iter().zip(t.data()) {
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
                }
            }
        }
    }
}
