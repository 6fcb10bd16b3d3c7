//! Fixtures shared by the benchmarks.

use bifp_core::data::generate_synthetic;
use bifp_core::{GroupStats, GroupedBatch, GroupedDataset, MaskMode, MaskedModel, SyntheticSpec};

pub struct Fixture {
    pub data: GroupedDataset,
    pub batch: GroupedBatch,
    pub stats: GroupStats,
    pub model: MaskedModel,
}

/// Default-sized synthetic set, a d→64→32→1 MLP and one 64-sample batch.
pub fn fixture(mode: MaskMode) -> Fixture {
    let data = generate_synthetic(&SyntheticSpec::default()).expect("default spec is valid");
    let batch = data.batch(&(0..64).collect::<Vec<_>>());
    let stats = GroupStats::of(&data).expect("both groups present");
    let model = MaskedModel::mlp(&[data.dim(), 64, 32, 1], mode, 0).expect("valid widths");
    Fixture {
        data,
        batch,
        stats,
        model,
    }
}
