//! Benchmark fixtures built from the synthetic generators.

use zsl_core::attention::AttentionProblem;
use zsl_core::prototypes::build_prototype_set;
use zsl_core::synthetic::{planted_visual_tokens, ridge_recovery, SyntheticConfig, SyntheticDataset};
use zsl_core::{Method, PrototypeParams, PrototypeSet};

pub struct RidgeFixture {
    pub data: SyntheticDataset,
    pub prototypes: PrototypeSet,
}

/// Recovery dataset with `seen` classes, `k`-dim embeddings and `d`-dim features.
pub fn ridge_fixture(seen: usize, k: usize, d: usize, per_class: usize) -> RidgeFixture {
    let cfg = SyntheticConfig { seen, k, d, per_class, ..SyntheticConfig::default() };
    let data = ridge_recovery(&cfg).expect("synthetic dataset");
    let (prototypes, _) =
        build_prototype_set(&data.catalog, &data.embeddings, Method::Classname, &PrototypeParams::default(), None)
            .expect("prototypes");
    RidgeFixture { data, prototypes }
}

impl RidgeFixture {
    pub fn unseen_prototypes(&self) -> PrototypeSet {
        self.prototypes.select(&self.data.unseen).expect("unseen classes")
    }
}

/// Attention objective on the planted dataset.
pub fn attention_fixture(seen: usize, k: usize, d: usize) -> AttentionProblem {
    let cfg = SyntheticConfig { seen, k, d, ..SyntheticConfig::default() };
    let data = planted_visual_tokens(&cfg).expect("synthetic dataset");
    AttentionProblem::new(&data.train, &data.catalog, &data.embeddings, 1e-3).expect("attention problem")
}
