#![allow(dead_code)]

pub mod grad;

use std::path::PathBuf;

use formnet::data::{generate_synthetic_corpus, Document, SyntheticFormSpec};
use formnet::harness::TrainConfig;
use formnet::model::ModelConfig;
use formnet::vision::ImageEmbedderConfig;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// The shipped desk recipe with data paths cleared.
pub fn desk() -> TrainConfig {
    let mut cfg = TrainConfig::from_file(&config_path("desk.json")).unwrap();
    cfg.data.pretrain = None;
    cfg.data.train = None;
    cfg.data.test = None;
    cfg
}

/// All splits share `seed` so they draw from one lexicon; disjoint
/// `first_index` ranges keep them disjoint.
pub fn corpus(seed: u64, num_documents: usize, first_index: usize, prefix: &str) -> Vec<Document> {
    generate_synthetic_corpus(&SyntheticFormSpec {
        seed,
        num_documents,
        first_index,
        id_prefix: prefix.into(),
        ..SyntheticFormSpec::default()
    })
    .unwrap()
}

/// A small architecture for fast loops.
pub fn small_model(labels: Vec<String>) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        etc_heads: 2,
        projection_dim: 16,
        image: ImageEmbedderConfig {
            input_size: 32,
            kernel: 3,
            backbone_filters: vec![2, 4, 4],
            backbone_strides: vec![1, 2, 1],
            roi_h: 3,
            roi_w: 8,
            sampling: 1,
            refiner_filters: vec![4, 2, 2],
            refiner_strides_w: vec![2, 2, 1],
        },
        ..ModelConfig::desk(labels, 256)
    }
}

/// Desk recipe on the small architecture with short schedules.
pub fn small(seed: u64) -> TrainConfig {
    let mut cfg = desk();
    cfg.seed = seed;
    cfg.model = small_model(cfg.model.labels.clone());
    let pre = cfg.pretrain.as_mut().unwrap();
    pre.steps = 10;
    pre.batch_size = 2;
    pre.checkpoint_every = 0;
    let ft = cfg.finetune.as_mut().unwrap();
    ft.epochs = 2;
    ft.batch_size = 4;
    cfg
}
