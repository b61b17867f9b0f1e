//! Training and evaluation driver: configuration, loops, BIOES decoding,
//! entity metrics and inspection dumps.

mod config;
mod inspect;
mod metrics;
mod tagging;
mod train;

pub use config::{warmup_lr, DataConfig, FinetuneSchedule, PretrainSchedule, TrainConfig};
pub use inspect::{find_doc, inspect_attention, inspect_edge_image, inspect_graph};
pub use metrics::{entity_prf, f1_score, AverageMode, LabelMetrics, MetricsReport};
pub use tagging::{argmax_tags, decode_bioes, decode_tags, encode_tags, split_tag, tag_index, EntityPrediction, Position, OUTSIDE};
pub use train::{
    evaluate, evaluate_on, finetune, finetune_on, gold_tags, pretrain, pretrain_on, token_accuracy, FinetuneRecord,
    LossRecord, Trained,
};
