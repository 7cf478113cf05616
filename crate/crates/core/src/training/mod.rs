//! The pipeline: pretrain the standard model, distill the selectors from
//! its attention maps, then finetune through the selective schedule. A
//! per-patch regression head can be fitted on any frozen backbone.

mod config;
mod data;
mod metrics;
mod optim;
mod phases;

pub use config::{LossKind, Phase, TrainConfig};
pub use data::{
    decode_dataset, encode_dataset, from_raw_u8, load_dataset, quadrant_dataset, save_dataset, Dataset, QuadrantSpec,
    Split, DATASET_MAGIC, DATASET_VERSION, PIXEL_MEAN, PIXEL_STD,
};
pub use metrics::{MetricLog, MetricRecord, CSV_HEADER};
pub use optim::{Optimizer, OptimizerKind};
pub use phases::{
    dense_mse, evaluate, features, finetune, pretrain, run_phase, selector_kld, selector_overlap, train_dense_head,
    train_selectors, worker_pool, EpochSummary, Evaluation, TrainReport, REDUCE_CHUNK, THREADS_ENV,
};

#[cfg(test)]
mod tests;
