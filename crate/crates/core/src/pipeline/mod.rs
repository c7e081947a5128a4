//! End-to-end model: scorer, differentiable patch selection, shared
//! feature network, aggregation head, and the training loop.

mod config;
mod model;
mod optim;
mod train;

pub use config::{format_kv, parse_kv, Aggregation, LrSchedule, ModelConfig, PipelineConfig, SelectorKind, TrainConfig};
pub use model::{argmax, downscale, group_of, Forward, Group, Model, ParamStore, Prediction, Selection, NORMALIZE_EPS};
pub use optim::{clip_global_norm, clip_group_norms, global_norm, lr_at, AdamW};
pub use train::{evaluate, load_checkpoint, save_checkpoint, BatchSampler, StepMetrics, Trainer};
