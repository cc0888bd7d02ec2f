//! Model assembly, freezing policy, masked-LM pretraining, the training loop,
//! metrics and forward-cost timing.

mod metrics;
mod model;
mod pretrain;
mod timing;
mod train;

pub use metrics::{argmax_rows, score, Metrics};
pub use model::{build_model, Backbone, BuildInputs, Model, ModelKind, Regime, CORRUPT_PREFIX, HEAD_PREFIX};
pub use pretrain::{mask_batch, mlm_evaluate, mlm_pretrain, MaskedBatch, MlmEval, PretrainConfig, PretrainReport};
pub use timing::{linear_fit, max_relative_deviation, measure_time, time_forward, TimeRatio};
pub use train::{evaluate, predict, train, EpochRecord, History, TrainConfig};
