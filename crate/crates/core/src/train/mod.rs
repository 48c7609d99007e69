//! A small trainable model over the coefficient-dynamics engine, with
//! reverse-accumulation gradients, an adaptive-moment optimizer, and
//! deterministic training/evaluation loops.

pub mod model;
pub mod optim;
pub mod tape;
pub mod trainer;

pub use model::{
    evaluate, flatten_batch, forward_tape, loss_and_grad, model_forward, BlockStyle, EvalPath,
    Gradients, ModelConfig, ModelParams, ParamEntry, Preprocessing,
};
pub use optim::AdamW;
pub use trainer::{
    gradient_names, load_checkpoint, save_checkpoint,
    finite_difference_check, train_grid, train_loop, Divergence, EpochMetrics, FdReport, TrainConfig,
    TrainResult,
};
