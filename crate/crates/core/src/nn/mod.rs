//! A small deterministic CPU training engine.

mod engine;
mod layer;
mod loss;
mod model;
mod optim;
mod train;

pub use engine::{backward, backward_parallel, forward, Gradients, LayerGrad, Targets};
pub use layer::{Layer, LayerSpec, Shape};
pub use loss::{cross_entropy_loss, soft_target_loss, softmax};
pub use model::{CnnConfig, GroupConfig, HostModel};
pub use optim::{lr_schedule, nesterov_update, sgd_nesterov_step, OptimizerState};
pub use train::{
    argmax, evaluate, predict_logits, predict_proba, train, RegularizerHook, TrainConfig, TrainData,
};
