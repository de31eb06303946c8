//! Model assembly, loss, optimizers, training loops and gradient checks.

mod data;
mod fit;
pub mod gradcheck;
mod loss;
mod model;
mod optim;

pub use data::Dataset;
pub use fit::{
    argmax_rows, evaluate, mean_loss, train_epochs, train_step, Classifier, EpochRecord,
};
pub use loss::softmax_cross_entropy;
pub use model::{
    build_model, Backbone, BackboneLayer, Block, BlockSpec, FernSettings, Forward, LayerSpec,
    Model, ModelConfig, Stage, StateValue,
};
pub use optim::{Optimizer, OptimizerKind, TrainConfig};
