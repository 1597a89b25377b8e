//! Convolutional encoder-decoder producing the four raw distribution maps,
//! its trainer, hyperparameter search and the linear baseline.

mod baseline;
mod checkpoint;
mod hyper;
mod layers;
mod network;
mod tensor;
mod train;

pub use baseline::{composite_dbz, LinearBaseline, BASELINE_MASK_DBZ};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use hyper::{hypersearch, sample_hyperparameters, HyperSpace, SearchOutcome, Trial, TrialResult};
pub use layers::BN_EPSILON;
pub use network::{ForwardPass, InputMode, Mode, ModelSpec, Network, ParamInfo, ParamKind, SkipStyle, Weights, OUTPUT_CHANNELS};
pub use tensor::Tensor;
pub use train::{
    batch_loss_and_grad, evaluate_loss, output_to_maps, predict, predict_params, product_maps, train, train_with, BatchStep, EarlyStopping,
    EpochRecord, ModelState, Optimizer, ProductMaps, Products, StopDecision, TrainConfig, TrainOutcome, BN_MOMENTUM,
};
