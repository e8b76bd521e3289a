//! Low-rank hypernetwork that refines captured `(H, G)` pairs, its training
//! loss and its training loop.

mod gradcheck;
mod loss;
mod net;
mod train;

pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};
pub use loss::{
    accumulate_gradient_signal, apply_deltas, layer_deltas, loss_horse, predicted_residual, raw_residual, trace_term,
    Coefficients, GradientSignal, HorseBatch, HorseLoss, LossOptions, ResidualOptions, Spread,
};
pub use net::{hyper_forward, Activation, Block, HyperNet, HyperNetConfig, HyperParams};
pub use train::{train_hypernetwork, PreparedPool, TrainLog, TrainLogRow, CLIP_NORM};
