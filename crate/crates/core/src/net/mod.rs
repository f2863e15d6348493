//! Preconditioned MLP denoiser: evaluation, input vector-Jacobian products,
//! denoising score matching and checkpoints.

pub mod checkpoint;
pub mod denoiser;
pub mod embed;
pub mod mlp;
pub mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use denoiser::{DenoiserLinearization, DenoiserModel, Preconditioning};
pub use embed::{embed_log_sigma, DEFAULT_EMBED_DIM};
pub use mlp::MlpParams;
pub use train::{dsm_loss, param_grad_check, train_dsm, DsmBatch, TrainConfig, TrainReport};
