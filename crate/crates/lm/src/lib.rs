//! A small autoregressive transformer over trajectory token sequences:
//! parameters and hand-written gradients, LoRA adapters, incremental
//! inference, the training loop and the checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod lora;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{LoraConfig, LrSchedule, ModelConfig, PermuteMode, Proj, TrainConfig, TrainMode};
pub use error::{LmError, Result};
pub use infer::Session;
pub use lora::{lora_forward, LoraAdapter, LoraPair};
pub use model::{Grads, ModelParams};
pub use tensor::{Scalar, Tensor};
pub use train::{encode_dataset, train, train_with, TrainHistory};
