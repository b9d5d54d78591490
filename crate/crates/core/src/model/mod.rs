//! Toy byte-level transformer with autoregressive and masked-diffusion modes.

mod batch;
mod checkpoint;
mod config;
mod generate;
pub mod io;
mod transformer;

pub use batch::Batch;
pub use checkpoint::{
    layer_path, param_layout, quantizable_paths, ModelCheckpoint, ParamMap, TrainingMeta, BLOCK_LINEARS, OUTPUT_HEAD,
    POSITION_EMBEDDING, TOKEN_EMBEDDING,
};
pub use config::{Mode, ModelConfig, BOS, BYTE_VOCAB, MASK, PAD};
pub use generate::{generate_ar, generate_ar_batch, generate_diffusion, generate_diffusion_batch, DiffusionTrace};
pub use io::{load_checkpoint, load_checkpoint_with, save_checkpoint, save_checkpoint_with};
pub use transformer::{forward, forward_pass_count, forward_tokens, loss, loss_and_grads, mean_loss_and_grads};

pub(crate) use transformer::{linear_inputs, logits_for_rows};
