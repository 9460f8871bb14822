//! A small reverse-mode autodiff engine and the residual CNN built on it.
//!
//! Values live on a [`Tape`]; every op records what it needs for the
//! backward sweep. Parameters are owned by a [`ParamStore`] and copied onto
//! the tape per forward pass, so one store can serve many tapes.

mod checkpoint;
mod conv;
#[cfg(test)]
mod gradcheck;
mod model;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CKPT_MAGIC};
pub use conv::{conv_out_len, ConvGeometry};
pub use model::{batch_from_images, Model, ModelConfig};
pub use optim::{adam_step, AdamState, LrSchedule};
pub use tape::{Tape, Var};
pub use tensor::{ParamStore, Real, Tensor};
