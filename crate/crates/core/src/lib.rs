//! Domain representation injection (DRI) for frozen Vision Transformers.

pub mod ablate;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dri;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod init;
pub mod model;
pub mod optim;
pub mod param;
pub mod peft;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
