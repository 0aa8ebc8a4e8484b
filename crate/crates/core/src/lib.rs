//! Latent-space safety probes for video diffusion latents.
//!
//! The crate carries everything below the operator surface: a small dense
//! tensor library with reverse-mode differentiation, the layer library and
//! the two probe architectures, the training loop, an on-disk latent archive
//! with a synthetic data generator, the decode guard that sits between the
//! diffusion and decode stages of a generation pipeline, and a latency
//! harness.

pub mod autograd;
pub mod bench;
pub mod element;
pub mod error;
pub mod guard;
pub mod layers;
pub mod ops;
pub mod par;
pub mod probes;
pub mod store;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use element::{DType, Float};
pub use error::{Error, Result};
pub use tensor::{Fill, Shape, Tensor};
