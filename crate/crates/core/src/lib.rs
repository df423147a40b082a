//! A desk-scale pixel-space diffusion laboratory with a value-mixed
//! cross-attention aesthetic adapter.
//!
//! Content prompts are encoded by a frozen toy text encoder; aesthetic labels
//! are turned into a cached table of paired `[CLS]` embeddings, selected per
//! image, projected through a zero-initialized connector, and injected into
//! every cross-attention block as a second value branch that reuses the
//! content attention map.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training and
//! sampling, `f64` for gradient verification). Concrete aliases for the
//! common instantiations live at the crate root.

pub mod aesemb;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
mod io;
pub mod layers;
pub mod lora;
pub mod numerics;
pub mod params;
pub mod scalar;
pub mod synthdata;
pub mod textenc;
pub mod train;
pub mod unet;
pub mod vmixcond;

pub use error::{Error, Result};
pub use numerics::{Graph, Rng, Tensor, Var};
pub use scalar::Scalar;
pub use unet::{UNet32, UNet64};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
