//! Ternary-weight diffusion transformers.
//!
//! The crate covers the full path from training to deployment:
//!
//! * [`quant`]: absmean ternarization with a learnable scale and the
//!   straight-through backward rule.
//! * [`bitpack`] and [`checkpoint`]: four trits per byte, packed linear
//!   inference and a binary checkpoint format.
//! * [`model`]: a small DiT whose block projections are ternary, with an
//!   optional RMS norm on the adaLN output.
//! * [`diffusion`]: DDPM corruption, loss, ancestral sampling and
//!   classifier-free guidance.
//! * [`train`]: quantization-aware training.
//! * [`diagnostics`]: activation statistics and checkpoint size accounting.

pub mod bitpack;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod model;
pub mod ops;
pub mod params;
pub mod ppm;
pub mod quant;
pub mod real;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::DiT;
pub use tensor::{Image, Matrix};
