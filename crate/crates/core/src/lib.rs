//! Low-bit quantization-aware training of adapters for frozen backbones.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! * [`gauss`] — standard normal CDF / quantile primitives;
//! * [`codebook`] — optimal b-bit Gaussian codebooks (k-medians /
//!   Lloyd-Max fixed points) and empirical 1-D clustering;
//! * [`quant`] — fake quantization with the exact straight-through
//!   backward;
//! * [`pack`] / [`ckpt`] — bit-packed tensors and the `.badp` checkpoint
//!   container with an analytic size model;
//! * [`tape`] — a small reverse-mode autodiff engine over dense matrices;
//! * [`model`] — a toy transformer backbone with AdaptFormer / LoRA
//!   adapter insertion, LoRA merging, and parameter-noise probes;
//! * [`optim`] — AdamW with linear warm-up and cosine decay.

pub mod ckpt;
pub mod codebook;
pub mod error;
pub mod gauss;
pub mod model;
pub mod optim;
pub mod pack;
pub mod quant;
pub mod tape;

pub use ckpt::{size_estimate, AdapterKind, Checkpoint};
pub use codebook::{cluster_1d, interval_center, Codebook, EmpiricalCodebook, Metric};
pub use error::{Error, Result};
pub use pack::{quantize_tensor, reconstruct, QuantizedTensor};
pub use quant::{fake_quant_backward, fake_quant_forward, standardize, QuantState};
pub use tape::{NodeId, Tape, Tensor};
