//! Kernels for serving multimodal LLMs on end-side devices.
//!
//! The crate covers the host-side pipeline around a vision encoder and an LLM:
//!
//! - [`partition`]: adaptive slice planning for arbitrary aspect ratios and the
//!   resulting visual token budget.
//! - [`posembed`]: 1D to 2D position-embedding reshaping and bilinear resizing.
//! - [`resampler`]: single-layer cross-attention compression of slice tokens.
//! - [`schema`]: the special-token layout that tells the LLM where each slice sits.
//! - [`packing`]: fixed-length sequence packing with isolated attention.
//! - [`quant`]: blockwise symmetric 4-bit weight quantization and its file formats.
//! - [`rlaif`]: claim-verdict scoring, preference pairs and the DPO objective.
//! - [`deploysim`]: an analytical on-device cost model and configuration search.
//! - [`cli`]: the `evk` command-line front end.

pub mod cli;
pub mod deploysim;
pub mod error;
pub mod packing;
pub mod partition;
pub mod posembed;
pub mod quant;
pub mod resampler;
pub mod rlaif;
pub mod schema;

pub use error::{Error, Result};
