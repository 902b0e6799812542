//! layoutdiff — a desk-scale text-conditioned diffusion engine with
//! training-free layout control through cross-attention guidance.
//!
//! The crate is small enough to audit end to end and runs entirely on CPU
//! with `f64` math, yet exercises the full pipeline of a layout-controlled
//! generative model:
//!
//! * [`tensor`] — dense tensors plus tape-based reverse-mode autodiff over a
//!   closed primitive set, each primitive verified by finite differences.
//! * [`text`] / [`model`] — a toy contextual text encoder and a miniature
//!   U-Net denoiser whose seven cross-attention layers can be recorded and
//!   intervened on by stable layer id.
//! * [`schedule`] / [`sampler`] / [`train`] — the variance-preserving noise
//!   schedule, DDIM sampling with classifier-free guidance, and epsilon-
//!   prediction training.
//! * [`guidance`] — layout control: Gaussian window priors over target
//!   boxes, the forward attention-bias rule, and the backward energy
//!   gradient that nudges the latent between denoising steps.
//! * [`dataset`] — a deterministic synthetic corpus of colored shapes with
//!   box annotations and relational captions.
//! * [`eval`] — a color/shape oracle detector and the spatial-fidelity
//!   metrics built on it (object accuracy, VISOR, AP at IoU 0.3).
//! * [`editing`] — concept inversion, fine-tuning and layout-controlled
//!   re-rendering of a learned concept.
//! * [`checkpoint`] — atomic on-disk persistence of model state.
//!
//! Everything is deterministic given the seeds in the run configuration:
//! repeated runs produce bit-identical tensors, images and reports.

pub mod checkpoint;
pub mod dataset;
pub mod editing;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
