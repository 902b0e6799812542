//! Model parameters: the text encoder and the U-Net denoiser.
//!
//! Parameters live outside any tape as plain [`Tensor`]s grouped in typed
//! structs. Every forward pass first *binds* the parameters onto a tape
//! ([`bind`]), which pushes each tensor as a leaf (frozen) or differentiable
//! param (trainable) and returns a name-to-node map. The same visitation
//! order drives optimizer updates and checkpoint serialization, so the
//! name list is the single source of truth for parameter identity.

pub mod encoder;
pub mod unet;

pub use encoder::{
    encode, substitute_word_embeddings, EmbeddingOverride, EncoderConfig, EncoderParams,
};
pub use unet::{
    denoise, AttentionQuery, AttnHook, DenoiseOutput, LayerId, UNetConfig, UNetParams,
};

use crate::error::Result;
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Uniform traversal over named parameters. `visit` and `visit_mut` must
/// enumerate the same names in the same order; a unit test checks this for
/// the full model.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// Joins a visitation prefix with a field name.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ── building blocks ──────────────────────────────────────────────────────────

/// Dense layer computing `x @ w (+ b)`, with `w: (in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(fan_in: usize, out: usize, bias: bool, rng: &mut R) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: Tensor::randn_scaled(vec![fan_in, out], std, rng),
            b: bias.then(|| Tensor::zeros(vec![out])),
        }
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w"), &self.w);
        if let Some(b) = &self.b {
            f(&join(prefix, "b"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&join(prefix, "b"), b);
        }
    }
}

/// 3x3 convolution weights `(c_out, c_in, 3, 3)` plus a channel bias.
#[derive(Debug, Clone)]
pub struct Conv3 {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv3 {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / ((c_in * 9) as f64).sqrt();
        Conv3 {
            w: Tensor::randn_scaled(vec![c_out, c_in, 3, 3], std, rng),
            b: Tensor::zeros(vec![c_out]),
        }
    }

    /// Zero-initialized variant, used for the epsilon head so the untrained
    /// denoiser starts as the zero function.
    pub fn zeroed(c_in: usize, c_out: usize) -> Self {
        Conv3 {
            w: Tensor::zeros(vec![c_out, c_in, 3, 3]),
            b: Tensor::zeros(vec![c_out]),
        }
    }
}

impl Module for Conv3 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Group-norm affine parameters.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    pub fn new(channels: usize) -> Self {
        Norm {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
        }
    }
}

impl Module for Norm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Single-head attention projections. For self-attention the query and
/// key/value inputs share a width; for cross-attention they differ.
#[derive(Debug, Clone)]
pub struct AttnProj {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttnProj {
    pub fn new<R: Rng>(q_in: usize, kv_in: usize, inner: usize, out: usize, rng: &mut R) -> Self {
        AttnProj {
            wq: Tensor::randn_scaled(vec![q_in, inner], 1.0 / (q_in as f64).sqrt(), rng),
            wk: Tensor::randn_scaled(vec![kv_in, inner], 1.0 / (kv_in as f64).sqrt(), rng),
            wv: Tensor::randn_scaled(vec![kv_in, inner], 1.0 / (kv_in as f64).sqrt(), rng),
            wo: Tensor::randn_scaled(vec![inner, out], 1.0 / (inner as f64).sqrt(), rng),
        }
    }
}

impl Module for AttnProj {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "wq"), &self.wq);
        f(&join(prefix, "wk"), &self.wk);
        f(&join(prefix, "wv"), &self.wv);
        f(&join(prefix, "wo"), &self.wo);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
    }
}

// ── whole-model aggregation ─────────────────────────────────────────────────

/// Architecture hyperparameters for encoder and denoiser together.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub unet: UNetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            unet: UNetConfig::default(),
        }
    }
}

/// All trainable weights of the engine.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub unet: UNetParams,
}

impl ModelParams {
    /// Deterministic initialization: the same `(config, seed)` always yields
    /// bit-identical weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams {
            encoder: EncoderParams::init(&config.encoder, &mut rng),
            unet: UNetParams::init(&config.unet, &mut rng),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Order-independent checksum over every parameter's bits, used to
    /// verify that a training stage left weights untouched.
    pub fn checksum(&self) -> u64 {
        let mut acc: u64 = 0;
        self.visit("", &mut |name, t| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
            }
            for v in t.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x1000_0000_01b3);
            }
            acc = acc.wrapping_add(h);
        });
        acc
    }
}

impl Module for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.unet.visit(&join(prefix, "unet"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.unet.visit_mut(&join(prefix, "unet"), f);
    }
}

// ── tape binding ─────────────────────────────────────────────────────────────

/// Parameters pushed onto a tape for one forward pass, addressable by name.
pub struct Bound {
    names: Vec<String>,
    nodes: Vec<NodeId>,
    map: HashMap<String, NodeId>,
}

impl Bound {
    /// Node of a named parameter. Panics on unknown names: forward code and
    /// visitors are compiled together, so a miss is a bug, not a data error.
    pub fn id(&self, name: &str) -> NodeId {
        match self.map.get(name) {
            Some(&id) => id,
            None => panic!("unbound parameter {name:?}"),
        }
    }

    /// Nodes in visitation order, aligned with `visit_mut` for optimizers.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Pushes every parameter of `module` onto `tape`. With `trainable = false`
/// the parameters are constants (and the tape may be a no-grad tape); with
/// `trainable = true` they become gradient roots for `backward`.
pub fn bind(tape: &mut Tape, module: &impl Module, trainable: bool) -> Bound {
    let mut names = Vec::new();
    let mut nodes = Vec::new();
    module.visit("", &mut |name, t| {
        let id = if trainable {
            tape.param(t.clone())
        } else {
            tape.leaf(t.clone())
        };
        names.push(name.to_string());
        nodes.push(id);
    });
    let map = names
        .iter()
        .cloned()
        .zip(nodes.iter().copied())
        .collect();
    Bound { names, nodes, map }
}

/// Applies a binding prefix inside forward implementations.
pub(crate) struct Scope<'a> {
    bound: &'a Bound,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(bound: &'a Bound, prefix: &str) -> Self {
        Scope {
            bound,
            prefix: prefix.to_string(),
        }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.bound.id(&join(&self.prefix, name))
    }

    pub fn sub(&self, name: &str) -> Scope<'a> {
        Scope {
            bound: self.bound,
            prefix: join(&self.prefix, name),
        }
    }
}

/// Shared forward helper: `x @ w (+ b)` for a bound [`Linear`].
pub(crate) fn linear_forward(tape: &mut Tape, scope: &Scope, x: NodeId, bias: bool) -> Result<NodeId> {
    let h = tape.matmul(x, scope.id("w"))?;
    if bias {
        tape.add_bias_rows(h, scope.id("b"))
    } else {
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visit_and_visit_mut_agree_on_names() {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::init(&cfg, 0);
        let mut a = Vec::new();
        params.visit("", &mut |n, _| a.push(n.to_string()));
        let mut b = Vec::new();
        params.visit_mut("", &mut |n, _| b.push(n.to_string()));
        assert_eq!(a, b);
        assert!(!a.is_empty());
        // Names must be unique.
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), a.len());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 17);
        let b = ModelParams::init(&cfg, 17);
        assert_eq!(a.checksum(), b.checksum());
        let c = ModelParams::init(&cfg, 18);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn bind_pushes_every_parameter() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 0);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, true);
        assert_eq!(bound.names().len(), bound.nodes().len());
        assert_eq!(tape.len(), bound.nodes().len());
        for &n in bound.nodes() {
            assert!(tape.requires_grad(n));
        }
        let mut tape2 = Tape::no_grad();
        let bound2 = bind(&mut tape2, &params, false);
        for &n in bound2.nodes() {
            assert!(!tape2.requires_grad(n));
        }
    }

    #[test]
    fn model_is_desk_scale() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 0);
        let n = params.param_count();
        assert!(n < 200_000, "parameter count {n} exceeds the desk-scale budget");
        assert!(n > 10_000, "parameter count {n} suspiciously small");
    }
}
