//! Toy contextual text encoder.
//!
//! Token embeddings plus learned positional embeddings, refined by a couple
//! of residual self-attention mixing layers (each followed by a residual
//! two-layer MLP). The output is one contextual vector per prompt position,
//! consumed by the denoiser's cross-attention layers as keys and values.
//!
//! The design keeps a useful degenerate configuration: with the attention
//! output projections, the MLP output layers and the positional table all
//! zero, the encoder is exactly the embedding lookup, which makes padding
//! tokens interchangeable — a property the token-role tests rely on.

use super::{bind, join, linear_forward, AttnProj, Bound, Linear, Module, Scope};
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::text::{TokenizedPrompt, MAX_TOKENS};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Embedding-table rows; concept tokens added later live outside it.
    pub vocab_size: usize,
    /// Embedding width M.
    pub dim: usize,
    /// Prompt length N (fixed to [`MAX_TOKENS`]).
    pub n_tokens: usize,
    /// Number of residual mixing layers.
    pub layers: usize,
    /// Inner attention width.
    pub attn_dim: usize,
    /// MLP hidden width.
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: crate::text::Vocabulary::core().len(),
            dim: 32,
            n_tokens: MAX_TOKENS,
            layers: 2,
            attn_dim: 16,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixLayer {
    pub attn: AttnProj,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

impl Module for MixLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.mlp1.visit(&join(prefix, "mlp1"), f);
        self.mlp2.visit(&join(prefix, "mlp2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.mlp1.visit_mut(&join(prefix, "mlp1"), f);
        self.mlp2.visit_mut(&join(prefix, "mlp2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// `(vocab_size, dim)` token embedding table.
    pub token_emb: Tensor,
    /// `(n_tokens, dim)` learned positional table.
    pub pos_emb: Tensor,
    pub layers: Vec<MixLayer>,
}

impl EncoderParams {
    pub fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let layers = (0..cfg.layers)
            .map(|_| MixLayer {
                attn: AttnProj::new(cfg.dim, cfg.dim, cfg.attn_dim, cfg.dim, rng),
                mlp1: Linear::new(cfg.dim, cfg.hidden, true, rng),
                mlp2: Linear::new(cfg.hidden, cfg.dim, true, rng),
            })
            .collect();
        EncoderParams {
            token_emb: Tensor::randn_scaled(vec![cfg.vocab_size, cfg.dim], 0.3, rng),
            pos_emb: Tensor::randn_scaled(vec![cfg.n_tokens, cfg.dim], 0.1, rng),
            layers,
        }
    }

    /// Zeroes every path around the residual streams (attention output
    /// projections, MLP output layers, positional table), reducing the
    /// encoder to a pure embedding lookup.
    pub fn zero_mixing(&mut self) {
        self.pos_emb = Tensor::zeros(self.pos_emb.shape().to_vec());
        for layer in &mut self.layers {
            layer.attn.wo = Tensor::zeros(layer.attn.wo.shape().to_vec());
            layer.mlp2.w = Tensor::zeros(layer.mlp2.w.shape().to_vec());
            if let Some(b) = &mut layer.mlp2.b {
                *b = Tensor::zeros(b.shape().to_vec());
            }
        }
    }
}

impl Module for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "token_emb"), &self.token_emb);
        f(&join(prefix, "pos_emb"), &self.pos_emb);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "token_emb"), &mut self.token_emb);
        f(&join(prefix, "pos_emb"), &mut self.pos_emb);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Replacement embedding for one prompt position, overriding the table row
/// the token id would normally select. Used for concept tokens (whose
/// vectors live outside the table) and for padding-substitution probes.
pub struct EmbeddingOverride {
    pub position: usize,
    /// `(dim,)` vector already on the tape.
    pub vector: NodeId,
}

/// Runs the encoder over a tokenized prompt, returning `(n_tokens, dim)`
/// contextual embeddings. `bound` must come from [`bind`] over params whose
/// prefix is `"encoder"` within the model (see [`encode_with_params`] for a
/// self-contained variant).
pub fn encode(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    prompt: &TokenizedPrompt,
    overrides: &[EmbeddingOverride],
) -> Result<NodeId> {
    encode_scoped(tape, &Scope::new(bound, "encoder"), cfg, prompt, overrides)
}

/// Binds `params` alone (prefix-free) and encodes; convenient in tests.
pub fn encode_with_params(
    tape: &mut Tape,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    prompt: &TokenizedPrompt,
    trainable: bool,
) -> Result<NodeId> {
    let bound = bind(tape, params, trainable);
    encode_scoped(tape, &Scope::new(&bound, ""), cfg, prompt, &[])
}

pub(crate) fn encode_scoped(
    tape: &mut Tape,
    scope: &Scope,
    cfg: &EncoderConfig,
    prompt: &TokenizedPrompt,
    overrides: &[EmbeddingOverride],
) -> Result<NodeId> {
    if prompt.ids.len() != cfg.n_tokens {
        return Err(Error::invalid(format!(
            "prompt has {} positions, encoder expects {}",
            prompt.ids.len(),
            cfg.n_tokens
        )));
    }
    for o in overrides {
        if o.position >= cfg.n_tokens {
            return Err(Error::IndexOutOfRange {
                op: "encode override",
                index: o.position,
                size: cfg.n_tokens,
            });
        }
    }
    let table = scope.id("token_emb");

    let emb = if overrides.is_empty() {
        for (&id, pos) in prompt.ids.iter().zip(0..) {
            if id >= cfg.vocab_size {
                return Err(Error::invalid(format!(
                    "token id {id} at position {pos} is outside the embedding table \
                     (size {}) and no override was supplied",
                    cfg.vocab_size
                )));
            }
        }
        tape.embedding(table, &prompt.ids)?
    } else {
        // Assemble the prompt row by row so overridden positions take their
        // vectors from the tape instead of the table.
        let mut rows = Vec::with_capacity(cfg.n_tokens);
        for (pos, &id) in prompt.ids.iter().enumerate() {
            if let Some(o) = overrides.iter().find(|o| o.position == pos) {
                rows.push(tape.reshape(o.vector, vec![1, cfg.dim])?);
            } else {
                if id >= cfg.vocab_size {
                    return Err(Error::invalid(format!(
                        "token id {id} at position {pos} is outside the embedding table \
                         (size {}) and no override was supplied",
                        cfg.vocab_size
                    )));
                }
                rows.push(tape.embedding(table, &[id])?);
            }
        }
        tape.concat(&rows)?
    };

    let mut x = tape.add(emb, scope.id("pos_emb"))?;
    let inv_sqrt_d = 1.0 / (cfg.attn_dim as f64).sqrt();
    for i in 0..cfg.layers {
        let layer = scope.sub(&format!("layer{i}"));
        // Residual self-attention mixing.
        let attn = layer.sub("attn");
        let q = tape.matmul(x, attn.id("wq"))?;
        let k = tape.matmul(x, attn.id("wk"))?;
        let v = tape.matmul(x, attn.id("wv"))?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let scaled = tape.scale(logits, inv_sqrt_d)?;
        let a = tape.softmax(scaled, 1)?;
        let o = tape.matmul(a, v)?;
        let mixed = tape.matmul(o, attn.id("wo"))?;
        x = tape.add(x, mixed)?;
        // Residual MLP.
        let h = linear_forward(tape, &layer.sub("mlp1"), x, true)?;
        let h = tape.silu(h)?;
        let h = linear_forward(tape, &layer.sub("mlp2"), h, true)?;
        x = tape.add(x, h)?;
    }
    Ok(x)
}

/// Word-drop intervention: every caption-word row of an encoded context is
/// replaced by the first padding row, leaving the start and padding rows
/// untouched. The result conditions a sample on prompt *shape* alone —
/// the probe for how much layout information the special tokens carry.
pub fn substitute_word_embeddings(context: &Tensor, prompt: &TokenizedPrompt) -> Result<Tensor> {
    let shape = context.shape();
    if shape.len() != 2 || shape[0] != prompt.ids.len() {
        return Err(Error::invalid(format!(
            "context shape {shape:?} does not match a {}-position prompt",
            prompt.ids.len()
        )));
    }
    if prompt.eot_span.is_empty() {
        return Err(Error::invalid(
            "prompt has no padding positions to substitute from",
        ));
    }
    let dim = shape[1];
    let pad_row = prompt.eot_span.start * dim..(prompt.eot_span.start + 1) * dim;
    let pad = context.data()[pad_row].to_vec();
    let mut data = context.data().to_vec();
    for pos in prompt.word_span.clone() {
        data[pos * dim..(pos + 1) * dim].copy_from_slice(&pad);
    }
    Tensor::new(shape.to_vec(), data)
}
