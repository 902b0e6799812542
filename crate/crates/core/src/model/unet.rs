//! Miniature U-Net denoiser.
//!
//! Three resolutions (32 -> 16 -> 8 pixels) with one
//! ResBlock -> Self-Attention -> Cross-Attention group per level on both
//! branches plus one in the middle, for seven cross-attention layers in
//! total. Each cross-attention layer has a stable [`LayerId`]; its pixel ->
//! token attention map can be recorded (the map's tape node is returned for
//! every call) and replaced mid-forward through an [`AttnHook`], which is
//! how the forward layout-guidance mode injects biased maps. Interventions
//! are only legal on no-grad tapes: a replaced map would silently detach
//! the gradient graph, so gradient-mode passes reject hooks.
//!
//! The epsilon head is zero-initialized: an untrained denoiser predicts
//! exactly zero noise, which keeps early training well-conditioned.

use super::{bind, join, linear_forward, AttnProj, Bound, Conv3, Linear, Module, Norm, Scope};
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    /// Image channels (RGB).
    pub in_channels: usize,
    /// Square image side at full resolution.
    pub size: usize,
    /// Channel widths at the three resolutions, finest first.
    pub channels: [usize; 3],
    /// Group-norm group count (must divide every channel width in use).
    pub groups: usize,
    /// Self-attention inner widths per resolution, finest first.
    pub sa_dims: [usize; 3],
    /// Cross-attention inner width.
    pub ca_dim: usize,
    /// Text-context width M (columns of the encoder output).
    pub text_dim: usize,
    /// Prompt positions N (rows of the encoder output).
    pub n_tokens: usize,
    /// Sinusoidal time-feature width.
    pub temb_sin: usize,
    /// Time-embedding MLP width.
    pub temb_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 3,
            size: 32,
            channels: [8, 16, 32],
            groups: 4,
            sa_dims: [4, 8, 16],
            ca_dim: 16,
            text_dim: 32,
            n_tokens: crate::text::MAX_TOKENS,
            temb_sin: 32,
            temb_dim: 64,
        }
    }
}

/// Stable identifiers of the seven cross-attention layers, in forward
/// execution order. Serialized as their names ("down-1" .. "up-3") in
/// configs and dump filenames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Down1,
    Down2,
    Down3,
    Mid1,
    Up1,
    Up2,
    Up3,
}

impl LayerId {
    pub const ALL: [LayerId; 7] = [
        LayerId::Down1,
        LayerId::Down2,
        LayerId::Down3,
        LayerId::Mid1,
        LayerId::Up1,
        LayerId::Up2,
        LayerId::Up3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerId::Down1 => "down-1",
            LayerId::Down2 => "down-2",
            LayerId::Down3 => "down-3",
            LayerId::Mid1 => "mid-1",
            LayerId::Up1 => "up-1",
            LayerId::Up2 => "up-2",
            LayerId::Up3 => "up-3",
        }
    }

    pub fn parse(s: &str) -> Result<LayerId> {
        LayerId::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown attention layer {s:?} (expected one of down-1, down-2, down-3, \
                     mid-1, up-1, up-2, up-3)"
                ))
            })
    }

    /// Side length of this layer's query grid.
    pub fn grid_side(self, cfg: &UNetConfig) -> usize {
        match self {
            LayerId::Down1 | LayerId::Up3 => cfg.size,
            LayerId::Down2 | LayerId::Up2 => cfg.size / 2,
            LayerId::Down3 | LayerId::Mid1 | LayerId::Up1 => cfg.size / 4,
        }
    }

    /// Resolution level index (0 = finest), used to pick widths.
    fn level(self) -> usize {
        match self {
            LayerId::Down1 | LayerId::Up3 => 0,
            LayerId::Down2 | LayerId::Up2 => 1,
            LayerId::Down3 | LayerId::Mid1 | LayerId::Up1 => 2,
        }
    }
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        LayerId::parse(&s).map_err(serde::de::Error::custom)
    }
}

// ── parameter structs ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ResBlockParams {
    pub gn1: Norm,
    pub conv1: Conv3,
    pub temb: Linear,
    pub gn2: Norm,
    pub conv2: Conv3,
    /// `(c_out, c_in)` 1x1 projection of the residual path when widths
    /// differ, applied as a matmul over flattened pixels.
    pub skip: Option<Tensor>,
}

impl ResBlockParams {
    fn init<R: Rng>(c_in: usize, c_out: usize, temb_dim: usize, rng: &mut R) -> Self {
        ResBlockParams {
            gn1: Norm::new(c_in),
            conv1: Conv3::new(c_in, c_out, rng),
            temb: Linear::new(temb_dim, c_out, true, rng),
            gn2: Norm::new(c_out),
            conv2: Conv3::new(c_out, c_out, rng),
            skip: (c_in != c_out).then(|| {
                Tensor::randn_scaled(vec![c_out, c_in], 1.0 / (c_in as f64).sqrt(), rng)
            }),
        }
    }
}

impl Module for ResBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.gn1.visit(&join(prefix, "gn1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.temb.visit(&join(prefix, "temb"), f);
        self.gn2.visit(&join(prefix, "gn2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            f(&join(prefix, "skip"), s);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gn1.visit_mut(&join(prefix, "gn1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.temb.visit_mut(&join(prefix, "temb"), f);
        self.gn2.visit_mut(&join(prefix, "gn2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            f(&join(prefix, "skip"), s);
        }
    }
}

/// The Self-Attention -> Cross-Attention pair that follows each ResBlock.
#[derive(Debug, Clone)]
pub struct AttnPair {
    pub sa_norm: Norm,
    pub sa: AttnProj,
    pub ca_norm: Norm,
    pub ca: AttnProj,
}

impl AttnPair {
    fn init<R: Rng>(c: usize, sa_dim: usize, cfg: &UNetConfig, rng: &mut R) -> Self {
        AttnPair {
            sa_norm: Norm::new(c),
            sa: AttnProj::new(c, c, sa_dim, c, rng),
            ca_norm: Norm::new(c),
            ca: AttnProj::new(c, cfg.text_dim, cfg.ca_dim, c, rng),
        }
    }
}

impl Module for AttnPair {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.sa_norm.visit(&join(prefix, "sa_norm"), f);
        self.sa.visit(&join(prefix, "sa"), f);
        self.ca_norm.visit(&join(prefix, "ca_norm"), f);
        self.ca.visit(&join(prefix, "ca"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.sa_norm.visit_mut(&join(prefix, "sa_norm"), f);
        self.sa.visit_mut(&join(prefix, "sa"), f);
        self.ca_norm.visit_mut(&join(prefix, "ca_norm"), f);
        self.ca.visit_mut(&join(prefix, "ca"), f);
    }
}

#[derive(Debug, Clone)]
pub struct LevelBlock {
    pub res: ResBlockParams,
    pub attn: AttnPair,
}

impl Module for LevelBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.res.visit(&join(prefix, "res"), f);
        self.attn.visit(&join(prefix, "attn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.res.visit_mut(&join(prefix, "res"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
    }
}

#[derive(Debug, Clone)]
pub struct UNetParams {
    pub temb1: Linear,
    pub temb2: Linear,
    pub stem: Conv3,
    pub down: Vec<LevelBlock>,
    pub mid: LevelBlock,
    pub mid_res2: ResBlockParams,
    pub up: Vec<LevelBlock>,
    pub head_norm: Norm,
    pub head_conv: Conv3,
}

impl UNetParams {
    pub fn init<R: Rng>(cfg: &UNetConfig, rng: &mut R) -> Self {
        let [c1, c2, c3] = cfg.channels;
        let t = cfg.temb_dim;
        let down_io = [(c1, c1), (c1, c2), (c2, c3)];
        let down = down_io
            .iter()
            .enumerate()
            .map(|(lvl, &(ci, co))| LevelBlock {
                res: ResBlockParams::init(ci, co, t, rng),
                attn: AttnPair::init(co, cfg.sa_dims[lvl], cfg, rng),
            })
            .collect();
        let mid = LevelBlock {
            res: ResBlockParams::init(c3, c3, t, rng),
            attn: AttnPair::init(c3, cfg.sa_dims[2], cfg, rng),
        };
        let mid_res2 = ResBlockParams::init(c3, c3, t, rng);
        // Up blocks consume the upsampled stream concatenated with the skip
        // from the matching down block.
        let up_io = [(c3 + c3, c3), (c3 + c2, c2), (c2 + c1, c1)];
        let up_sa = [cfg.sa_dims[2], cfg.sa_dims[1], cfg.sa_dims[0]];
        let up = up_io
            .iter()
            .zip(up_sa)
            .map(|(&(ci, co), sa)| LevelBlock {
                res: ResBlockParams::init(ci, co, t, rng),
                attn: AttnPair::init(co, sa, cfg, rng),
            })
            .collect();
        UNetParams {
            temb1: Linear::new(cfg.temb_sin, t, true, rng),
            temb2: Linear::new(t, t, true, rng),
            stem: Conv3::new(cfg.in_channels, c1, rng),
            down,
            mid,
            mid_res2,
            up,
            head_norm: Norm::new(c1),
            head_conv: Conv3::zeroed(c1, cfg.in_channels),
        }
    }
}

impl Module for UNetParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.temb1.visit(&join(prefix, "temb1"), f);
        self.temb2.visit(&join(prefix, "temb2"), f);
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.down.iter().enumerate() {
            b.visit(&join(prefix, &format!("down{i}")), f);
        }
        self.mid.visit(&join(prefix, "mid"), f);
        self.mid_res2.visit(&join(prefix, "mid_res2"), f);
        for (i, b) in self.up.iter().enumerate() {
            b.visit(&join(prefix, &format!("up{i}")), f);
        }
        self.head_norm.visit(&join(prefix, "head_norm"), f);
        self.head_conv.visit(&join(prefix, "head_conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.temb1.visit_mut(&join(prefix, "temb1"), f);
        self.temb2.visit_mut(&join(prefix, "temb2"), f);
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.down.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("down{i}")), f);
        }
        self.mid.visit_mut(&join(prefix, "mid"), f);
        self.mid_res2.visit_mut(&join(prefix, "mid_res2"), f);
        for (i, b) in self.up.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("up{i}")), f);
        }
        self.head_norm.visit_mut(&join(prefix, "head_norm"), f);
        self.head_conv.visit_mut(&join(prefix, "head_conv"), f);
    }
}

// ── forward pass ─────────────────────────────────────────────────────────────

/// Attention intervention: called with each cross-attention layer's id and
/// its freshly computed `(pixels, tokens)` map; returning `Some` substitutes
/// the map before values are aggregated. Only legal on no-grad tapes.
pub type AttnHook<'a> = dyn Fn(LayerId, &Tensor) -> Result<Option<Tensor>> + 'a;

/// Result of one denoiser evaluation.
#[derive(Debug)]
pub struct DenoiseOutput {
    /// Predicted noise, shaped like the input latent.
    pub eps: NodeId,
    /// Cross-attention maps in execution order, one `(pixels, tokens)` node
    /// per layer; after any intervention, i.e. the maps actually used.
    pub attn: Vec<(LayerId, NodeId)>,
}

/// Sinusoidal features for a (possibly fractional) timestep.
pub fn time_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for k in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (-(10_000.0f64).ln() * k as f64 / denom).exp();
        data[k] = (t * freq).sin();
        data[half + k] = (t * freq).cos();
    }
    Tensor::new(vec![1, dim], data).expect("static shape")
}

fn add_channel_bias(tape: &mut Tape, x: NodeId, v: NodeId) -> Result<NodeId> {
    let s = tape.shape_of(x).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let x2 = tape.reshape(x, vec![c, h * w])?;
    let col = tape.reshape(v, vec![c, 1])?;
    let ones = tape.leaf(Tensor::ones(vec![1, h * w]));
    let tiled = tape.matmul(col, ones)?;
    let sum = tape.add(x2, tiled)?;
    tape.reshape(sum, vec![c, h, w])
}

fn resblock(
    tape: &mut Tape,
    scope: &Scope,
    cfg: &UNetConfig,
    x: NodeId,
    temb: NodeId,
    has_skip: bool,
) -> Result<NodeId> {
    let s = tape.shape_of(x).to_vec();
    let (c_in, hh, ww) = (s[0], s[1], s[2]);
    let h = tape.group_norm(x, scope.id("gn1.gamma"), scope.id("gn1.beta"), cfg.groups, 1e-5)?;
    let h = tape.silu(h)?;
    let h = tape.conv3x3(h, scope.id("conv1.w"), Some(scope.id("conv1.b")))?;
    let c_out = tape.shape_of(h)[0];
    let tproj = linear_forward(tape, &scope.sub("temb"), temb, true)?;
    let trow = tape.reshape(tproj, vec![c_out])?;
    let h = add_channel_bias(tape, h, trow)?;
    let h = tape.group_norm(h, scope.id("gn2.gamma"), scope.id("gn2.beta"), cfg.groups, 1e-5)?;
    let h = tape.silu(h)?;
    let h = tape.conv3x3(h, scope.id("conv2.w"), Some(scope.id("conv2.b")))?;
    let res = if has_skip {
        let x2 = tape.reshape(x, vec![c_in, hh * ww])?;
        let proj = tape.matmul(scope.id("skip"), x2)?;
        tape.reshape(proj, vec![c_out, hh, ww])?
    } else {
        x
    };
    tape.add(h, res)
}

fn self_attention(
    tape: &mut Tape,
    scope: &Scope,
    cfg: &UNetConfig,
    x: NodeId,
    inner: usize,
) -> Result<NodeId> {
    let s = tape.shape_of(x).to_vec();
    let (c, hh, ww) = (s[0], s[1], s[2]);
    let n = hh * ww;
    let h = tape.group_norm(
        x,
        scope.id("sa_norm.gamma"),
        scope.id("sa_norm.beta"),
        cfg.groups,
        1e-5,
    )?;
    let h2 = tape.reshape(h, vec![c, n])?;
    let xt = tape.transpose(h2)?;
    let attn = scope.sub("sa");
    let q = tape.matmul(xt, attn.id("wq"))?;
    // Scaling the queries is cheaper than scaling the (pixels, pixels)
    // logit matrix and yields the same attention.
    let q = tape.scale(q, 1.0 / (inner as f64).sqrt())?;
    let k = tape.matmul(xt, attn.id("wk"))?;
    let v = tape.matmul(xt, attn.id("wv"))?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let a = tape.softmax(logits, 1)?;
    let o = tape.matmul(a, v)?;
    let out = tape.matmul(o, attn.id("wo"))?;
    let ot = tape.transpose(out)?;
    let o3 = tape.reshape(ot, vec![c, hh, ww])?;
    tape.add(x, o3)
}

#[allow(clippy::too_many_arguments)]
fn cross_attention(
    tape: &mut Tape,
    scope: &Scope,
    cfg: &UNetConfig,
    x: NodeId,
    context: NodeId,
    layer: LayerId,
    hook: Option<&AttnHook>,
    records: &mut Vec<(LayerId, NodeId)>,
) -> Result<NodeId> {
    let s = tape.shape_of(x).to_vec();
    let (c, hh, ww) = (s[0], s[1], s[2]);
    let n = hh * ww;
    let h = tape.group_norm(
        x,
        scope.id("ca_norm.gamma"),
        scope.id("ca_norm.beta"),
        cfg.groups,
        1e-5,
    )?;
    let h2 = tape.reshape(h, vec![c, n])?;
    let xt = tape.transpose(h2)?;
    let attn = scope.sub("ca");
    let q = tape.matmul(xt, attn.id("wq"))?;
    let q = tape.scale(q, 1.0 / (cfg.ca_dim as f64).sqrt())?;
    let k = tape.matmul(context, attn.id("wk"))?;
    let v = tape.matmul(context, attn.id("wv"))?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut a = tape.softmax(logits, 1)?;
    if let Some(hook) = hook {
        if let Some(replacement) = hook(layer, tape.value(a))? {
            if tape.grad_enabled() {
                return Err(Error::invalid(
                    "attention interventions require a no-grad tape; a replaced map would \
                     detach the gradient graph",
                ));
            }
            if replacement.shape() != tape.shape_of(a) {
                return Err(Error::ShapeMismatch {
                    op: "attention intervention",
                    lhs: tape.shape_of(a).to_vec(),
                    rhs: replacement.shape().to_vec(),
                });
            }
            if !replacement.all_finite() {
                return Err(Error::NonFinite {
                    op: "attention intervention",
                });
            }
            a = tape.leaf(replacement);
        }
    }
    records.push((layer, a));
    let o = tape.matmul(a, v)?;
    let out = tape.matmul(o, attn.id("wo"))?;
    let ot = tape.transpose(out)?;
    let o3 = tape.reshape(ot, vec![c, hh, ww])?;
    tape.add(x, o3)
}

fn level(
    tape: &mut Tape,
    scope: &Scope,
    cfg: &UNetConfig,
    x: NodeId,
    temb: NodeId,
    context: NodeId,
    layer: LayerId,
    has_skip: bool,
    hook: Option<&AttnHook>,
    records: &mut Vec<(LayerId, NodeId)>,
) -> Result<NodeId> {
    let h = resblock(tape, &scope.sub("res"), cfg, x, temb, has_skip)?;
    let h = self_attention(
        tape,
        &scope.sub("attn"),
        cfg,
        h,
        cfg.sa_dims[layer.level()],
    )?;
    cross_attention(
        tape,
        &scope.sub("attn"),
        cfg,
        h,
        context,
        layer,
        hook,
        records,
    )
}

/// One denoiser evaluation on a bound model (parameter prefix `"unet"`).
///
/// `z` is the noisy latent `(in_channels, size, size)`, `t` the discrete
/// timestep, `context` the `(n_tokens, text_dim)` encoder output.
pub fn denoise(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &UNetConfig,
    z: NodeId,
    t: usize,
    context: NodeId,
    hook: Option<&AttnHook>,
) -> Result<DenoiseOutput> {
    denoise_scoped(tape, &Scope::new(bound, "unet"), cfg, z, t, context, hook)
}

/// As [`denoise`], for a binding of [`UNetParams`] alone (empty prefix).
pub fn denoise_with_params(
    tape: &mut Tape,
    params: &UNetParams,
    cfg: &UNetConfig,
    z: NodeId,
    t: usize,
    context: NodeId,
    trainable: bool,
    hook: Option<&AttnHook>,
) -> Result<DenoiseOutput> {
    let bound = bind(tape, params, trainable);
    denoise_scoped(tape, &Scope::new(&bound, ""), cfg, z, t, context, hook)
}

pub(crate) fn denoise_scoped(
    tape: &mut Tape,
    scope: &Scope,
    cfg: &UNetConfig,
    z: NodeId,
    t: usize,
    context: NodeId,
    hook: Option<&AttnHook>,
) -> Result<DenoiseOutput> {
    let zs = tape.shape_of(z);
    if zs != [cfg.in_channels, cfg.size, cfg.size] {
        return Err(Error::InvalidShape {
            op: "denoise",
            shape: zs.to_vec(),
            msg: format!(
                "latent must be ({}, {}, {})",
                cfg.in_channels, cfg.size, cfg.size
            ),
        });
    }
    let cs = tape.shape_of(context);
    if cs != [cfg.n_tokens, cfg.text_dim] {
        return Err(Error::InvalidShape {
            op: "denoise",
            shape: cs.to_vec(),
            msg: format!("context must be ({}, {})", cfg.n_tokens, cfg.text_dim),
        });
    }

    let mut records = Vec::with_capacity(7);
    // Time embedding.
    let sin = tape.leaf(time_features(t as f64, cfg.temb_sin));
    let te = linear_forward(tape, &scope.sub("temb1"), sin, true)?;
    let te = tape.silu(te)?;
    let temb = linear_forward(tape, &scope.sub("temb2"), te, true)?;

    // Down branch, keeping skips at each resolution.
    let h = tape.conv3x3(z, scope.id("stem.w"), Some(scope.id("stem.b")))?;
    let [c1, c2, _] = cfg.channels;
    let d1 = level(
        tape, &scope.sub("down0"), cfg, h, temb, context, LayerId::Down1, false, hook,
        &mut records,
    )?;
    let p1 = tape.avgpool2x(d1)?;
    let d2 = level(
        tape, &scope.sub("down1"), cfg, p1, temb, context, LayerId::Down2, c1 != c2, hook,
        &mut records,
    )?;
    let p2 = tape.avgpool2x(d2)?;
    let d3 = level(
        tape, &scope.sub("down2"), cfg, p2, temb, context, LayerId::Down3, c2 != cfg.channels[2],
        hook, &mut records,
    )?;

    // Middle.
    let m = level(
        tape, &scope.sub("mid"), cfg, d3, temb, context, LayerId::Mid1, false, hook, &mut records,
    )?;
    let m = resblock(tape, &scope.sub("mid_res2"), cfg, m, temb, false)?;

    // Up branch with skip concatenation (channel axis is axis 0).
    let u1in = tape.concat(&[m, d3])?;
    let u1 = level(
        tape, &scope.sub("up0"), cfg, u1in, temb, context, LayerId::Up1, true, hook, &mut records,
    )?;
    let u1 = tape.upsample2x(u1)?;
    let u2in = tape.concat(&[u1, d2])?;
    let u2 = level(
        tape, &scope.sub("up1"), cfg, u2in, temb, context, LayerId::Up2, true, hook, &mut records,
    )?;
    let u2 = tape.upsample2x(u2)?;
    let u3in = tape.concat(&[u2, d1])?;
    let u3 = level(
        tape, &scope.sub("up2"), cfg, u3in, temb, context, LayerId::Up3, true, hook, &mut records,
    )?;

    // Epsilon head.
    let out = tape.group_norm(
        u3,
        scope.id("head_norm.gamma"),
        scope.id("head_norm.beta"),
        cfg.groups,
        1e-5,
    )?;
    let out = tape.silu(out)?;
    let eps = tape.conv3x3(out, scope.id("head_conv.w"), Some(scope.id("head_conv.b")))?;
    Ok(DenoiseOutput {
        eps,
        attn: records,
    })
}

/// Kept as a named export for clarity at call sites that only inspect maps.
pub type AttentionQuery = (LayerId, NodeId);
