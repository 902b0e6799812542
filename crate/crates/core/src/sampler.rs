//! Deterministic reverse-diffusion sampling with classifier-free guidance
//! and layout-guidance hook points.
//!
//! Each inference step makes two denoiser evaluations — one on the empty
//! caption, one on the prompt — and combines their noise predictions with
//! [`cfg_combine`]. Layout control plugs in through [`GuidanceHooks`]:
//! `adjust_latent` runs before the evaluations and may replace the latent
//! (energy-gradient updates), `bias_attention` runs inside the prompt
//! branch's cross-attention layers and may replace individual maps. The
//! whole walk is a pure function of (seed, prompt, weights, config), which
//! the tests pin down bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    bind, denoise, encode, EmbeddingOverride, LayerId, ModelConfig, ModelParams,
};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor};
use crate::text::TokenizedPrompt;

/// Default inference step count.
pub const DEFAULT_STEPS: usize = 50;
/// Default classifier-free guidance weight.
pub const DEFAULT_CFG_SCALE: f64 = 7.5;

/// Knobs of the deterministic sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Inference steps (≤ the schedule's training steps).
    pub steps: usize,
    /// Classifier-free guidance weight w.
    pub cfg_scale: f64,
    /// Seed for the initial latent.
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: DEFAULT_STEPS,
            cfg_scale: DEFAULT_CFG_SCALE,
            seed: 0,
        }
    }
}

/// A learned embedding standing in for one prompt position, as plain data;
/// each denoiser/encoder evaluation re-pushes it onto its own tape.
#[derive(Debug, Clone)]
pub struct ConceptSlot {
    /// Prompt position whose embedding row is replaced.
    pub position: usize,
    /// `(dim,)` replacement vector.
    pub vector: Tensor,
}

/// Everything a sample run reads but never writes.
#[derive(Clone, Copy)]
pub struct SampleInputs<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
    pub prompt: &'a TokenizedPrompt,
    /// Embedding substitutions for concept tokens (usually empty).
    pub concepts: &'a [ConceptSlot],
}

/// Per-step facts handed to guidance hooks.
pub struct StepView<'a> {
    /// Step index within this run, 0-based.
    pub index: usize,
    /// Total steps in this run.
    pub steps: usize,
    /// Discrete timestep being denoised.
    pub timestep: usize,
    /// Timestep the update lands on (0 for the final step).
    pub prev_timestep: usize,
    /// σ at `timestep`.
    pub sigma: f64,
    pub inputs: &'a SampleInputs<'a>,
    /// Encoder output for the prompt branch, `(n_tokens, text_dim)`.
    pub cond_context: &'a Tensor,
    pub schedule: &'a NoiseSchedule,
}

/// Layout-guidance entry points; see the module docs for where each runs.
pub trait GuidanceHooks {
    /// May replace the latent before this step's denoiser evaluations.
    fn adjust_latent(&mut self, step: &StepView, z: &Tensor) -> Result<Option<Tensor>>;

    /// May replace a cross-attention map in the prompt branch.
    fn bias_attention(
        &self,
        step: &StepView,
        layer: LayerId,
        attn: &Tensor,
    ) -> Result<Option<Tensor>>;
}

/// One recorded cross-attention map.
#[derive(Debug, Clone)]
pub struct AttnRecord {
    pub step_index: usize,
    pub timestep: usize,
    pub layer: LayerId,
    /// `(pixels, tokens)` rows summing to one; the map actually used, i.e.
    /// after any forward-guidance intervention.
    pub map: Tensor,
}

/// Result of a full sampling run.
#[derive(Debug)]
pub struct SampleOutput {
    /// Final latent, `(channels, size, size)`, nominally in [-1, 1].
    pub latent: Tensor,
    /// The latent clamped and quantized to 8-bit RGB.
    pub image: image::RgbImage,
    /// Prompt-branch attention maps, one per (step, layer).
    pub attention: Vec<AttnRecord>,
}

/// ε̂ = ε_uncond + w·(ε_cond − ε_uncond).
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            lhs: eps_uncond.shape().to_vec(),
            rhs: eps_cond.shape().to_vec(),
        });
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| u + w * (c - u))
        .collect();
    Tensor::new(eps_uncond.shape().to_vec(), data)
}

/// Descending inference timesteps: step i denoises t_i = round(T·(n−i)/n),
/// so the walk starts at T itself and the final update lands on t = 0.
pub fn ddim_timesteps(t_train: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    if steps > t_train {
        return Err(Error::invalid(format!(
            "{steps} inference steps exceed the schedule's {t_train} training steps"
        )));
    }
    let ts: Vec<usize> = (0..steps)
        .map(|i| (t_train as f64 * (steps - i) as f64 / steps as f64).round() as usize)
        .collect();
    debug_assert!(ts.windows(2).all(|w| w[0] > w[1]) && ts[0] == t_train);
    Ok(ts)
}

/// One deterministic reverse update from ᾱ_t to ᾱ_prev given predicted noise.
pub fn ddim_step(z: &Tensor, eps: &Tensor, alpha_bar: f64, alpha_bar_prev: f64) -> Result<Tensor> {
    if z.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "ddim_step",
            lhs: z.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let cs = alpha_bar.sqrt();
    let cn = (1.0 - alpha_bar).sqrt();
    let ps = alpha_bar_prev.sqrt();
    let pn = (1.0 - alpha_bar_prev).sqrt();
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&zt, &e)| {
            let z0 = (zt - cn * e) / cs;
            ps * z0 + pn * e
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// Encodes a prompt to a plain `(n_tokens, text_dim)` tensor on a throwaway
/// tape, substituting any concept embeddings.
pub fn encode_prompt(
    params: &ModelParams,
    config: &ModelConfig,
    prompt: &TokenizedPrompt,
    concepts: &[ConceptSlot],
) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let bound = bind(&mut tape, params, false);
    let overrides: Vec<EmbeddingOverride> = concepts
        .iter()
        .map(|c| {
            Ok(EmbeddingOverride {
                position: c.position,
                vector: tape.leaf(c.vector.clone()),
            })
        })
        .collect::<Result<_>>()?;
    let ctx = encode(&mut tape, &bound, &config.encoder, prompt, &overrides)?;
    Ok(tape.value(ctx).clone())
}

/// One denoiser evaluation on a throwaway tape: returns the predicted noise
/// and the per-layer attention maps as plain tensors.
pub fn eval_denoiser(
    params: &ModelParams,
    config: &ModelConfig,
    z: &Tensor,
    context: &Tensor,
    t: usize,
    hook: Option<&crate::model::AttnHook>,
) -> Result<(Tensor, Vec<(LayerId, Tensor)>)> {
    let mut tape = Tape::no_grad();
    let bound = bind(&mut tape, params, false);
    let z_node = tape.leaf(z.clone());
    let ctx_node = tape.leaf(context.clone());
    let out = denoise(&mut tape, &bound, &config.unet, z_node, t, ctx_node, hook)?;
    let eps = tape.value(out.eps).clone();
    let attn = out
        .attn
        .into_iter()
        .map(|(layer, node)| (layer, tape.value(node).clone()))
        .collect();
    Ok((eps, attn))
}

/// Clamps a `(3, h, w)` latent to [-1, 1] and quantizes to 8-bit RGB.
pub fn latent_to_rgb8(latent: &Tensor) -> Result<image::RgbImage> {
    let shape = latent.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidShape {
            op: "latent_to_rgb8",
            shape: shape.to_vec(),
            msg: "expected (3, height, width)".into(),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = latent.at3(c, y, x).clamp(-1.0, 1.0);
                ((v + 1.0) / 2.0 * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// Runs the full reverse walk. `hooks` carries layout guidance when present;
/// `None` is a plain classifier-free-guided sample.
pub fn sample(
    inputs: &SampleInputs,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    hooks: Option<&mut dyn GuidanceHooks>,
) -> Result<SampleOutput> {
    let cond_ctx = encode_prompt(inputs.params, inputs.config, inputs.prompt, inputs.concepts)?;
    sample_with_context(inputs, &cond_ctx, schedule, cfg, hooks)
}

/// Like [`sample`] but with a caller-supplied conditional context — the
/// seam for conditioning interventions (e.g. the word-drop substitution)
/// that need to alter the encoded prompt before the walk.
pub fn sample_with_context(
    inputs: &SampleInputs,
    cond_ctx: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    mut hooks: Option<&mut dyn GuidanceHooks>,
) -> Result<SampleOutput> {
    if cfg.cfg_scale < 0.0 {
        return Err(Error::invalid(format!(
            "cfg_scale must be nonnegative, got {}",
            cfg.cfg_scale
        )));
    }
    let timesteps = ddim_timesteps(schedule.t_train(), cfg.steps)?;

    let uncond_ctx = encode_prompt(
        inputs.params,
        inputs.config,
        &TokenizedPrompt::empty(),
        &[],
    )?;

    let unet = &inputs.config.unet;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = NoiseSchedule::draw_noise(vec![unet.in_channels, unet.size, unet.size], &mut rng);

    let mut attention = Vec::with_capacity(cfg.steps * LayerId::ALL.len());
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let view = StepView {
            index: i,
            steps: cfg.steps,
            timestep: t,
            prev_timestep: t_prev,
            sigma: schedule.sigma(t)?,
            inputs,
            cond_context: cond_ctx,
            schedule,
        };

        if let Some(h) = hooks.as_deref_mut() {
            if let Some(adjusted) = h.adjust_latent(&view, &z)? {
                if adjusted.shape() != z.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adjust_latent",
                        lhs: adjusted.shape().to_vec(),
                        rhs: z.shape().to_vec(),
                    });
                }
                z = adjusted;
            }
        }
        if !z.all_finite() {
            return Err(Error::invalid(format!(
                "non-finite latent entering step {i} (t = {t})"
            )));
        }

        let (eps_u, _) = eval_denoiser(inputs.params, inputs.config, &z, &uncond_ctx, t, None)?;
        let (eps_c, maps) = match hooks.as_deref() {
            Some(h) => {
                let bias =
                    |layer: LayerId, attn: &Tensor| h.bias_attention(&view, layer, attn);
                eval_denoiser(inputs.params, inputs.config, &z, cond_ctx, t, Some(&bias))?
            }
            None => eval_denoiser(inputs.params, inputs.config, &z, cond_ctx, t, None)?,
        };
        for (layer, map) in maps {
            attention.push(AttnRecord {
                step_index: i,
                timestep: t,
                layer,
                map,
            });
        }

        let eps_hat = cfg_combine(&eps_u, &eps_c, cfg.cfg_scale)?;
        z = ddim_step(&z, &eps_hat, schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?)?;
        if !z.all_finite() {
            return Err(Error::invalid(format!(
                "non-finite latent after step {i} (t = {t})"
            )));
        }
    }

    let image = latent_to_rgb8(&z)?;
    Ok(SampleOutput {
        latent: z,
        image,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;
    use std::cell::Cell;

    fn test_setup() -> (ModelParams, ModelConfig, TokenizedPrompt) {
        let config = ModelConfig::default();
        let params = ModelParams::init(&config, 11);
        let vocab = Vocabulary::core();
        let prompt = vocab.tokenize("a red square").unwrap();
        (params, config, prompt)
    }

    #[test]
    fn cfg_combine_endpoints() {
        let u = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = Tensor::new(vec![3], vec![2.0, 2.0, 0.0]).unwrap();
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap().data(), u.data());
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap().data(), c.data());
        assert_eq!(cfg_combine(&u, &u, 7.5).unwrap().data(), u.data());

        let zero = Tensor::zeros(vec![1]);
        let one = Tensor::ones(vec![1]);
        assert_eq!(cfg_combine(&zero, &one, 7.5).unwrap().data(), &[7.5]);

        let bad = Tensor::zeros(vec![2]);
        assert!(cfg_combine(&zero, &bad, 1.0).is_err());
    }

    #[test]
    fn timesteps_descend_from_t_train() {
        let ts = ddim_timesteps(500, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 500);
        assert_eq!(ts[1], 490);
        assert_eq!(ts[49], 10);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));

        let ts = ddim_timesteps(500, 500).unwrap();
        assert_eq!(ts[0], 500);
        assert_eq!(ts[499], 1);

        assert!(ddim_timesteps(500, 0).is_err());
        assert!(ddim_timesteps(500, 501).is_err());
    }

    #[test]
    fn ddim_step_matches_hand_formula() {
        let z = Tensor::new(vec![2], vec![0.8, -0.3]).unwrap();
        let eps = Tensor::new(vec![2], vec![0.5, 0.1]).unwrap();
        let (a, ap) = (0.25, 0.64);
        let out = ddim_step(&z, &eps, a, ap).unwrap();
        for i in 0..2 {
            let z0 = (z.data()[i] - (1.0f64 - a).sqrt() * eps.data()[i]) / a.sqrt();
            let want = ap.sqrt() * z0 + (1.0f64 - ap).sqrt() * eps.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-15);
        }

        // Landing on alpha_bar = 1 recovers the predicted clean signal.
        let out = ddim_step(&z, &eps, 0.25, 1.0).unwrap();
        for i in 0..2 {
            let z0 = (z.data()[i] - 0.75f64.sqrt() * eps.data()[i]) / 0.5;
            assert!((out.data()[i] - z0).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_quantization_clamps_and_scales() {
        let mut data = vec![0.0; 3 * 2 * 2];
        data[0] = -2.0; // clamped to -1 -> 0
        data[1] = -1.0; // -> 0
        data[2] = 1.0; // -> 255
        data[3] = 2.0; // clamped -> 255
        let latent = Tensor::new(vec![3, 2, 2], data).unwrap();
        let img = latent_to_rgb8(&latent).unwrap();
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(1, 0).0[0], 0);
        assert_eq!(img.get_pixel(0, 1).0[0], 255);
        assert_eq!(img.get_pixel(1, 1).0[0], 255);
        // Channels beyond the first were zeros -> midpoint gray.
        assert_eq!(img.get_pixel(0, 0).0[1], 128);

        assert!(latent_to_rgb8(&Tensor::zeros(vec![1, 2, 2])).is_err());
    }

    #[test]
    fn sampling_is_bit_deterministic() {
        let (params, config, prompt) = test_setup();
        let inputs = SampleInputs {
            params: &params,
            config: &config,
            prompt: &prompt,
            concepts: &[],
        };
        let schedule = NoiseSchedule::default_schedule();
        let cfg = SamplerConfig {
            steps: 3,
            seed: 42,
            ..SamplerConfig::default()
        };
        let a = sample(&inputs, &schedule, &cfg, None).unwrap();
        let b = sample(&inputs, &schedule, &cfg, None).unwrap();
        assert_eq!(a.latent.data(), b.latent.data());
        assert_eq!(a.image.as_raw(), b.image.as_raw());

        // A different seed changes the walk.
        let cfg2 = SamplerConfig { seed: 43, ..cfg };
        let c = sample(&inputs, &schedule, &cfg2, None).unwrap();
        assert_ne!(a.latent.data(), c.latent.data());
    }

    #[test]
    fn attention_history_covers_every_step_and_layer() {
        let (params, config, prompt) = test_setup();
        let inputs = SampleInputs {
            params: &params,
            config: &config,
            prompt: &prompt,
            concepts: &[],
        };
        let schedule = NoiseSchedule::default_schedule();
        let cfg = SamplerConfig {
            steps: 3,
            seed: 1,
            ..SamplerConfig::default()
        };
        let out = sample(&inputs, &schedule, &cfg, None).unwrap();
        assert_eq!(out.attention.len(), 3 * LayerId::ALL.len());
        for (i, chunk) in out.attention.chunks(LayerId::ALL.len()).enumerate() {
            for (record, layer) in chunk.iter().zip(LayerId::ALL) {
                assert_eq!(record.step_index, i);
                assert_eq!(record.layer, layer);
                let cells = record.map.shape()[0];
                assert_eq!(record.map.shape(), [cells, config.unet.n_tokens]);
            }
        }
    }

    /// Counts hook invocations and replaces one layer's maps with uniform.
    struct CountingHooks {
        latent_calls: usize,
        bias_calls: Cell<usize>,
        timesteps_seen: Vec<usize>,
    }

    impl GuidanceHooks for CountingHooks {
        fn adjust_latent(&mut self, step: &StepView, z: &Tensor) -> Result<Option<Tensor>> {
            self.latent_calls += 1;
            self.timesteps_seen.push(step.timestep);
            // Nudge the latent so the effect is observable.
            let data = z.data().iter().map(|&v| v * 0.5).collect();
            Ok(Some(Tensor::new(z.shape().to_vec(), data)?))
        }

        fn bias_attention(
            &self,
            _step: &StepView,
            layer: LayerId,
            attn: &Tensor,
        ) -> Result<Option<Tensor>> {
            self.bias_calls.set(self.bias_calls.get() + 1);
            if layer == LayerId::Up3 {
                let (cells, tokens) = (attn.shape()[0], attn.shape()[1]);
                Ok(Some(Tensor::full(
                    vec![cells, tokens],
                    1.0 / tokens as f64,
                )))
            } else {
                Ok(None)
            }
        }
    }

    #[test]
    fn hooks_run_on_every_step_and_alter_the_walk() {
        let (params, config, prompt) = test_setup();
        let inputs = SampleInputs {
            params: &params,
            config: &config,
            prompt: &prompt,
            concepts: &[],
        };
        let schedule = NoiseSchedule::default_schedule();
        let cfg = SamplerConfig {
            steps: 3,
            seed: 42,
            ..SamplerConfig::default()
        };
        let plain = sample(&inputs, &schedule, &cfg, None).unwrap();

        let mut hooks = CountingHooks {
            latent_calls: 0,
            bias_calls: Cell::new(0),
            timesteps_seen: Vec::new(),
        };
        let guided = sample(&inputs, &schedule, &cfg, Some(&mut hooks)).unwrap();

        assert_eq!(hooks.latent_calls, 3);
        assert_eq!(hooks.timesteps_seen, ddim_timesteps(500, 3).unwrap());
        // Bias is consulted once per layer per step, prompt branch only.
        assert_eq!(hooks.bias_calls.get(), 3 * LayerId::ALL.len());
        assert_ne!(plain.latent.data(), guided.latent.data());

        // The recorded up-3 maps are the substituted uniform ones.
        for record in guided
            .attention
            .iter()
            .filter(|r| r.layer == LayerId::Up3)
        {
            let n = record.map.shape()[1] as f64;
            assert!(record.map.data().iter().all(|&v| (v - 1.0 / n).abs() < 1e-12));
        }
    }

    #[test]
    fn hook_errors_carry_the_step_index() {
        struct Poison;
        impl GuidanceHooks for Poison {
            fn adjust_latent(&mut self, step: &StepView, z: &Tensor) -> Result<Option<Tensor>> {
                if step.index == 1 {
                    return Ok(Some(Tensor::full(z.shape().to_vec(), f64::NAN)));
                }
                Ok(None)
            }
            fn bias_attention(
                &self,
                _step: &StepView,
                _layer: LayerId,
                _attn: &Tensor,
            ) -> Result<Option<Tensor>> {
                Ok(None)
            }
        }
        let (params, config, prompt) = test_setup();
        let inputs = SampleInputs {
            params: &params,
            config: &config,
            prompt: &prompt,
            concepts: &[],
        };
        let schedule = NoiseSchedule::default_schedule();
        let cfg = SamplerConfig {
            steps: 3,
            seed: 7,
            ..SamplerConfig::default()
        };
        let err = sample(&inputs, &schedule, &cfg, Some(&mut Poison)).unwrap_err();
        assert!(err.to_string().contains("step 1"), "got: {err}");
    }
}
