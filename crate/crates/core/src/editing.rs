//! Concept inversion, fine-tuning, and layout-controlled re-rendering.
//!
//! A new visual concept enters the engine as a single learned embedding
//! behind a reserved symbol (`"<*>"` by default): the symbol joins the
//! vocabulary, but its vector lives outside the encoder's embedding table
//! and is substituted per prompt position at encode time. Inversion
//! optimizes only that vector against the ordinary noise-prediction loss
//! on template prompts over a handful of example images; an optional
//! fine-tuning phase then unfreezes the full model (encoder and denoiser)
//! on the same objective while the learned vector stays fixed. Finally,
//! [`edit_layout`] samples from the edited model with the usual layout
//! guidance, where targets may select the concept symbol like any word.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::image_to_latent;
use crate::error::{Error, Result};
use crate::guidance::{schedule_guidance, BackwardConfig, ForwardConfig, GuidanceTarget};
use crate::model::{
    bind, denoise, encode, join, EmbeddingOverride, ModelConfig, ModelParams, Module,
};
use crate::sampler::{eval_denoiser, sample, ConceptSlot, SampleInputs, SampleOutput, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor};
use crate::text::{TokenizedPrompt, Vocabulary};

/// Reserved symbol for a learned concept. The leading `<` keeps the
/// tokenizer from case-folding it and marks it as out-of-grammar.
pub const CONCEPT_SYMBOL: &str = "<*>";
/// Default optimization steps for the embedding-only phase.
pub const DEFAULT_INVERSION_STEPS: usize = 500;
/// Default optimization steps for the full-model phase.
pub const DEFAULT_FINETUNE_STEPS: usize = 150;

/// A learned concept: the symbol it answers to, its embedding, and where
/// it came from.
#[derive(Debug, Clone)]
pub struct ConceptToken {
    pub symbol: String,
    /// `(dim,)` vector substituted for the symbol at encode time.
    pub embedding: Tensor,
    /// Labels of the example images the embedding was trained on.
    pub source_images: Vec<String>,
    /// Optimization steps spent on the embedding.
    pub steps: usize,
}

/// Hyperparameters for both editing phases.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub inversion_steps: usize,
    pub finetune_steps: usize,
    pub inversion_lr: f64,
    pub finetune_lr: f64,
    /// Training prompt; must mention `symbol`.
    pub template: String,
    pub symbol: String,
    /// Seed for image choice, timesteps, and noise in both phases.
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            inversion_steps: DEFAULT_INVERSION_STEPS,
            finetune_steps: DEFAULT_FINETUNE_STEPS,
            inversion_lr: 1e-2,
            finetune_lr: 1e-3,
            template: format!("a photo of a {CONCEPT_SYMBOL}"),
            symbol: CONCEPT_SYMBOL.to_string(),
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.symbol.is_empty()
            || !self.symbol.starts_with('<')
            || self.symbol.chars().any(char::is_whitespace)
        {
            return Err(Error::invalid(format!(
                "concept symbol must be a single '<'-prefixed token, got {:?}",
                self.symbol
            )));
        }
        if !self
            .template
            .split_whitespace()
            .any(|word| word == self.symbol)
        {
            return Err(Error::invalid(format!(
                "template {:?} does not mention the concept symbol {:?}",
                self.template, self.symbol
            )));
        }
        for (name, lr) in [
            ("inversion_lr", self.inversion_lr),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be positive and finite, got {lr}"
                )));
            }
        }
        Ok(())
    }
}

// ── shared machinery ─────────────────────────────────────────────────────────

/// Adapter exposing one embedding vector as an optimizable module.
struct EmbeddingParam {
    vector: Tensor,
}

impl Module for EmbeddingParam {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "embedding"), &self.vector);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "embedding"), &mut self.vector);
    }
}

fn example_latents(config: &ModelConfig, images: &[(String, RgbImage)]) -> Result<Vec<Tensor>> {
    if images.is_empty() || images.len() > 5 {
        return Err(Error::invalid(format!(
            "concept training takes 1 to 5 example images, got {}",
            images.len()
        )));
    }
    let unet = &config.unet;
    images
        .iter()
        .map(|(name, img)| {
            let latent = image_to_latent(img);
            let want = [unet.in_channels, unet.size, unet.size];
            if latent.shape() != want {
                return Err(Error::invalid(format!(
                    "example image {name:?} has shape {:?}, model expects {want:?}",
                    latent.shape()
                )));
            }
            Ok(latent)
        })
        .collect()
}

/// Warm-start vector: the mean of the shape words' embedding rows, so the
/// new token starts in the region of the table that already denotes
/// object shapes.
fn init_embedding(params: &ModelParams, vocab: &Vocabulary) -> Result<Tensor> {
    let table = &params.encoder.token_emb;
    let dim = table.shape()[1];
    let mut sum = vec![0.0; dim];
    let shape_words = ["circle", "square", "triangle"];
    for word in shape_words {
        let id = vocab
            .id(word)
            .ok_or_else(|| Error::invalid(format!("vocabulary is missing {word:?}")))?;
        for (j, s) in sum.iter_mut().enumerate() {
            *s += table.at2(id, j);
        }
    }
    let scale = 1.0 / shape_words.len() as f64;
    Tensor::new(vec![dim], sum.into_iter().map(|s| s * scale).collect())
}

/// One noise-prediction step through the template prompt with the concept
/// vector substituted at `positions`. Exactly one side is trainable:
/// the model parameters (`train_params`) or the embedding. Returns the
/// loss and that side's gradients in optimizer order.
#[allow(clippy::too_many_arguments)]
fn concept_grads(
    params: &ModelParams,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    prompt: &TokenizedPrompt,
    positions: &[usize],
    embedding: &Tensor,
    latent: &Tensor,
    t: usize,
    eps: &Tensor,
    train_params: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, train_params);
    let emb_node = if train_params {
        tape.leaf(embedding.clone())
    } else {
        tape.param(embedding.clone())
    };
    let overrides: Vec<EmbeddingOverride> = positions
        .iter()
        .map(|&position| EmbeddingOverride { position, vector: emb_node })
        .collect();
    let ctx = encode(&mut tape, &bound, &config.encoder, prompt, &overrides)?;
    let z_t = schedule.q_sample(latent, t, eps)?;
    let z_node = tape.leaf(z_t);
    let out = denoise(&mut tape, &bound, &config.unet, z_node, t, ctx, None)?;
    let target = tape.leaf(eps.clone());
    let loss = tape.mse(out.eps, target)?;
    let loss_value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let collected = if train_params {
        bound
            .nodes()
            .iter()
            .map(|&n| {
                grads
                    .take(n)
                    .ok_or_else(|| Error::invalid("parameter missing from gradient map"))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![grads
            .take(emb_node)
            .ok_or_else(|| Error::invalid("embedding missing from gradient map"))?]
    };
    Ok((loss_value, collected))
}

struct StepDraw {
    index: usize,
    t: usize,
    eps: Tensor,
}

fn draw_step(rng: &mut ChaCha8Rng, schedule: &NoiseSchedule, latents: &[Tensor]) -> StepDraw {
    StepDraw {
        index: rng.gen_range(0..latents.len()),
        t: schedule.draw_timestep(rng),
        eps: NoiseSchedule::draw_noise(latents[0].shape().to_vec(), rng),
    }
}

// ── the two training phases ──────────────────────────────────────────────────

/// Learns a concept embedding from example images. Only the new vector is
/// optimized; every pre-existing parameter is bound frozen, so the model
/// is bit-identical afterwards. The symbol is added to `vocab` (its id
/// lies outside the embedding table, which is why the vector must travel
/// with the prompt as a [`ConceptSlot`]).
pub fn invert_concept(
    params: &ModelParams,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    vocab: &mut Vocabulary,
    images: &[(String, RgbImage)],
    ecfg: &EditConfig,
) -> Result<ConceptToken> {
    ecfg.validate()?;
    let latents = example_latents(config, images)?;
    let concept_id = vocab.add_word(&ecfg.symbol);
    let prompt = vocab.tokenize(&ecfg.template)?;
    let positions = prompt.positions_of(concept_id);
    debug_assert!(!positions.is_empty(), "validated template mentions the symbol");

    let mut module = EmbeddingParam { vector: init_embedding(params, vocab)? };
    let mut opt = crate::train::Adam::new(&module, ecfg.inversion_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(ecfg.seed);
    for _ in 0..ecfg.inversion_steps {
        let draw = draw_step(&mut rng, schedule, &latents);
        let (loss, grads) = concept_grads(
            params, config, schedule, &prompt, &positions, &module.vector,
            &latents[draw.index], draw.t, &draw.eps, false,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "invert_concept" });
        }
        opt.apply(&mut module, &grads)?;
    }
    Ok(ConceptToken {
        symbol: ecfg.symbol.clone(),
        embedding: module.vector,
        source_images: images.iter().map(|(name, _)| name.clone()).collect(),
        steps: ecfg.inversion_steps,
    })
}

/// Adapts the whole model (encoder and denoiser) to the concept's example
/// images for `ecfg.finetune_steps` steps, holding the learned embedding
/// fixed. Returns the adapted copy; `params` is untouched. A non-finite
/// loss aborts with an error rather than skipping the step.
pub fn finetune(
    params: &ModelParams,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    images: &[(String, RgbImage)],
    token: &ConceptToken,
    ecfg: &EditConfig,
) -> Result<ModelParams> {
    ecfg.validate()?;
    let latents = example_latents(config, images)?;
    let concept_id = vocab.id(&token.symbol).ok_or_else(|| {
        Error::invalid(format!(
            "concept {:?} is not in the vocabulary; invert it first",
            token.symbol
        ))
    })?;
    let prompt = vocab.tokenize(&ecfg.template)?;
    let positions = prompt.positions_of(concept_id);
    if positions.is_empty() {
        return Err(Error::invalid(format!(
            "template {:?} does not mention the inverted concept {:?}",
            ecfg.template, token.symbol
        )));
    }

    let mut tuned = params.clone();
    let mut opt = crate::train::Adam::new(&tuned, ecfg.finetune_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(ecfg.seed);
    for _ in 0..ecfg.finetune_steps {
        let draw = draw_step(&mut rng, schedule, &latents);
        let (loss, grads) = concept_grads(
            &tuned, config, schedule, &prompt, &positions, &token.embedding,
            &latents[draw.index], draw.t, &draw.eps, true,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "finetune" });
        }
        opt.apply(&mut tuned, &grads)?;
    }
    Ok(tuned)
}

// ── evaluation and generation ────────────────────────────────────────────────

/// Concept substitutions for a prompt: one slot per occurrence of each
/// concept's symbol.
pub fn concept_slots(
    vocab: &Vocabulary,
    prompt: &TokenizedPrompt,
    concepts: &[ConceptToken],
) -> Result<Vec<ConceptSlot>> {
    let mut slots = Vec::new();
    for token in concepts {
        let id = vocab.id(&token.symbol).ok_or_else(|| {
            Error::invalid(format!(
                "concept {:?} is not in the vocabulary",
                token.symbol
            ))
        })?;
        for position in prompt.positions_of(id) {
            slots.push(ConceptSlot { position, vector: token.embedding.clone() });
        }
    }
    Ok(slots)
}

/// Mean noise-prediction loss over deterministic (image, timestep, noise)
/// draws — the before/after yardstick for fine-tuning.
#[allow(clippy::too_many_arguments)]
pub fn example_loss(
    params: &ModelParams,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    prompt: &TokenizedPrompt,
    concepts: &[ConceptSlot],
    latents: &[Tensor],
    n_draws: usize,
    seed: u64,
) -> Result<f64> {
    if latents.is_empty() || n_draws == 0 {
        return Err(Error::invalid("example_loss needs latents and at least one draw"));
    }
    let ctx = crate::sampler::encode_prompt(params, config, prompt, concepts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for i in 0..n_draws {
        let latent = &latents[i % latents.len()];
        let t = schedule.draw_timestep(&mut rng);
        let eps = NoiseSchedule::draw_noise(latent.shape().to_vec(), &mut rng);
        let z_t = schedule.q_sample(latent, t, &eps)?;
        let (eps_hat, _) = eval_denoiser(params, config, &z_t, &ctx, t, None)?;
        let mse = eps_hat
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / eps.data().len() as f64;
        total += mse;
    }
    Ok(total / n_draws as f64)
}

/// Samples from a (possibly fine-tuned) model with concept substitutions
/// and layout guidance. An empty target list is plain conditional
/// sampling; otherwise the targets — which may select concept symbols —
/// are scheduled through the standard guidance stack.
#[allow(clippy::too_many_arguments)]
pub fn edit_layout(
    params: &ModelParams,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    concepts: &[ConceptToken],
    caption: &str,
    targets: &[GuidanceTarget],
    forward: Option<ForwardConfig>,
    backward: Option<BackwardConfig>,
    sampler_cfg: &SamplerConfig,
) -> Result<SampleOutput> {
    let prompt = vocab.tokenize(caption)?;
    let slots = concept_slots(vocab, &prompt, concepts)?;
    let inputs = SampleInputs {
        params,
        config,
        prompt: &prompt,
        concepts: &slots,
    };
    if targets.is_empty() {
        return sample(&inputs, schedule, sampler_cfg, None);
    }
    let mut hooks = schedule_guidance(targets, vocab, &prompt, sampler_cfg.steps, forward, backward)?;
    sample(&inputs, schedule, sampler_cfg, Some(&mut hooks))
}
