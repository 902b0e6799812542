//! Denoiser training: noise-prediction objective, Adam, and the step loop.
//!
//! Each step draws a timestep, noises a clean image with the schedule, and
//! regresses the denoiser's output onto the injected noise with mean squared
//! error. Captions are independently replaced by the empty caption with a
//! small probability, which trains the unconditional branch that
//! classifier-free guidance needs at sampling time.
//!
//! Batch samples run on independent tapes (optionally in parallel) and their
//! gradients are reduced in batch-index order, so a training run is a pure
//! function of (seed, data, config) regardless of thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{bind, denoise, encode, ModelConfig, ModelParams, Module};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor};
use crate::text::TokenizedPrompt;

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    /// Per-caption probability of training on the empty caption instead.
    pub dropout: f64,
    /// Emit a checkpoint event every this many steps (0 = never).
    pub checkpoint_every: usize,
    /// Seed for batch order, timesteps, noise, and caption dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 2e-3,
            total_steps: 3000,
            dropout: 0.1,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

// ── optimizer ────────────────────────────────────────────────────────────────

/// Adam over any [`Module`]'s parameters, tracked in visitation order (the
/// same order [`bind`] pushes them, which is how gradients line up).
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(module: &impl Module, lr: f64) -> Self {
        let mut m = Vec::new();
        module.visit("", &mut |_, t| m.push(Tensor::zeros(t.shape().to_vec())));
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update from `grads`, which must follow the module's
    /// visitation order (as returned by [`collect_grads`]).
    pub fn apply(&mut self, module: &mut impl Module, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "gradient count {} does not match parameter count {}",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        let mut failure = None;
        module.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            let g = &grads[idx];
            if g.shape() != t.shape() {
                failure = Some(Error::invalid(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    t.shape()
                )));
                return;
            }
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            for ((p, (mi, vi)), &gi) in t
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
                .zip(g.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        debug_assert_eq!(idx, grads.len());
        Ok(())
    }
}

// ── one training step ────────────────────────────────────────────────────────

/// Per-sample randomness, drawn sequentially up front so the parallel batch
/// evaluation stays deterministic.
struct SampleDraw {
    drop_caption: bool,
    t: usize,
    eps: Tensor,
}

/// Forward + backward for one (image, caption) sample; returns the loss and
/// parameter gradients in bind order.
fn sample_grads(
    params: &ModelParams,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    image: &Tensor,
    caption: &TokenizedPrompt,
    draw: &SampleDraw,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, true);
    let empty = TokenizedPrompt::empty();
    let prompt = if draw.drop_caption { &empty } else { caption };
    let ctx = encode(&mut tape, &bound, &config.encoder, prompt, &[])?;
    let z_t = schedule.q_sample(image, draw.t, &draw.eps)?;
    let z_node = tape.leaf(z_t);
    let out = denoise(&mut tape, &bound, &config.unet, z_node, draw.t, ctx, None)?;
    let target = tape.leaf(draw.eps.clone());
    let loss = tape.mse(out.eps, target)?;
    let loss_value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let collected = bound
        .nodes()
        .iter()
        .map(|&n| {
            grads
                .take(n)
                .ok_or_else(|| Error::invalid("parameter missing from gradient map"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_value, collected))
}

/// One optimizer step over a batch: mean ε-prediction MSE, gradients averaged
/// over the batch, Adam update applied. A non-finite loss anywhere rejects
/// the whole step (parameters untouched) with the offending error.
pub fn train_step(
    params: &mut ModelParams,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    tcfg: &TrainConfig,
    batch: &[(Tensor, TokenizedPrompt)],
    rng: &mut ChaCha8Rng,
    opt: &mut Adam,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let draws: Vec<SampleDraw> = batch
        .iter()
        .map(|(image, _)| SampleDraw {
            drop_caption: rng.gen_bool(tcfg.dropout),
            t: schedule.draw_timestep(rng),
            eps: NoiseSchedule::draw_noise(image.shape().to_vec(), rng),
        })
        .collect();

    let per_sample: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .zip(&draws)
        .map(|((image, caption), draw)| {
            sample_grads(params, config, schedule, image, caption, draw)
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_sample.into_iter();
    let (first_loss, mut grad_sum) = iter.next().expect("batch is nonempty");
    let mut loss_sum = first_loss;
    for (loss, grads) in iter {
        loss_sum += loss;
        for (acc, g) in grad_sum.iter_mut().zip(grads) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grad_sum {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    let loss = loss_sum * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }
    opt.apply(params, &grad_sum)?;
    Ok(loss)
}

// ── the loop ─────────────────────────────────────────────────────────────────

/// Progress notifications from [`train`].
#[derive(Debug)]
pub enum TrainEvent {
    /// A completed step and its batch loss.
    Step { step: usize, loss: f64 },
    /// A step whose loss went non-finite; parameters were left untouched.
    Rejected { step: usize, reason: String },
    /// The checkpoint cadence fired; the caller decides how to persist.
    Checkpoint { step: usize },
}

/// Runs the full training loop, returning `(step, loss)` pairs for every
/// accepted step. Batches cycle through a reshuffled copy of `data`.
pub fn train(
    params: &mut ModelParams,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    tcfg: &TrainConfig,
    data: &[(Tensor, TokenizedPrompt)],
    mut observe: impl FnMut(TrainEvent),
) -> Result<Vec<(usize, f64)>> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    if tcfg.batch_size > data.len() {
        return Err(Error::invalid(format!(
            "batch_size {} exceeds dataset size {}",
            tcfg.batch_size,
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut opt = Adam::new(params, tcfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len(); // force an initial shuffle
    let mut losses = Vec::with_capacity(tcfg.total_steps);

    for step in 0..tcfg.total_steps {
        if cursor + tcfg.batch_size > order.len() {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<(Tensor, TokenizedPrompt)> = order[cursor..cursor + tcfg.batch_size]
            .iter()
            .map(|&i| data[i].clone())
            .collect();
        cursor += tcfg.batch_size;

        match train_step(params, config, schedule, tcfg, &batch, &mut rng, &mut opt) {
            Ok(loss) => {
                losses.push((step, loss));
                observe(TrainEvent::Step { step, loss });
            }
            Err(e @ Error::NonFinite { .. }) => {
                observe(TrainEvent::Rejected {
                    step,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
        if tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 {
            observe(TrainEvent::Checkpoint { step });
        }
    }
    Ok(losses)
}
