//! Diffusion noise schedule: per-step variances, cumulative signal fractions,
//! and the forward noising process.
//!
//! The schedule is the one fixed numerical backbone shared by training,
//! sampling, and guidance: training draws a timestep and noises a clean image
//! with [`NoiseSchedule::q_sample`], the sampler walks the same table
//! backwards deterministically, and the backward-guidance update scales its
//! gradient step by [`NoiseSchedule::sigma`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default number of training timesteps.
pub const DEFAULT_T_TRAIN: usize = 500;
/// Default first per-step variance.
pub const DEFAULT_BETA_START: f64 = 0.000_85;
/// Default last per-step variance.
pub const DEFAULT_BETA_END: f64 = 0.012;

/// Linear-beta diffusion schedule.
///
/// `betas` holds β_1..β_T (linearly interpolated, endpoints inclusive) and
/// `alpha_bar` holds ᾱ_0..ᾱ_T with ᾱ_0 = 1 and ᾱ_t = Π_{s≤t}(1−β_s), so the
/// clean image sits at t = 0 and (nearly) pure noise at t = T.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_train: usize,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule with `t_train` steps and betas linear from
    /// `beta_start` to `beta_end` inclusive.
    pub fn build(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::invalid(format!(
                "noise schedule needs at least 2 steps, got {t_train}"
            )));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta range must satisfy 0 < start < end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let span = (t_train - 1) as f64;
        let betas: Vec<f64> = (0..t_train)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_train + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Ok(Self {
            t_train,
            betas,
            alpha_bar,
        })
    }

    /// The default desk-scale schedule: 500 steps, betas 0.00085 → 0.012.
    pub fn default_schedule() -> Self {
        Self::build(DEFAULT_T_TRAIN, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    /// Number of training timesteps T.
    pub fn t_train(&self) -> usize {
        self.t_train
    }

    /// β_t for t ∈ 1..=T.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.t_train {
            return Err(Error::IndexOutOfRange {
                op: "beta",
                index: t,
                size: self.t_train,
            });
        }
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for t ∈ 0..=T (ᾱ_0 = 1).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::IndexOutOfRange {
                op: "alpha_bar",
                index: t,
                size: self.t_train,
            })
    }

    /// Noise-to-signal scale σ_t = sqrt((1−ᾱ_t)/ᾱ_t); σ_0 = 0.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(sigma_from_alpha_bar(self.alpha_bar(t)?))
    }

    /// Forward noising z_t = sqrt(ᾱ_t)·z0 + sqrt(1−ᾱ_t)·ε.
    pub fn q_sample(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let a = self.alpha_bar(t)?;
        q_sample_with(a, z0, eps)
    }

    /// Draws a uniform timestep in 1..=T (the trainable range).
    pub fn draw_timestep<R: Rng>(&self, rng: &mut R) -> usize {
        rng.gen_range(1..=self.t_train)
    }

    /// Draws unit-normal noise of the given shape.
    pub fn draw_noise<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(shape, data).expect("shape/data sizes agree by construction")
    }
}

/// σ as a function of ᾱ alone: sqrt((1−ᾱ)/ᾱ).
pub fn sigma_from_alpha_bar(alpha_bar: f64) -> f64 {
    ((1.0 - alpha_bar) / alpha_bar).sqrt()
}

/// The noising formula with an explicit signal fraction, shared by
/// [`NoiseSchedule::q_sample`] and the sampler's reverse update.
pub fn q_sample_with(alpha_bar: f64, z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let cs = alpha_bar.sqrt();
    let cn = (1.0 - alpha_bar).sqrt();
    let data: Vec<f64> = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&s, &n)| cs * s + cn * n)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}
