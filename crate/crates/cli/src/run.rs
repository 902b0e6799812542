//! Run-level configuration: module defaults, overridden by a JSON config
//! file, overridden by CLI flags.

use std::path::Path;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use layoutdiff::guidance::{BackwardConfig, ForwardConfig};
use layoutdiff::model::LayerId;
use layoutdiff::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};

/// Which guidance stages a command activates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Plain classifier-free-guided sampling.
    None,
    /// Attention biasing during the denoiser's forward passes.
    Forward,
    /// Energy-gradient latent updates.
    Backward,
    /// Forward and backward guidance together.
    Both,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Forward => "forward",
            Mode::Backward => "backward",
            Mode::Both => "both",
        }
    }

    pub fn uses_forward(self) -> bool {
        matches!(self, Mode::Forward | Mode::Both)
    }

    pub fn uses_backward(self) -> bool {
        matches!(self, Mode::Backward | Mode::Both)
    }
}

/// Per-run overrides of the sampling and guidance defaults. Every field
/// is optional; the effective value is flag > config file > default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub steps: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub eta: Option<f64>,
    /// Backward-guidance layer set, by name ("down-1" .. "up-3").
    pub gamma_layers: Option<Vec<String>>,
    /// Forward guidance runs on the first N sampling steps.
    pub forward_steps: Option<usize>,
    /// Backward guidance runs on the first N sampling steps.
    pub backward_steps: Option<usize>,
    pub backward_repeats: Option<usize>,
    pub include_special: Option<bool>,
}

/// The shared sampling/guidance flags. Mirrors [`RunConfig`] field for
/// field; unset flags fall through to the config file, then defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// JSON config file with the same keys as the flags below.
    #[arg(long, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
    /// Sampling steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// Run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Forward-guidance bias strength in [0, 1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Backward-guidance loss scale.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Comma-separated backward layer set, e.g. "mid-1,up-1".
    #[arg(long, value_name = "LAYERS")]
    pub gamma_layers: Option<String>,
    /// Apply forward guidance on the first N steps.
    #[arg(long)]
    pub forward_steps: Option<usize>,
    /// Apply backward guidance on the first N steps.
    #[arg(long)]
    pub backward_steps: Option<usize>,
    /// Gradient updates per backward-guided step.
    #[arg(long)]
    pub backward_repeats: Option<usize>,
    /// Bias start/padding tokens toward the layout in forward guidance.
    #[arg(long, value_name = "BOOL")]
    pub include_special: Option<bool>,
}

impl RunFlags {
    /// Folds the config file (if any) under the flags.
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_config(path)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            steps: self.steps,
            cfg_scale: self.cfg_scale,
            seed: self.seed,
            lambda: self.lambda,
            eta: self.eta,
            gamma_layers: self
                .gamma_layers
                .as_ref()
                .map(|s| s.split(',').map(|p| p.trim().to_string()).collect()),
            forward_steps: self.forward_steps,
            backward_steps: self.backward_steps,
            backward_repeats: self.backward_repeats,
            include_special: self.include_special,
        };
        cfg.apply(flags);
        Ok(cfg)
    }
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub sampler: SamplerConfig,
    pub forward: ForwardConfig,
    pub backward: BackwardConfig,
}

impl RunConfig {
    /// Lays `over` on top of `self` (set fields in `over` win).
    pub fn apply(&mut self, over: RunConfig) {
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f; } )* };
        }
        take!(
            steps, cfg_scale, seed, lambda, eta, gamma_layers, forward_steps,
            backward_steps, backward_repeats, include_special
        );
    }

    /// Validates everything against the module preconditions and returns
    /// concrete configs. Guidance windows default to the paper settings
    /// but never extend past the run itself unless explicitly requested.
    pub fn resolve(&self) -> Result<Resolved> {
        let mut sampler = SamplerConfig::default();
        if let Some(steps) = self.steps {
            sampler.steps = steps;
        }
        if let Some(w) = self.cfg_scale {
            sampler.cfg_scale = w;
        }
        if let Some(seed) = self.seed {
            sampler.seed = seed;
        }
        if sampler.steps == 0 {
            anyhow::bail!("steps must be at least 1");
        }

        let mut forward = ForwardConfig::default();
        if let Some(lambda) = self.lambda {
            forward.lambda = lambda;
        }
        forward.steps = match self.forward_steps {
            Some(n) => 0..n,
            None => 0..forward.steps.end.min(sampler.steps),
        };
        if let Some(include) = self.include_special {
            forward.include_special = include;
        }
        forward.validate(sampler.steps)?;

        let mut backward = BackwardConfig::default();
        if let Some(eta) = self.eta {
            backward.eta = eta;
        }
        if let Some(names) = &self.gamma_layers {
            backward.layers = names
                .iter()
                .map(|n| LayerId::parse(n))
                .collect::<layoutdiff::Result<_>>()?;
        }
        backward.steps = match self.backward_steps {
            Some(n) => 0..n,
            None => 0..backward.steps.end.min(sampler.steps),
        };
        if let Some(repeats) = self.backward_repeats {
            backward.repeats = repeats;
        }
        backward.validate(sampler.steps)?;

        Ok(Resolved { sampler, forward, backward })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_over_file_over_default() {
        let mut file: RunConfig =
            serde_json::from_str(r#"{"steps": 10, "eta": 50.0}"#).unwrap();
        let flags = RunConfig { steps: Some(4), ..RunConfig::default() };
        file.apply(flags);
        let resolved = file.resolve().unwrap();
        assert_eq!(resolved.sampler.steps, 4);
        assert_eq!(resolved.backward.eta, 50.0);
        assert_eq!(resolved.sampler.cfg_scale, SamplerConfig::default().cfg_scale);
    }

    #[test]
    fn guidance_windows_clamp_to_short_runs_unless_explicit() {
        let cfg = RunConfig { steps: Some(3), ..RunConfig::default() };
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.forward.steps, 0..3);
        assert_eq!(resolved.backward.steps, 0..3);

        let over = RunConfig {
            steps: Some(3),
            forward_steps: Some(5),
            ..RunConfig::default()
        };
        assert!(over.resolve().is_err(), "explicit overrun must be rejected");
    }

    #[test]
    fn bad_values_are_rejected_before_any_work() {
        let bad_eta = RunConfig { eta: Some(-1.0), ..RunConfig::default() };
        assert!(bad_eta.resolve().is_err());
        let bad_lambda = RunConfig { lambda: Some(1.5), ..RunConfig::default() };
        assert!(bad_lambda.resolve().is_err());
        let bad_layer = RunConfig {
            gamma_layers: Some(vec!["mid-9".into()]),
            ..RunConfig::default()
        };
        assert!(bad_layer.resolve().is_err());
        let no_steps = RunConfig { steps: Some(0), ..RunConfig::default() };
        assert!(no_steps.resolve().is_err());
    }

    #[test]
    fn gamma_layers_parse_by_name() {
        let cfg = RunConfig {
            gamma_layers: Some(vec!["down-3".into(), "up-2".into()]),
            ..RunConfig::default()
        };
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.backward.layers, vec![LayerId::Down3, LayerId::Up2]);
    }
}
