//! Command-line driver for the layout-guided diffusion engine.

mod artifacts;
mod commands;
mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{
    cmd_ablate, cmd_edit, cmd_eval_visor, cmd_invert, cmd_make_data, cmd_sample, cmd_train,
    cmd_word_drop, AblateArgs, EditArgs, EvalArgs, Failure, InvertArgs, SampleArgs, Sweep,
    TrainArgs, WordDropArgs,
};
use run::{Mode, RunFlags};

#[derive(Parser)]
#[command(
    name = "layoutdiff",
    about = "Desk-scale text-conditioned diffusion with training-free layout control",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset (PNGs plus JSONL manifests).
    MakeData {
        /// Number of scenes.
        #[arg(long)]
        n: usize,
        /// Generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a generated dataset.
    Train {
        /// Dataset directory from make-data.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint, continuing its step counter.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// JSON config file with training hyperparameters.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Target global step count (resumes train up to this step).
        #[arg(long)]
        total_steps: Option<usize>,
        /// Caption-dropout probability for classifier-free guidance.
        #[arg(long)]
        dropout: Option<f64>,
        /// Refresh the on-disk checkpoint every N steps (0 = only at the end).
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Training seed (batch order, timesteps, noise).
        #[arg(long)]
        seed: Option<u64>,
        /// Weight-initialization seed for fresh models.
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        /// Loss log path (default: checkpoint path with .loss.csv).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Generate one image from a prompt, optionally layout-guided.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Layout: inline JSON array or a path to a JSON file
        /// ([{"token": "circle", "box": [0,0,0.5,1]}, ...]).
        #[arg(long)]
        layout: Option<String>,
        /// Guidance mode.
        #[arg(long, value_enum, default_value_t = Mode::None)]
        mode: Mode,
        /// Output image path.
        #[arg(long, default_value = "sample.png")]
        out: PathBuf,
        /// Dump every cross-attention map as PGM files into this directory.
        #[arg(long, value_name = "DIR")]
        dump_attn: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Evaluate spatial fidelity on split-canvas two-object prompts.
    EvalVisor {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_prompts: usize,
        #[arg(long, value_enum, default_value_t = Mode::Backward)]
        mode: Mode,
        /// Also evaluate mode none for a side-by-side report.
        #[arg(long)]
        compare: bool,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Write the report(s) as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the held-out editing class when sampling prompts.
        #[arg(long)]
        exclude_held_out: bool,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Sweep backward-guidance settings and emit a CSV results table.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which sweep to run: the 12 layer subsets or the 8 loss scales.
        #[arg(long, value_enum)]
        sweep: Sweep,
        #[arg(long)]
        n_prompts: usize,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Output CSV path.
        #[arg(long, default_value = "ablate.csv")]
        out: PathBuf,
        /// Skip the held-out editing class when sampling prompts.
        #[arg(long)]
        exclude_held_out: bool,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Sample a prompt twice: as-is, and with caption words replaced by
    /// padding (probing what the special tokens alone encode).
    WordDrop {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Directory for the image pair.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Learn a concept embedding from example images (and optionally
    /// fine-tune the model on them).
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1-5 example images.
        #[arg(long, required = true, num_args = 1..)]
        images: Vec<PathBuf>,
        /// Output checkpoint (model + concept).
        #[arg(long)]
        out: PathBuf,
        /// JSON config file with editing hyperparameters.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long)]
        inversion_steps: Option<usize>,
        /// Full-model adaptation steps after inversion (0 = skip).
        #[arg(long)]
        finetune_steps: Option<usize>,
        #[arg(long)]
        inversion_lr: Option<f64>,
        #[arg(long)]
        finetune_lr: Option<f64>,
        /// Concept symbol ('<'-prefixed, e.g. "<*>").
        #[arg(long)]
        symbol: Option<String>,
        /// Training prompt template mentioning the symbol.
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-render a concept prompt under a layout with guidance.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Caption; may mention inverted concept symbols.
        #[arg(long)]
        prompt: String,
        /// Layout: inline JSON array or a path to a JSON file.
        #[arg(long)]
        layout: Option<String>,
        #[arg(long, value_enum, default_value_t = Mode::Backward)]
        mode: Mode,
        #[arg(long, default_value = "edit.png")]
        out: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::MakeData { n, seed, out } => cmd_make_data(n, seed, &out),
        Command::Train {
            data,
            out,
            resume,
            config,
            batch_size,
            learning_rate,
            total_steps,
            dropout,
            checkpoint_every,
            seed,
            model_seed,
            loss_csv,
        } => cmd_train(&TrainArgs {
            data,
            out,
            resume,
            config,
            batch_size,
            learning_rate,
            total_steps,
            dropout,
            checkpoint_every,
            seed,
            model_seed,
            loss_csv,
        }),
        Command::Sample {
            checkpoint,
            prompt,
            layout,
            mode,
            out,
            dump_attn,
            flags,
        } => cmd_sample(&SampleArgs { checkpoint, prompt, layout, mode, out, dump_attn, flags }),
        Command::EvalVisor {
            checkpoint,
            n_prompts,
            mode,
            compare,
            jobs,
            out,
            exclude_held_out,
            flags,
        } => cmd_eval_visor(&EvalArgs {
            checkpoint,
            n_prompts,
            mode,
            compare,
            jobs,
            out,
            exclude_held_out,
            flags,
        }),
        Command::Ablate {
            checkpoint,
            sweep,
            n_prompts,
            jobs,
            out,
            exclude_held_out,
            flags,
        } => cmd_ablate(&AblateArgs {
            checkpoint,
            sweep,
            n_prompts,
            jobs,
            out,
            exclude_held_out,
            flags,
        }),
        Command::WordDrop { checkpoint, prompt, out_dir, flags } => {
            cmd_word_drop(&WordDropArgs { checkpoint, prompt, out_dir, flags })
        }
        Command::Invert {
            checkpoint,
            images,
            out,
            config,
            inversion_steps,
            finetune_steps,
            inversion_lr,
            finetune_lr,
            symbol,
            template,
            seed,
        } => cmd_invert(&InvertArgs {
            checkpoint,
            images,
            out,
            config,
            inversion_steps,
            finetune_steps,
            inversion_lr,
            finetune_lr,
            symbol,
            template,
            seed,
        }),
        Command::Edit { checkpoint, prompt, layout, mode, out, flags } => {
            cmd_edit(&EditArgs { checkpoint, prompt, layout, mode, out, flags })
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
