//! The eight subcommand drivers.
//!
//! Every command separates a validation phase (bad arguments, unreadable
//! inputs — exit code 2) from an execution phase (runtime failures —
//! exit code 1), and routes all artifacts through the atomic writers in
//! [`crate::artifacts`], so reruns with identical arguments produce
//! byte-identical files and interrupted runs leave nothing partial.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use layoutdiff::checkpoint::Checkpoint;
use layoutdiff::dataset::{generate_dataset, load_manifest, load_training_pairs, DEFAULT_HELD_OUT};
use layoutdiff::editing::{edit_layout, finetune, invert_concept, EditConfig};
use layoutdiff::eval::{detect, sample_visor_prompts, visor_evaluate, MetricsReport, VisorPrompt, VisorSample};
use layoutdiff::guidance::{
    parse_layout_json, schedule_guidance, BackwardConfig, GuidanceTarget, TokenSelector,
};
use layoutdiff::model::{substitute_word_embeddings, LayerId, ModelConfig};
use layoutdiff::sampler::{
    encode_prompt, sample, sample_with_context, SampleInputs, SampleOutput, SamplerConfig,
};
use layoutdiff::schedule::NoiseSchedule;
use layoutdiff::text::TokenizedPrompt;
use layoutdiff::train::{train, TrainConfig, TrainEvent};
use rayon::prelude::*;

use crate::artifacts::{dump_attention, metrics_csv, write_atomic, write_png};
use crate::run::{Mode, Resolved, RunFlags};

/// A command failure, classified for the process exit code: invalid
/// input exits 2, runtime failure exits 1.
#[derive(Debug)]
pub enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type CmdResult = Result<(), Failure>;

trait Classify<T> {
    /// Marks errors from this step as invalid input (exit 2).
    fn invalid(self) -> Result<T, Failure>;
    /// Marks errors from this step as runtime failures (exit 1).
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .invalid()
}

/// Reads a layout argument: inline JSON if it starts with `[`, otherwise
/// a file path.
fn read_layout(
    arg: &str,
    vocab: &layoutdiff::text::Vocabulary,
) -> Result<Vec<GuidanceTarget>, Failure> {
    let json = if arg.trim_start().starts_with('[') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg)
            .with_context(|| format!("reading layout file {arg}"))
            .invalid()?
    };
    parse_layout_json(&json, vocab).invalid()
}

/// Builds guidance hooks for a mode, or `None` when the layout is empty
/// or the mode requests no guidance (an empty layout degrades every mode
/// to unguided sampling rather than erroring).
fn guidance_for(
    mode: Mode,
    targets: &[GuidanceTarget],
    ckpt: &Checkpoint,
    prompt: &TokenizedPrompt,
    resolved: &Resolved,
) -> Result<Option<layoutdiff::guidance::LayoutGuidance>, Failure> {
    if targets.is_empty() || mode == Mode::None {
        return Ok(None);
    }
    let forward = mode.uses_forward().then(|| resolved.forward.clone());
    let backward = mode.uses_backward().then(|| resolved.backward.clone());
    schedule_guidance(
        targets,
        &ckpt.vocabulary,
        prompt,
        resolved.sampler.steps,
        forward,
        backward,
    )
    .invalid()
    .map(Some)
}

fn sample_once(
    ckpt: &Checkpoint,
    schedule: &NoiseSchedule,
    prompt: &TokenizedPrompt,
    mode: Mode,
    targets: &[GuidanceTarget],
    resolved: &Resolved,
    sampler: &SamplerConfig,
) -> Result<SampleOutput, Failure> {
    let slots = ckpt.concept_slots(prompt).invalid()?;
    let inputs = SampleInputs {
        params: &ckpt.params,
        config: &ckpt.model,
        prompt,
        concepts: &slots,
    };
    let mut hooks = guidance_for(mode, targets, ckpt, prompt, resolved)?;
    sample(
        &inputs,
        schedule,
        sampler,
        hooks.as_mut().map(|h| h as &mut dyn layoutdiff::sampler::GuidanceHooks),
    )
    .runtime()
}

// ── make-data ────────────────────────────────────────────────────────────────

pub fn cmd_make_data(n: usize, seed: u64, out: &Path) -> CmdResult {
    if n == 0 {
        return Err(Failure::Invalid(anyhow!("--n must be at least 1")));
    }
    let manifest = generate_dataset(n, seed, out, Some(DEFAULT_HELD_OUT)).runtime()?;
    println!(
        "wrote {} scenes ({} train, {} val) under {}",
        manifest.len(),
        manifest.train.len(),
        manifest.val.len(),
        out.display()
    );
    println!("{}", out.join("train.jsonl").display());
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────────

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub total_steps: Option<usize>,
    pub dropout: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub seed: Option<u64>,
    pub model_seed: u64,
    pub loss_csv: Option<PathBuf>,
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut tcfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .invalid()?;
            serde_json::from_str(&text)
                .with_context(|| format!("config {}", path.display()))
                .invalid()?
        }
        None => TrainConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { tcfg.$f = v; } )* };
    }
    over!(batch_size, learning_rate, total_steps, dropout, checkpoint_every, seed);
    tcfg.validate().invalid()?;
    Ok(tcfg)
}

pub fn cmd_train(args: &TrainArgs) -> CmdResult {
    let tcfg = train_config(args)?;
    let mut ckpt = match &args.resume {
        Some(path) => load_checkpoint(path)?,
        None => Checkpoint::fresh(ModelConfig::default(), args.model_seed),
    };
    let schedule = ckpt.schedule().invalid()?;
    let manifest = load_manifest(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))
        .invalid()?;
    let pairs = load_training_pairs(&manifest.dir, &manifest.train, &ckpt.vocabulary)
        .context("loading training pairs")
        .invalid()?;

    if tcfg.total_steps <= ckpt.training_step {
        println!(
            "checkpoint already at step {} (target {}); nothing to train",
            ckpt.training_step, tcfg.total_steps
        );
    }

    // The cadence splits training into chunks so the checkpoint on disk
    // is refreshed mid-run; each chunk reseeds from the step counter,
    // which keeps reruns (and resumes) deterministic.
    let cadence = if tcfg.checkpoint_every == 0 {
        usize::MAX
    } else {
        tcfg.checkpoint_every
    };
    let mut losses: Vec<(usize, f64)> = Vec::new();
    while ckpt.training_step < tcfg.total_steps {
        let start = ckpt.training_step;
        let chunk = cadence.min(tcfg.total_steps - start);
        let chunk_cfg = TrainConfig {
            total_steps: chunk,
            checkpoint_every: 0,
            seed: tcfg.seed.wrapping_add(start as u64),
            ..tcfg.clone()
        };
        let chunk_losses = train(
            &mut ckpt.params,
            &ckpt.model,
            &schedule,
            &chunk_cfg,
            &pairs,
            |event| match event {
                TrainEvent::Step { step, loss } => {
                    let global = start + step + 1;
                    if global % 100 == 0 || global == tcfg.total_steps {
                        println!("step {global} loss {loss:.4}");
                    }
                }
                TrainEvent::Rejected { step, reason } => {
                    eprintln!("step {} rejected: {reason}", start + step + 1);
                }
                TrainEvent::Checkpoint { .. } => {}
            },
        )
        .runtime()?;
        losses.extend(chunk_losses.into_iter().map(|(s, l)| (start + s + 1, l)));
        ckpt.training_step = start + chunk;
        ckpt.save(&args.out)
            .with_context(|| format!("saving checkpoint {}", args.out.display()))
            .runtime()?;
    }
    if losses.is_empty() {
        ckpt.save(&args.out)
            .with_context(|| format!("saving checkpoint {}", args.out.display()))
            .runtime()?;
    }

    let csv_path = match &args.loss_csv {
        Some(p) => p.clone(),
        None => args.out.with_extension("loss.csv"),
    };
    let mut csv = String::from("step,loss\n");
    for (step, loss) in &losses {
        let _ = writeln!(csv, "{step},{loss}");
    }
    write_atomic(&csv_path, csv.as_bytes()).runtime()?;
    println!("{}", args.out.display());
    Ok(())
}

// ── sample ───────────────────────────────────────────────────────────────────

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub layout: Option<String>,
    pub mode: Mode,
    pub out: PathBuf,
    pub dump_attn: Option<PathBuf>,
    pub flags: RunFlags,
}

pub fn cmd_sample(args: &SampleArgs) -> CmdResult {
    let resolved = args.flags.load().invalid()?.resolve().invalid()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let schedule = ckpt.schedule().invalid()?;
    let prompt = ckpt.vocabulary.tokenize(&args.prompt).invalid()?;
    let targets = match &args.layout {
        Some(arg) => read_layout(arg, &ckpt.vocabulary)?,
        None => Vec::new(),
    };

    let output = sample_once(
        &ckpt,
        &schedule,
        &prompt,
        args.mode,
        &targets,
        &resolved,
        &resolved.sampler,
    )?;
    write_png(&args.out, &output.image).runtime()?;
    if let Some(dir) = &args.dump_attn {
        let written = dump_attention(dir, &output.attention, &ckpt.model.unet).runtime()?;
        println!("dumped {written} attention maps under {}", dir.display());
    }
    println!("{}", args.out.display());
    Ok(())
}

// ── eval-visor / ablate ──────────────────────────────────────────────────────

/// Guidance targets for a split-canvas prompt: the subject's color+shape
/// words get the subject half, the object's the other half.
fn visor_targets(prompt: &TokenizedPrompt, vp: &VisorPrompt) -> Vec<GuidanceTarget> {
    let ws = &prompt.word_span;
    let [subject, object] = vp.layout();
    vec![
        GuidanceTarget {
            selector: TokenSelector::Indices(vec![ws.start + 1, ws.start + 2]),
            bbox: subject.bbox,
        },
        GuidanceTarget {
            selector: TokenSelector::Indices(vec![ws.end - 2, ws.end - 1]),
            bbox: object.bbox,
        },
    ]
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub n_prompts: usize,
    pub mode: Mode,
    pub compare: bool,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub exclude_held_out: bool,
    pub flags: RunFlags,
}

/// Runs the split-canvas protocol for one guidance setting. Prompt `i`
/// samples with seed `base_seed + i`; results are order-independent of
/// the worker count.
fn run_protocol(
    ckpt: &Checkpoint,
    schedule: &NoiseSchedule,
    prompts: &[VisorPrompt],
    mode: Mode,
    resolved: &Resolved,
    pool: &rayon::ThreadPool,
) -> Result<MetricsReport, Failure> {
    let samples: Result<Vec<VisorSample>, Failure> = pool.install(|| {
        prompts
            .par_iter()
            .enumerate()
            .map(|(i, vp)| {
                let caption = vp.caption();
                let prompt = ckpt.vocabulary.tokenize(&caption).invalid()?;
                let targets = visor_targets(&prompt, vp);
                let sampler = SamplerConfig {
                    seed: resolved.sampler.seed.wrapping_add(i as u64),
                    ..resolved.sampler
                };
                let output =
                    sample_once(ckpt, schedule, &prompt, mode, &targets, resolved, &sampler)?;
                let [subject, object] = vp.layout();
                Ok(VisorSample {
                    image: output.image,
                    subject,
                    object,
                    relation: vp.relation,
                })
            })
            .collect()
    });
    visor_evaluate(&samples?).runtime()
}

fn build_pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building worker pool")
        .runtime()
}

fn require_trained(ckpt: &Checkpoint) -> Result<(), Failure> {
    if !ckpt.is_trained() {
        return Err(Failure::Invalid(anyhow!(
            "checkpoint is untrained (training step 0); train it before evaluating"
        )));
    }
    Ok(())
}

pub fn cmd_eval_visor(args: &EvalArgs) -> CmdResult {
    let resolved = args.flags.load().invalid()?.resolve().invalid()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    require_trained(&ckpt)?;
    let schedule = ckpt.schedule().invalid()?;
    let exclude = args.exclude_held_out.then_some(DEFAULT_HELD_OUT);
    let prompts =
        sample_visor_prompts(args.n_prompts, resolved.sampler.seed, exclude).invalid()?;
    let pool = build_pool(args.jobs)?;

    let mut modes = Vec::new();
    if args.compare && args.mode != Mode::None {
        modes.push(Mode::None);
    }
    modes.push(args.mode);

    let mut reports: BTreeMap<&str, MetricsReport> = BTreeMap::new();
    for mode in modes {
        let report = run_protocol(&ckpt, &schedule, &prompts, mode, &resolved, &pool)?;
        println!("mode {}\n{}", mode.name(), report.table());
        reports.insert(mode.name(), report);
    }
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&reports).runtime()?;
        write_atomic(path, json.as_bytes()).runtime()?;
        println!("{}", path.display());
    }
    Ok(())
}

/// The backward-guidance layer subsets of the layer-ablation study.
pub const LAYER_SWEEP: [&[LayerId]; 12] = [
    &[LayerId::Down1, LayerId::Down2, LayerId::Down3],
    &[LayerId::Down1],
    &[LayerId::Down2],
    &[LayerId::Down3],
    &[LayerId::Mid1],
    &[LayerId::Mid1, LayerId::Up1],
    &[LayerId::Mid1, LayerId::Up2],
    &[LayerId::Mid1, LayerId::Up3],
    &[LayerId::Up1, LayerId::Up2, LayerId::Up3],
    &[LayerId::Up1],
    &[LayerId::Up2],
    &[LayerId::Up3],
];

/// The loss-scale sweep of the eta-ablation study.
pub const ETA_SWEEP: [f64; 8] = [5.0, 10.0, 20.0, 30.0, 50.0, 100.0, 200.0, 500.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Sweep {
    Layers,
    Eta,
}

pub struct AblateArgs {
    pub checkpoint: PathBuf,
    pub sweep: Sweep,
    pub n_prompts: usize,
    pub jobs: usize,
    pub out: PathBuf,
    pub exclude_held_out: bool,
    pub flags: RunFlags,
}

pub fn cmd_ablate(args: &AblateArgs) -> CmdResult {
    let resolved = args.flags.load().invalid()?.resolve().invalid()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    require_trained(&ckpt)?;
    let schedule = ckpt.schedule().invalid()?;
    let exclude = args.exclude_held_out.then_some(DEFAULT_HELD_OUT);
    let prompts =
        sample_visor_prompts(args.n_prompts, resolved.sampler.seed, exclude).invalid()?;
    let pool = build_pool(args.jobs)?;

    let settings: Vec<(String, BackwardConfig)> = match args.sweep {
        Sweep::Layers => LAYER_SWEEP
            .iter()
            .map(|layers| {
                let label = layers
                    .iter()
                    .map(|l| l.name())
                    .collect::<Vec<_>>()
                    .join("+");
                (label, BackwardConfig { layers: layers.to_vec(), ..resolved.backward.clone() })
            })
            .collect(),
        Sweep::Eta => ETA_SWEEP
            .iter()
            .map(|&eta| (format!("{eta}"), BackwardConfig { eta, ..resolved.backward.clone() }))
            .collect(),
    };

    let mut rows = Vec::with_capacity(settings.len());
    for (label, backward) in settings {
        let row_resolved = Resolved { backward, ..resolved.clone() };
        let report =
            run_protocol(&ckpt, &schedule, &prompts, Mode::Backward, &row_resolved, &pool)?;
        println!(
            "{label}: OA {:.4} visor_uncond {:.4} visor_cond {} mAP {:.4}",
            report.oa,
            report.visor_uncond,
            report
                .visor_cond
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "undefined".into()),
            report.map
        );
        rows.push((
            label,
            vec![
                Some(report.oa),
                Some(report.visor_uncond),
                report.visor_cond,
                Some(report.map),
            ],
        ));
    }
    let csv = metrics_csv(&["setting", "oa", "visor_uncond", "visor_cond", "map"], &rows);
    write_atomic(&args.out, csv.as_bytes()).runtime()?;
    println!("{}", args.out.display());
    Ok(())
}

// ── word-drop ────────────────────────────────────────────────────────────────

pub struct WordDropArgs {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub out_dir: PathBuf,
    pub flags: RunFlags,
}

pub fn cmd_word_drop(args: &WordDropArgs) -> CmdResult {
    let resolved = args.flags.load().invalid()?.resolve().invalid()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let schedule = ckpt.schedule().invalid()?;
    let prompt = ckpt.vocabulary.tokenize(&args.prompt).invalid()?;
    let slots = ckpt.concept_slots(&prompt).invalid()?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))
        .invalid()?;

    let inputs = SampleInputs {
        params: &ckpt.params,
        config: &ckpt.model,
        prompt: &prompt,
        concepts: &slots,
    };
    let context = encode_prompt(&ckpt.params, &ckpt.model, &prompt, &slots).runtime()?;
    let dropped_context = substitute_word_embeddings(&context, &prompt).runtime()?;

    let full =
        sample_with_context(&inputs, &context, &schedule, &resolved.sampler, None).runtime()?;
    let dropped =
        sample_with_context(&inputs, &dropped_context, &schedule, &resolved.sampler, None)
            .runtime()?;

    let full_path = args.out_dir.join("full.png");
    let dropped_path = args.out_dir.join("word-dropped.png");
    write_png(&full_path, &full.image).runtime()?;
    write_png(&dropped_path, &dropped.image).runtime()?;

    for (tag, image) in [("full", &full.image), ("word-dropped", &dropped.image)] {
        let classes: Vec<String> = detect(image)
            .iter()
            .map(|d| format!("{} ({:.2})", d.class_name(), d.score))
            .collect();
        println!(
            "{tag}: {}",
            if classes.is_empty() { "no detections".into() } else { classes.join(", ") }
        );
    }
    println!("{}", full_path.display());
    println!("{}", dropped_path.display());
    Ok(())
}

// ── invert / edit ────────────────────────────────────────────────────────────

pub struct InvertArgs {
    pub checkpoint: PathBuf,
    pub images: Vec<PathBuf>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub inversion_steps: Option<usize>,
    pub finetune_steps: Option<usize>,
    pub inversion_lr: Option<f64>,
    pub finetune_lr: Option<f64>,
    pub symbol: Option<String>,
    pub template: Option<String>,
    pub seed: Option<u64>,
}

fn edit_config(args: &InvertArgs) -> Result<EditConfig, Failure> {
    let mut ecfg: EditConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .invalid()?;
            serde_json::from_str(&text)
                .with_context(|| format!("config {}", path.display()))
                .invalid()?
        }
        None => EditConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = args.$f.clone() { ecfg.$f = v; } )* };
    }
    over!(inversion_steps, finetune_steps, inversion_lr, finetune_lr, symbol, template, seed);
    ecfg.validate().invalid()?;
    Ok(ecfg)
}

pub fn cmd_invert(args: &InvertArgs) -> CmdResult {
    let ecfg = edit_config(args)?;
    if args.images.is_empty() || args.images.len() > 5 {
        return Err(Failure::Invalid(anyhow!(
            "--images takes 1 to 5 example images, got {}",
            args.images.len()
        )));
    }
    let mut ckpt = load_checkpoint(&args.checkpoint)?;
    let schedule = ckpt.schedule().invalid()?;
    let images: Vec<(String, image::RgbImage)> = args
        .images
        .iter()
        .map(|path| {
            let img = image::open(path)
                .with_context(|| format!("reading image {}", path.display()))?
                .to_rgb8();
            Ok((path.display().to_string(), img))
        })
        .collect::<anyhow::Result<_>>()
        .invalid()?;

    let token = invert_concept(
        &ckpt.params,
        &ckpt.model,
        &schedule,
        &mut ckpt.vocabulary,
        &images,
        &ecfg,
    )
    .runtime()?;
    println!(
        "inverted {} over {} steps on {} images",
        token.symbol,
        token.steps,
        images.len()
    );
    if ecfg.finetune_steps > 0 {
        ckpt.params = finetune(
            &ckpt.params,
            &ckpt.model,
            &schedule,
            &ckpt.vocabulary,
            &images,
            &token,
            &ecfg,
        )
        .runtime()?;
        println!("fine-tuned model for {} steps", ecfg.finetune_steps);
    }
    ckpt.concepts.retain(|t| t.symbol != token.symbol);
    ckpt.concepts.push(token);
    ckpt.save(&args.out)
        .with_context(|| format!("saving checkpoint {}", args.out.display()))
        .runtime()?;
    println!("{}", args.out.display());
    Ok(())
}

pub struct EditArgs {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub layout: Option<String>,
    pub mode: Mode,
    pub out: PathBuf,
    pub flags: RunFlags,
}

pub fn cmd_edit(args: &EditArgs) -> CmdResult {
    let resolved = args.flags.load().invalid()?.resolve().invalid()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let schedule = ckpt.schedule().invalid()?;
    let targets = match &args.layout {
        Some(arg) => read_layout(arg, &ckpt.vocabulary)?,
        None => Vec::new(),
    };
    // Validate the prompt before running (edit_layout tokenizes again).
    ckpt.vocabulary.tokenize(&args.prompt).invalid()?;

    let forward = (!targets.is_empty() && args.mode.uses_forward())
        .then(|| resolved.forward.clone());
    let backward = (!targets.is_empty() && args.mode.uses_backward())
        .then(|| resolved.backward.clone());
    let output = edit_layout(
        &ckpt.params,
        &ckpt.model,
        &schedule,
        &ckpt.vocabulary,
        &ckpt.concepts,
        &args.prompt,
        &targets,
        forward,
        backward,
        &resolved.sampler,
    )
    .runtime()?;
    write_png(&args.out, &output.image).runtime()?;
    println!("{}", args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_sweep_matches_the_study_tables() {
        assert_eq!(LAYER_SWEEP.len(), 12);
        assert_eq!(ETA_SWEEP.len(), 8);
        // Each subset is nonempty, sorted, and unique.
        let mut seen = std::collections::HashSet::new();
        for subset in LAYER_SWEEP {
            assert!(!subset.is_empty());
            assert!(subset.windows(2).all(|w| w[0] < w[1]));
            assert!(seen.insert(subset.to_vec()));
        }
        assert!(ETA_SWEEP.windows(2).all(|w| w[0] < w[1]));
        assert!(ETA_SWEEP.contains(&30.0), "paper default must be swept");
    }

    #[test]
    fn visor_targets_pick_color_and_shape_positions() {
        let vocab = layoutdiff::text::Vocabulary::core();
        let prompts = sample_visor_prompts(5, 3, None).unwrap();
        for vp in &prompts {
            let prompt = vocab.tokenize(&vp.caption()).unwrap();
            let targets = visor_targets(&prompt, vp);
            assert_eq!(targets.len(), 2);
            let color_id = |c: layoutdiff::dataset::ColorName| {
                vocab.id(&c.to_string()).unwrap()
            };
            let shape_id = |s: layoutdiff::dataset::ShapeKind| {
                vocab.id(&s.to_string()).unwrap()
            };
            let want_subject = vec![color_id(vp.subject.1), shape_id(vp.subject.0)];
            let want_object = vec![color_id(vp.object.1), shape_id(vp.object.0)];
            for (target, want) in targets.iter().zip([want_subject, want_object]) {
                match &target.selector {
                    TokenSelector::Indices(idx) => {
                        let got: Vec<usize> = idx.iter().map(|&i| prompt.ids[i]).collect();
                        assert_eq!(got, want);
                    }
                    other => panic!("unexpected selector {other:?}"),
                }
            }
        }
    }
}
