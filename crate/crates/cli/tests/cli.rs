//! End-to-end tests driving the compiled binary: every pipeline stage,
//! exit-code contract, and rerun determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_layoutdiff")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should launch")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails_with(args: &[&str], code: i32) -> Output {
    let out = run(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {:?} should exit {code}\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(
        !out.stderr.is_empty(),
        "failures must report on the error stream"
    );
    out
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// make-data + a 2-step training run: the shared fixture for command tests.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let ckpt = dir.join("model.ckpt");
    ok(&["make-data", "--n", "12", "--seed", "1", "--out", &path_str(&data)]);
    ok(&[
        "train",
        "--data",
        &path_str(&data),
        "--out",
        &path_str(&ckpt),
        "--total-steps",
        "2",
        "--batch-size",
        "2",
        "--seed",
        "0",
    ]);
    (data, ckpt)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("reading {}: {e}", p.display()))
}

#[test]
fn make_data_and_train_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let d1 = dir.join("d1");
    let d2 = dir.join("d2");
    ok(&["make-data", "--n", "12", "--seed", "1", "--out", &path_str(&d1)]);
    ok(&["make-data", "--n", "12", "--seed", "1", "--out", &path_str(&d2)]);
    let mut names: Vec<String> = std::fs::read_dir(&d1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".png")).count(), 12);
    assert!(names.contains(&"train.jsonl".to_string()));
    assert!(names.contains(&"val.jsonl".to_string()));
    for name in &names {
        assert_eq!(read(&d1.join(name)), read(&d2.join(name)), "{name} differs");
    }

    // Same training args twice: byte-identical checkpoints and loss logs.
    let (c1, c2) = (dir.join("m1.ckpt"), dir.join("m2.ckpt"));
    for c in [&c1, &c2] {
        ok(&[
            "train",
            "--data",
            &path_str(&d1),
            "--out",
            &path_str(c),
            "--total-steps",
            "2",
            "--batch-size",
            "2",
        ]);
    }
    assert_eq!(read(&c1), read(&c2));
    let log1 = String::from_utf8(read(&dir.join("m1.loss.csv"))).unwrap();
    assert_eq!(log1, String::from_utf8(read(&dir.join("m2.loss.csv"))).unwrap());
    let lines: Vec<&str> = log1.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 3, "2 steps, 2 rows: {log1:?}");
    assert!(lines[1].starts_with("1,"));
    assert!(lines[2].starts_with("2,"));

    // Resuming continues the step counter.
    let c3 = dir.join("m3.ckpt");
    ok(&[
        "train",
        "--data",
        &path_str(&d1),
        "--resume",
        &path_str(&c1),
        "--out",
        &path_str(&c3),
        "--total-steps",
        "4",
        "--batch-size",
        "2",
    ]);
    let log3 = String::from_utf8(read(&dir.join("m3.loss.csv"))).unwrap();
    let lines: Vec<&str> = log3.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("3,"), "resume must continue counting: {log3:?}");
    assert!(lines[2].starts_with("4,"));

    // Unwritable output: nonzero exit, message on stderr.
    let out = run(&[
        "make-data",
        "--n",
        "1",
        "--seed",
        "0",
        "--out",
        "/proc/definitely-unwritable/x",
    ]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn sample_modes_layouts_and_attention_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (_data, ckpt) = fixture(dir);
    let ckpt = path_str(&ckpt);
    let layout = r#"[{"token": "circle", "box": [0, 0, 0.5, 1]}]"#;

    let base: Vec<String> = ["--checkpoint", &ckpt, "--prompt", "a red circle", "--steps", "3"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let sample = |extra: &[&str]| {
        let mut args: Vec<String> = vec!["sample".into()];
        args.extend(base.clone());
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        ok(&refs);
    };

    // Without a layout, every mode walks identically.
    let (none, od) = (dir.join("none.png"), dir.join("bwd-nolayout.png"));
    sample(&["--mode", "none", "--out", &path_str(&none)]);
    sample(&["--mode", "backward", "--out", &path_str(&od)]);
    assert_eq!(read(&none), read(&od), "no layout means no guidance");

    // With a layout, guided output differs; rerun is byte-identical.
    let guided = dir.join("guided.png");
    sample(&["--mode", "backward", "--layout", layout, "--out", &path_str(&guided)]);
    assert_ne!(read(&none), read(&guided));
    let again = dir.join("guided2.png");
    sample(&["--mode", "backward", "--layout", layout, "--out", &path_str(&again)]);
    assert_eq!(read(&guided), read(&again));

    // Attention dump: steps x 7 layers x 16 tokens PGM files.
    let attn = dir.join("attn");
    sample(&[
        "--mode",
        "forward",
        "--layout",
        layout,
        "--out",
        &path_str(&dir.join("fwd.png")),
        "--dump-attn",
        &path_str(&attn),
    ]);
    let pgms: Vec<String> = std::fs::read_dir(&attn)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(pgms.len(), 3 * 7 * 16);
    assert!(pgms.iter().all(|n| n.ends_with(".pgm")));
    assert!(pgms.iter().any(|n| n == "step000-mid-1-tok03.pgm"));

    // Invalid layout JSON: exit 2 with a parse location.
    let bad = fails_with(
        &[
            "sample",
            "--checkpoint",
            &ckpt,
            "--prompt",
            "a red circle",
            "--layout",
            r#"[{"token": "circle", "box": [0, 0"#,
            "--mode",
            "backward",
        ],
        2,
    );
    let msg = String::from_utf8_lossy(&bad.stderr).to_lowercase();
    assert!(msg.contains("line") && msg.contains("column"), "{msg}");

    // Unknown caption word: exit 2. Unknown flag value: clap's exit 2.
    fails_with(&["sample", "--checkpoint", &ckpt, "--prompt", "a purple circle"], 2);
    fails_with(
        &["sample", "--checkpoint", &ckpt, "--prompt", "a red circle", "--mode", "sideways"],
        2,
    );
    // Missing checkpoint file: exit 2.
    fails_with(
        &["sample", "--checkpoint", &path_str(&dir.join("nope.ckpt")), "--prompt", "a red circle"],
        2,
    );
}

#[test]
fn eval_visor_and_ablate_emit_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (data, ckpt) = fixture(dir);
    let ckpt_s = path_str(&ckpt);

    let metrics = dir.join("metrics.json");
    let out = ok(&[
        "eval-visor",
        "--checkpoint",
        &ckpt_s,
        "--n-prompts",
        "2",
        "--mode",
        "backward",
        "--compare",
        "--steps",
        "2",
        "--jobs",
        "2",
        "--out",
        &path_str(&metrics),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mode none"), "{stdout}");
    assert!(stdout.contains("mode backward"), "{stdout}");
    let json: serde_json::Value = serde_json::from_slice(&read(&metrics)).unwrap();
    assert!(json.get("none").is_some() && json.get("backward").is_some());
    assert_eq!(json["backward"]["n"], 2);

    // n_prompts = 0 is invalid input.
    fails_with(
        &["eval-visor", "--checkpoint", &ckpt_s, "--n-prompts", "0", "--steps", "2"],
        2,
    );

    // An untrained checkpoint is flagged.
    let fresh = dir.join("fresh.ckpt");
    ok(&[
        "train",
        "--data",
        &path_str(&data),
        "--out",
        &path_str(&fresh),
        "--total-steps",
        "0",
    ]);
    let out = fails_with(
        &["eval-visor", "--checkpoint", &path_str(&fresh), "--n-prompts", "1", "--steps", "2"],
        2,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("untrained"));

    // Eta sweep: 8 rows; layer sweep: 12 rows; reruns identical.
    let eta_csv = dir.join("eta.csv");
    ok(&[
        "ablate",
        "--checkpoint",
        &ckpt_s,
        "--sweep",
        "eta",
        "--n-prompts",
        "1",
        "--steps",
        "2",
        "--out",
        &path_str(&eta_csv),
    ]);
    let eta = String::from_utf8(read(&eta_csv)).unwrap();
    let lines: Vec<&str> = eta.lines().collect();
    assert_eq!(lines[0], "setting,oa,visor_uncond,visor_cond,map");
    assert_eq!(lines.len(), 1 + 8, "{eta}");
    assert!(lines[1].starts_with("5,"));
    assert!(lines[8].starts_with("500,"));

    let layers_csv = dir.join("layers.csv");
    ok(&[
        "ablate",
        "--checkpoint",
        &ckpt_s,
        "--sweep",
        "layers",
        "--n-prompts",
        "1",
        "--steps",
        "2",
        "--jobs",
        "2",
        "--out",
        &path_str(&layers_csv),
    ]);
    let layers = String::from_utf8(read(&layers_csv)).unwrap();
    assert_eq!(layers.lines().count(), 1 + 12, "{layers}");
    assert!(layers.contains("mid-1+up-1,"));
}

#[test]
fn word_drop_invert_and_edit_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (data, ckpt) = fixture(dir);
    let ckpt_s = path_str(&ckpt);

    // Word drop: a pair sharing the seed, plus detector log lines.
    let pair = dir.join("pair");
    let out = ok(&[
        "word-drop",
        "--checkpoint",
        &ckpt_s,
        "--prompt",
        "a red circle",
        "--steps",
        "2",
        "--out-dir",
        &path_str(&pair),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("full:") && stdout.contains("word-dropped:"), "{stdout}");
    let full = read(&pair.join("full.png"));
    let dropped = read(&pair.join("word-dropped.png"));
    assert!(!full.is_empty() && !dropped.is_empty());

    // The empty caption has no word rows, so the pair is identical.
    let empty_pair = dir.join("empty-pair");
    ok(&[
        "word-drop",
        "--checkpoint",
        &ckpt_s,
        "--prompt",
        "",
        "--steps",
        "2",
        "--out-dir",
        &path_str(&empty_pair),
    ]);
    assert_eq!(
        read(&empty_pair.join("full.png")),
        read(&empty_pair.join("word-dropped.png"))
    );

    // Invert a concept from two dataset images, then edit with a layout.
    let imgs: Vec<String> = (0..2).map(|i| path_str(&data.join(format!("{i:06}.png")))).collect();
    let concept = dir.join("concept.ckpt");
    let out = ok(&[
        "invert",
        "--checkpoint",
        &ckpt_s,
        "--images",
        &imgs[0],
        &imgs[1],
        "--out",
        &path_str(&concept),
        "--inversion-steps",
        "2",
        "--finetune-steps",
        "1",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("inverted <*>"));

    let edited = dir.join("edited.png");
    ok(&[
        "edit",
        "--checkpoint",
        &path_str(&concept),
        "--prompt",
        "a photo of a <*>",
        "--layout",
        r#"[{"token": "<*>", "box": [0.5, 0, 1, 1]}]"#,
        "--mode",
        "backward",
        "--steps",
        "2",
        "--out",
        &path_str(&edited),
    ]);
    assert!(!read(&edited).is_empty());

    // Too many example images: invalid input.
    let six: Vec<String> = (0..6).map(|i| path_str(&data.join(format!("{i:06}.png")))).collect();
    let mut args: Vec<&str> =
        vec!["invert", "--checkpoint", &ckpt_s, "--images"];
    args.extend(six.iter().map(|s| s.as_str()));
    args.extend(["--out", "unused.ckpt", "--inversion-steps", "1"]);
    fails_with(&args, 2);
}
