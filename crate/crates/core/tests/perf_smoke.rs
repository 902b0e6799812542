//! Manual performance smoke checks (ignored by default; run with
//! `cargo test --test perf_smoke -- --ignored --nocapture`).

use layoutdiff::model::{bind, denoise, encode, ModelConfig, ModelParams};
use layoutdiff::tensor::{Tape, Tensor};
use layoutdiff::text::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
#[ignore]
fn denoiser_eval_cost() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0);
    let vocab = Vocabulary::core();
    let prompt = vocab.tokenize("a red circle above a blue square").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z0 = Tensor::randn(vec![3, 32, 32], &mut rng);

    // Forward-only (sampling mode).
    let reps = 20;
    let start = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::no_grad();
        let bound = bind(&mut tape, &params, false);
        let ctx = encode(&mut tape, &bound, &cfg.encoder, &prompt, &[]).unwrap();
        let z = tape.leaf(z0.clone());
        let out = denoise(&mut tape, &bound, &cfg.unet, z, 250, ctx, None).unwrap();
        assert_eq!(tape.shape_of(out.eps), &[3, 32, 32]);
    }
    let fwd = start.elapsed().as_secs_f64() / reps as f64;

    // Forward + backward (training mode).
    let reps_b = 10;
    let start = Instant::now();
    for _ in 0..reps_b {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, true);
        let ctx = encode(&mut tape, &bound, &cfg.encoder, &prompt, &[]).unwrap();
        let z = tape.leaf(z0.clone());
        let out = denoise(&mut tape, &bound, &cfg.unet, z, 250, ctx, None).unwrap();
        let sq = tape.square(out.eps).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let _ = tape.backward(loss).unwrap();
    }
    let bwd = start.elapsed().as_secs_f64() / reps_b as f64;

    println!("forward eval: {:.1} ms", fwd * 1e3);
    println!("forward+backward: {:.1} ms", bwd * 1e3);
}

#[test]
#[ignore]
fn op_costs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q0 = Tensor::randn(vec![1024, 4], &mut rng);
    let k0 = Tensor::randn(vec![4, 1024], &mut rng);
    let a0 = Tensor::randn(vec![1024, 1024], &mut rng);
    let v0 = Tensor::randn(vec![1024, 4], &mut rng);
    let img = Tensor::randn(vec![8, 32, 32], &mut rng);
    let cw = Tensor::randn_scaled(vec![8, 8, 3, 3], 0.1, &mut rng);
    let cb = Tensor::zeros(vec![8]);
    let gamma = Tensor::ones(vec![8]);
    let beta = Tensor::zeros(vec![8]);

    let time = |label: &str, mut f: Box<dyn FnMut(&mut Tape)>| {
        let reps = 50;
        let start = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::no_grad();
            f(&mut tape);
        }
        println!("{label}: {:.3} ms", start.elapsed().as_secs_f64() / reps as f64 * 1e3);
    };

    let (q, k, a, v) = (q0.clone(), k0.clone(), a0.clone(), v0.clone());
    time("qk matmul (1024,4)@(4,1024)", Box::new(move |t| {
        let x = t.leaf(q.clone());
        let y = t.leaf(k.clone());
        t.matmul(x, y).unwrap();
    }));
    let a1 = a0.clone();
    time("softmax rows 1024x1024", Box::new(move |t| {
        let x = t.leaf(a1.clone());
        t.softmax(x, 1).unwrap();
    }));
    let (a2, v2) = (a.clone(), v.clone());
    time("av matmul (1024,1024)@(1024,4)", Box::new(move |t| {
        let x = t.leaf(a2.clone());
        let y = t.leaf(v2.clone());
        t.matmul(x, y).unwrap();
    }));
    let a3 = a0.clone();
    time("leaf push 1024x1024 (clone+scan)", Box::new(move |t| {
        t.leaf(a3.clone());
    }));
    let (i1, w1, b1) = (img.clone(), cw.clone(), cb.clone());
    time("conv3x3 8->8 @32x32", Box::new(move |t| {
        let x = t.leaf(i1.clone());
        let w = t.leaf(w1.clone());
        let b = t.leaf(b1.clone());
        t.conv3x3(x, w, Some(b)).unwrap();
    }));
    let (i2, g2, be2) = (img.clone(), gamma.clone(), beta.clone());
    time("group_norm (8,32,32)", Box::new(move |t| {
        let x = t.leaf(i2.clone());
        let g = t.leaf(g2.clone());
        let b = t.leaf(be2.clone());
        t.group_norm(x, g, b, 4, 1e-5).unwrap();
    }));
    let i3 = img.clone();
    time("silu (8,32,32)", Box::new(move |t| {
        let x = t.leaf(i3.clone());
        t.silu(x).unwrap();
    }));
}
