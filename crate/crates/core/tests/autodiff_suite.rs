//! End-to-end gradient verification: a composition that touches every
//! primitive in the tape, finite-difference checked over randomized inputs.

use layoutdiff::tensor::{finite_difference_check, NodeId, Tape, Tensor};
use layoutdiff::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds a scalar from eight inputs while exercising conv, group norm,
/// silu, both resamplers, reshape, transpose, embedding, matmul, bias add,
/// softmax, gather, mul, div, add_scalar, scale, concat, both axis sums,
/// full-tensor reductions and subtraction.
fn gauntlet(tape: &mut Tape, ids: &[NodeId]) -> Result<NodeId> {
    let [img, convw, convb, gamma, beta, table, wmat, bias] = ids else {
        panic!("expected 8 inputs");
    };
    let c = tape.conv3x3(*img, *convw, Some(*convb))?;
    let gn = tape.group_norm(c, *gamma, *beta, 3, 1e-5)?;
    let s = tape.silu(gn)?;
    let up = tape.upsample2x(s)?;
    let pool = tape.avgpool2x(up)?;
    let flat = tape.reshape(pool, vec![3, 16])?;
    let t = tape.transpose(flat)?;
    let m = tape.matmul(t, *wmat)?;
    let mb = tape.add_bias_rows(m, *bias)?;
    let sm = tape.softmax(mb, 1)?;
    let picked = tape.gather(sm, 0, &[0, 3, 7, 15])?;
    let emb = tape.embedding(*table, &[0, 2, 4, 2])?;
    let prod = tape.mul(picked, emb)?;
    let num = tape.add_scalar(prod, 2.0)?;
    let emb_sq = tape.square(emb)?;
    let den = tape.add_scalar(emb_sq, 1.0)?;
    let ratio = tape.div(num, den)?;
    let cat = tape.concat(&[ratio, emb])?;
    let col_sums = tape.sum_axis(cat, 0)?;
    let row_sums = tape.sum_axis(cat, 1)?;
    let half = tape.scale(col_sums, 0.5)?;
    let a = tape.sum_all(half)?;
    let b = tape.mean_all(row_sums)?;
    let diff = tape.sub(a, b)?;
    let total = tape.square(diff)?;
    let extra = tape.mean_all(cat)?;
    tape.add(total, extra)
}

fn gauntlet_inputs(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        Tensor::randn_scaled(vec![2, 4, 4], 0.8, &mut rng),
        Tensor::randn_scaled(vec![3, 2, 3, 3], 0.5, &mut rng),
        Tensor::randn_scaled(vec![3], 0.5, &mut rng),
        Tensor::randn_scaled(vec![3], 0.7, &mut rng),
        Tensor::randn_scaled(vec![3], 0.7, &mut rng),
        Tensor::randn_scaled(vec![5, 4], 0.8, &mut rng),
        Tensor::randn_scaled(vec![3, 4], 0.8, &mut rng),
        Tensor::randn_scaled(vec![4], 0.6, &mut rng),
    ]
}

#[test]
fn every_primitive_passes_finite_differences() {
    for seed in 0..10u64 {
        let inputs = gauntlet_inputs(seed);
        let report =
            finite_difference_check(gauntlet, &inputs, 1e-5, 0, seed).expect("sweep failed");
        assert!(
            report.max_abs_err < 1e-6,
            "seed {seed}: max abs err {:.3e} over {} coords",
            report.max_abs_err,
            report.coords_checked
        );
    }
}

#[test]
fn gauntlet_replay_is_bit_identical() {
    let run = || {
        let inputs = gauntlet_inputs(123);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.into_iter().map(|t| tape.param(t)).collect();
        let root = gauntlet(&mut tape, &ids).unwrap();
        let grads = tape.backward(root).unwrap();
        let mut flat = vec![tape.value(root).item().unwrap()];
        for id in ids {
            flat.extend_from_slice(grads.get(id).unwrap().data());
        }
        flat
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn softmax_rows_normalize_across_random_matrices() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = 1 + (seed as usize % 5);
        let cols = 2 + (seed as usize % 7);
        let x = Tensor::randn_scaled(vec![rows, cols], 3.0, &mut rng);
        let mut tape = Tape::no_grad();
        let id = tape.param(x);
        let sm = tape.softmax(id, 1).unwrap();
        let v = tape.value(sm);
        for r in 0..rows {
            let s: f64 = v.data()[r * cols..(r + 1) * cols].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "seed {seed} row {r}: {s}");
        }
    }
}
