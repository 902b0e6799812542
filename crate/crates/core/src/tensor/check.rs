//! Finite-difference verification of tape gradients.
//!
//! [`finite_difference_check`] builds a scalar function twice: once on a
//! gradient tape to get analytic gradients, then repeatedly on no-grad tapes
//! with single coordinates perturbed to form central differences. For large
//! inputs a deterministic random subset of coordinates is probed; small
//! inputs are swept exhaustively.

use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// Total number of coordinates probed across all inputs.
    pub coords_checked: usize,
    /// Largest |analytic - numeric| over the probed coordinates.
    pub max_abs_err: f64,
    /// Largest relative error, with a small-denominator floor.
    pub max_rel_err: f64,
}

/// Compares analytic gradients of `build` against central differences.
///
/// `build` must construct a scalar output from the given leaf nodes, one per
/// entry of `inputs`; it is called once per function evaluation and must be
/// deterministic. `max_coords_per_input = 0` sweeps every coordinate;
/// otherwise a seed-determined subset of that size is sampled per input.
pub fn finite_difference_check<F>(
    mut build: F,
    inputs: &[Tensor],
    eps: f64,
    max_coords_per_input: usize,
    seed: u64,
) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::InvalidShape {
            op: "finite_difference_check",
            shape: tape.shape_of(root).to_vec(),
            msg: "build must return a scalar".into(),
        });
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape_of(id).to_vec()))
        })
        .collect();

    let eval = |build: &mut F, inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let root = build(&mut tape, &ids)?;
        tape.value(root).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        coords_checked: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if max_coords_per_input == 0 || n <= max_coords_per_input {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, max_coords_per_input).into_vec()
        };
        for c in coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + eps;
            let plus = eval(&mut build, &work)?;
            work[i].data_mut()[c] = orig - eps;
            let minus = eval(&mut build, &work)?;
            work[i].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[i].data()[c];
            let abs = (numeric - exact).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(1e-6);
            report.coords_checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_survives_exhaustive_sweep() {
        let x = Tensor::new(vec![5], vec![0.4, -1.2, 2.0, 0.0, 3.3]).unwrap();
        let report = finite_difference_check(
            |tape, ids| {
                let sq = tape.square(ids[0])?;
                tape.sum_all(sq)
            },
            &[x],
            1e-5,
            0,
            0,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 5);
        assert!(report.max_abs_err < 1e-8, "{:?}", report);
    }

    #[test]
    fn nonlinear_chain_matches_finite_differences() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.8, 1.1, 0.0, 0.5, -1.6]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![0.7, -0.2, 0.4, 0.9, -1.1, 0.3]).unwrap();
        let report = finite_difference_check(
            |tape, ids| {
                let h = tape.matmul(ids[0], ids[1])?;
                let a = tape.silu(h)?;
                let sm = tape.softmax(a, 1)?;
                let sq = tape.square(sm)?;
                tape.mean_all(sq)
            },
            &[x, w],
            1e-5,
            0,
            0,
        )
        .unwrap();
        assert!(report.max_abs_err < 1e-7, "{:?}", report);
    }

    #[test]
    fn coordinate_subsampling_is_deterministic() {
        let x = Tensor::new(vec![100], (0..100).map(|i| (i as f64) * 0.01).collect()).unwrap();
        let run = |seed| {
            finite_difference_check(
                |tape, ids| {
                    let s = tape.silu(ids[0])?;
                    tape.sum_all(s)
                },
                std::slice::from_ref(&x),
                1e-5,
                7,
                seed,
            )
            .unwrap()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a.coords_checked, 7);
        assert_eq!(a.max_abs_err.to_bits(), b.max_abs_err.to_bits());
    }
}
