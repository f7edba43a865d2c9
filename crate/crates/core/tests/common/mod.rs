//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

pub mod loss_oracles;
pub mod op_cases;

use gabn::{Tape, Targets, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Scale-normalized maximum deviation between two gradients:
/// `max_i |a_i - b_i| / max(max_i |b_i|, 1e-6)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central differences of `f` at `x`.
pub fn central_differences(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Checks the gradient of `sum(build(x) * r)` with respect to `x` for a
/// random projection `r`, over `draws` random points. Returns the worst
/// relative error seen.
pub fn check_input_gradient(
    shape: &[usize],
    draws: usize,
    seed: u64,
    sample: impl Fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
    build: impl Fn(&mut Tape<f64>, Var) -> Var,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let x = sample(&mut rng, n);
        // output shape from a probe evaluation
        let mut probe = Tape::new();
        let pv = probe.input(Tensor::new(shape.to_vec(), x.clone()).unwrap());
        let out = build(&mut probe, pv);
        let out_shape = probe.shape(out).to_vec();
        let r = Tensor::new(
            out_shape.clone(),
            uniform(&mut rng, out_shape.iter().product(), -1.0, 1.0),
        )
        .unwrap();

        let objective = |xs: &[f64]| -> (Tape<f64>, Var) {
            let mut tape = Tape::new();
            let xv = tape.input(Tensor::new(shape.to_vec(), xs.to_vec()).unwrap());
            let out = build(&mut tape, xv);
            let rv = tape.constant(r.clone());
            let prod = tape.mul(out, rv).unwrap();
            let obj = tape.sum(prod);
            (tape, obj)
        };

        let (tape, obj) = objective(&x);
        let analytic = tape.backward(obj, Targets::INPUT).unwrap();
        let analytic = analytic.input().unwrap().data().to_vec();
        let numeric = central_differences(&x, |xs| {
            let (t, o) = objective(xs);
            t.value(o).item().unwrap()
        });
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Uniform samples in `[-1, 1]` pushed away from zero so kinks are never
/// straddled by a finite-difference step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Distinct values (a shuffled, jittered ramp) so max reductions have a
/// margin far above the finite-difference step.
pub fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|i| i as f64 / n as f64 * 2.0 - 1.0 + rng.gen_range(0.0..0.2 / n as f64))
        .collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}
