//! Central finite-difference oracle, independent of the tape's backward rules.

use ndarray::{ArrayD, IxDyn};
use numcore::{Result, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Values bounded away from zero, so kinks (relu) are not straddled by the
/// finite-difference step.
pub fn random_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    random(shape, rng).mapv(|x| if x >= 0.0 { x + 0.05 } else { x - 0.05 })
}

fn norm(a: &ArrayD<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds `sum(f(inputs) * weights)` on a fresh tape and returns its value.
fn evaluate<G>(build: &G, inputs: &[ArrayD<f64>], weights: &ArrayD<f64>) -> f64
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.constant(x.clone()).unwrap())
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out)
        .iter()
        .zip(weights.iter())
        .map(|(a, b)| a * b)
        .sum()
}

/// Largest per-input relative error between the tape gradient and central
/// differences, measured as ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6).
pub fn max_relative_error<G>(build: G, inputs: &[ArrayD<f64>], seed: u64) -> f64
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.param(x.clone()).unwrap())
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let weights = random(tape.shape(out), &mut rng);
    let w = tape.constant(weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));
        let mut numeric = ArrayD::zeros(x.raw_dim());
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += STEP;
            minus[i].as_slice_mut().unwrap()[j] -= STEP;
            numeric.as_slice_mut().unwrap()[j] = (evaluate(&build, &plus, &weights)
                - evaluate(&build, &minus, &weights))
                / (2.0 * STEP);
        }
        let denom = norm(&analytic).max(norm(&numeric)).max(1e-6);
        worst = worst.max(norm(&(&analytic - &numeric)) / denom);
    }
    worst
}
