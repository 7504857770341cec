//! Central finite-difference gradient checking, shared by unit tests.
//! The differentiated scalar is read through its f64 shadow so the check is
//! limited by the step size, not by f32 rounding of the loss.

use super::{GradTape, Tensor};
use rand::Rng;

/// Builds random tensors in [-1, 1) for the given shapes.
pub fn random_inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor> {
    let mut rng = crate::util::rng(seed);
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            Tensor::new(s, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect()
}

/// Compares the tape gradient of `f` against central finite differences at
/// step `h`, for every input. Returns the worst vector-relative error
/// max_i ||g_tape - g_fd||_2 / max(||g_fd||_2, 1e-9).
pub fn finite_diff_error<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut GradTape, &[Tensor]) -> Tensor,
{
    // Analytic pass.
    let mut tape = GradTape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &leaves);
    let mut grads = tape.backward(&loss).expect("backward");
    let analytic: Vec<Vec<f32>> = leaves.iter().map(|l| grads.take_or_zeros(l)).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = GradTape::new();
        f(&mut tape, xs).item_f64()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut diff_sq = 0.0f64;
        let mut fd_sq = 0.0f64;
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut dp = input.data().to_vec();
            let mut dm = input.data().to_vec();
            dp[j] = (dp[j] as f64 + h) as f32;
            dm[j] = (dm[j] as f64 - h) as f32;
            plus[i] = Tensor::new(input.shape(), dp).unwrap();
            minus[i] = Tensor::new(input.shape(), dm).unwrap();
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let d = analytic[i][j] as f64 - fd;
            diff_sq += d * d;
            fd_sq += fd * fd;
        }
        worst = worst.max(diff_sq.sqrt() / fd_sq.sqrt().max(1e-9));
    }
    worst
}

/// Asserts the finite-difference check passes over several seeds.
pub fn assert_grad_matches<F>(shapes: &[&[usize]], seeds: &[u64], h: f64, tol: f64, f: F)
where
    F: Fn(&mut GradTape, &[Tensor]) -> Tensor,
{
    for &seed in seeds {
        let inputs = random_inputs(shapes, seed);
        let err = finite_diff_error(&inputs, h, &f);
        assert!(err < tol, "finite-difference mismatch: rel err {err:.3e} at seed {seed}");
    }
}
