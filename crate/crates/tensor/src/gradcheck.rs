//! Finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand::rngs::StdRng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Analytic vs central-difference directional derivative.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-10);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Checks the gradient of the scalar `f(inputs)` along a random direction.
pub fn directional<F>(inputs: &[Tensor<f64>], f: F, eps: f64, seed: u64) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut rng = StdRng::seed_from_u64(seed);
    let dirs: Vec<Tensor<f64>> = inputs.iter().map(|t| Tensor::randn(t.shape(), 1.0, &mut rng)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let analytic = vars
        .iter()
        .zip(&dirs)
        .map(|(&v, d)| grads.wrt(v).map_or(0.0, |g| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum()))
        .sum();

    let eval = |sign: f64| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| tape.constant(t.zip_map(d, |x, y| x + sign * eps * y).unwrap()))
            .collect();
        let out = f(&mut tape, &vars);
        tape.item(out)
    };
    let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * eps);
    GradCheck { analytic, numeric }
}
