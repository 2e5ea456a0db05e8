//! Central finite-difference checking of analytic gradients.
//!
//! The checker only ever evaluates the forward function, so it is independent
//! of every adjoint it validates.

use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, Var};

/// Denominator floor of the relative error; below it the comparison is
/// effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `d f / d inputs` from [`Graph::backward`] with central
/// differences of step `h`.
///
/// `f` receives one trainable leaf per input and must return a scalar.
/// When `max_coords` is `Some(m)`, at most `m` coordinates per input are
/// checked, drawn deterministically from `seed`.
pub fn check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = SplitMix64::new(seed);
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.numel() => (0..m).map(|_| rng.below(input.numel())).collect(),
            _ => (0..input.numel()).collect(),
        };
        for j in coords {
            let original = input.data()[j];
            probe[i].data_mut()[j] = original + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = original - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces an arbitrary-shaped output to a scalar with fixed pseudo-random
/// weights so every output element contributes a distinct adjoint.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed);
    let shape = g.shape(x).to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.range(-1.0, 1.0));
    let w = g.constant(w);
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

/// Tensor of uniform draws in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| rng.range(lo, hi))
}
