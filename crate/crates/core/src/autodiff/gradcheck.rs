//! Finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor so that tiny gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Largest relative error over all checked elements.
    pub max_rel_error: f64,
    /// Input index and flat element index where it occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `grad_fn` against central differences of `value_fn`.
///
/// Both closures receive the full set of inputs; `grad_fn` returns one
/// gradient vector per input.
pub fn gradcheck_fn(
    inputs: &[Vec<f64>],
    value_fn: impl Fn(&[Vec<f64>]) -> Result<f64>,
    grad_fn: impl Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let analytic = grad_fn(inputs)?;
    let mut probe = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance,
    };
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input[j];
            probe[i][j] = orig + FD_STEP;
            let plus = value_fn(&probe)?;
            probe[i][j] = orig - FD_STEP;
            let minus = value_fn(&probe)?;
            probe[i][j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = rel_error(analytic[i][j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Checks the gradients of a graph-built function.
///
/// `build` records an operation on the supplied input variables and returns
/// its output. The output is reduced to a scalar through a fixed random
/// projection (seeded by `seed`) so that every output element contributes.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    tolerance: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let run = |data: &[Vec<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(data.len());
        for (d, s) in data.iter().zip(&shapes) {
            vars.push(g.param(Tensor::from_vec(s, d.clone())?));
        }
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let flat: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let (g, _, out) = run(&flat)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    drop(g);

    let value_fn = |data: &[Vec<f64>]| -> Result<f64> {
        let (g, _, out) = run(data)?;
        Ok(g.value(out).data().iter().zip(&projection).map(|(a, b)| a * b).sum())
    };
    let grad_fn = |data: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        let (mut g, vars, out) = run(data)?;
        g.backward_with(out, projection.clone())?;
        Ok(vars
            .iter()
            .zip(data)
            .map(|(&v, d)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; d.len()]))
            .collect())
    };
    gradcheck_fn(&flat, value_fn, grad_fn, tolerance)
}
