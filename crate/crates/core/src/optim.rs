//! Deterministic full-batch minimization for the convex probes.
//!
//! Wraps argmin's L-BFGS. When its line search gives up (typical near a
//! flat optimum) the run falls back to gradient descent with Armijo
//! backtracking from the best point seen so far.

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Minimized {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: u64,
    /// Gradient norm reached the tolerance within the budget.
    pub converged: bool,
}

struct Problem<'a> {
    f: &'a dyn Fn(&[f64]) -> (f64, Vec<f64>),
}

impl CostFunction for Problem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok((self.f)(p).0)
    }
}

impl Gradient for Problem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok((self.f)(p).1)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_descent(
    f: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    mut x: Vec<f64>,
    grad_tol: f64,
    max_iters: u64,
) -> Minimized {
    let (mut fx, mut g) = f(&x);
    let mut step = 1.0;
    let mut it = 0;
    while it < max_iters && norm(&g) > grad_tol {
        let g2: f64 = g.iter().map(|v| v * v).sum();
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
            let (fc, gc) = f(&cand);
            if fc <= fx - 1e-4 * step * g2 {
                x = cand;
                fx = fc;
                g = gc;
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        it += 1;
        if !accepted {
            break;
        }
    }
    let grad_norm = norm(&g);
    Minimized {
        x,
        value: fx,
        grad_norm,
        iterations: it,
        converged: grad_norm <= grad_tol,
    }
}

/// Minimizes `f`, which returns the value and gradient at a point.
pub fn minimize(
    f: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    x0: Vec<f64>,
    grad_tol: f64,
    max_iters: u64,
) -> Result<Minimized> {
    let (f0, g0) = f(&x0);
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective at the starting point".into()));
    }
    if norm(&g0) <= grad_tol {
        return Ok(Minimized {
            x: x0,
            value: f0,
            grad_norm: norm(&g0),
            iterations: 0,
            converged: true,
        });
    }
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
        .with_tolerance_grad(grad_tol)
        .and_then(|s| s.with_tolerance_cost(0.0))
        .map_err(|e| Error::NonFinite(e.to_string()))?;
    let run = Executor::new(Problem { f }, solver)
        .configure(|st| st.param(x0.clone()).max_iters(max_iters))
        .run();
    let (mut best, used) = match run {
        Ok(res) => {
            let used = res.state.get_iter();
            let x = res.state.get_best_param().cloned().unwrap_or_else(|| x0.clone());
            (x, used)
        }
        Err(_) => (x0.clone(), 0),
    };
    let (mut fb, gb) = f(&best);
    if !(fb <= f0) {
        best = x0;
        fb = f0;
    }
    let gn = norm(&gb);
    if gn <= grad_tol && fb.is_finite() {
        return Ok(Minimized {
            x: best,
            value: fb,
            grad_norm: gn,
            iterations: used,
            converged: true,
        });
    }
    let mut out = gradient_descent(f, best, grad_tol, max_iters.saturating_sub(used).max(1));
    out.iterations += used;
    if !out.value.is_finite() {
        return Err(Error::NonFinite("objective during minimization".into()));
    }
    Ok(out)
}
