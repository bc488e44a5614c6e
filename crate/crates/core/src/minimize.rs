//! BFGS with Armijo backtracking.
//!
//! The inverse Hessian approximation is a dense `n × n` matrix starting
//! from the identity. The update is skipped whenever the curvature product
//! `sᵀy` is not safely positive. Trial points where the objective is not
//! finite count as failed Armijo tests, which keeps iterates inside the
//! domain of log-type objectives without explicit bounds. Once the step
//! is so short that `x + αd` rounds back to `x`, the search gives up: that
//! point would pass the test trivially and freeze the iteration.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions {
    /// Convergence when the max-norm of the gradient drops to this.
    pub grad_tol: f64,
    pub max_iterations: usize,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub initial_step: f64,
    pub max_backtracks: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            grad_tol: 1e-6,
            max_iterations: 1000,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            initial_step: 1.0,
            max_backtracks: 60,
        }
    }
}

impl MinimizeOptions {
    pub fn check(&self) -> Result<(), MinimizeError> {
        let ok = self.grad_tol > 0.0
            && self.max_iterations > 0
            && self.armijo_c > 0.0
            && self.armijo_c < 1.0
            && self.backtrack_factor > 0.0
            && self.backtrack_factor < 1.0
            && self.initial_step > 0.0
            && self.max_backtracks > 0;
        if ok {
            Ok(())
        } else {
            Err(MinimizeError::InvalidOptions)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
    /// The gradient source failed at an accepted point.
    GradientFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params_hat: Vec<f64>,
    pub nll_min: f64,
    pub n_iterations: usize,
    pub n_fn_evals: usize,
    pub n_grad_evals: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
    pub termination: Termination,
    /// Objective at the start point and after every accepted step.
    pub history: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MinimizeError {
    #[error("objective is not finite at the start point")]
    NonFiniteStart,
    #[error("gradient is not available or not finite at the start point")]
    NonFiniteStartGradient,
    #[error("invalid minimizer options")]
    InvalidOptions,
    #[error("search direction is not a descent direction (gᵀd = {0})")]
    NotDescent(f64),
    /// Carries the number of objective evaluations spent.
    #[error("no step satisfied the sufficient-decrease test after {0} objective evaluations")]
    BacktrackingExhausted(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchStep {
    pub alpha: f64,
    pub value: f64,
    pub point: Vec<f64>,
    pub n_evals: usize,
}

/// Backtracks from `opts.initial_step` until
/// `f(x + αd) ≤ f(x) + c·α·gᵀd`.
pub fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    fx: f64,
    direction: &[f64],
    grad: &[f64],
    opts: &MinimizeOptions,
) -> Result<LineSearchStep, MinimizeError>
where
    F: FnMut(&[f64]) -> f64,
{
    let slope = dot(grad, direction);
    if !(slope < 0.0) {
        return Err(MinimizeError::NotDescent(slope));
    }
    let mut alpha = opts.initial_step;
    let mut trial = vec![0.0; x.len()];
    let mut n_evals = 0;
    for _ in 0..=opts.max_backtracks {
        for ((t, &xi), &di) in trial.iter_mut().zip(x).zip(direction) {
            *t = xi + alpha * di;
        }
        if trial == x {
            break;
        }
        let value = objective(&trial);
        n_evals += 1;
        if value.is_finite() && value <= fx + opts.armijo_c * alpha * slope {
            return Ok(LineSearchStep { alpha, value, point: trial, n_evals });
        }
        alpha *= opts.backtrack_factor;
    }
    Err(MinimizeError::BacktrackingExhausted(n_evals))
}

/// Minimizes `objective` starting at `x0`.
///
/// `gradient` writes the gradient at its first argument into the second
/// and returns `false` if it cannot (a numerical-domain failure).
pub fn minimize<F, G>(mut objective: F, mut gradient: G, x0: &[f64], opts: &MinimizeOptions) -> Result<FitResult, MinimizeError>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64], &mut [f64]) -> bool,
{
    opts.check()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = objective(&x);
    let mut n_fn_evals = 1;
    if !fx.is_finite() {
        return Err(MinimizeError::NonFiniteStart);
    }
    let mut g = vec![0.0; n];
    let mut n_grad_evals = 1;
    if !gradient(&x, &mut g) || g.iter().any(|v| !v.is_finite()) {
        return Err(MinimizeError::NonFiniteStartGradient);
    }

    let mut h = identity(n);
    let mut d = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut hy = vec![0.0; n];
    let mut history = vec![fx];
    let mut n_iterations = 0;

    let termination = loop {
        if max_norm(&g) <= opts.grad_tol {
            break Termination::GradientTolerance;
        }
        if n_iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }

        mat_vec(&h, &g, &mut d);
        d.iter_mut().for_each(|v| *v = -*v);
        if !(dot(&g, &d) < 0.0) {
            // H lost positive definiteness numerically; fall back to steepest descent.
            h = identity(n);
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
        }

        let step = match line_search(&mut objective, &x, fx, &d, &g, opts) {
            Ok(step) => step,
            Err(MinimizeError::BacktrackingExhausted(k)) => {
                n_fn_evals += k;
                break Termination::LineSearchFailed;
            }
            Err(e) => return Err(e),
        };
        n_fn_evals += step.n_evals;
        n_iterations += 1;

        for i in 0..n {
            s[i] = step.point[i] - x[i];
        }
        x = step.point;
        fx = step.value;
        history.push(fx);

        n_grad_evals += 1;
        if !gradient(&x, &mut g_new) || g_new.iter().any(|v| !v.is_finite()) {
            break Termination::GradientFailed;
        }
        for i in 0..n {
            y[i] = g_new[i] - g[i];
        }
        std::mem::swap(&mut g, &mut g_new);

        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            bfgs_update(&mut h, &s, &y, sy, &mut hy);
        }
    };

    Ok(FitResult {
        final_grad_norm: max_norm(&g),
        converged: termination == Termination::GradientTolerance,
        params_hat: x,
        nll_min: fx,
        n_iterations,
        n_fn_evals,
        n_grad_evals,
        termination,
        history,
    })
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ` with `ρ = 1 / sᵀy`, expanded
/// for symmetric `H` to one matrix-vector product and a rank-two update.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, hy: &mut [f64]) {
    let n = s.len();
    let rho = 1.0 / sy;
    mat_vec(h, y, hy);
    let yhy = dot(y, hy);
    let coef = rho * rho * yhy + rho;
    for i in 0..n {
        let row = &mut h[i * n..(i + 1) * n];
        let (si, hyi) = (s[i], hy[i]);
        for j in 0..n {
            row[j] += coef * si * s[j] - rho * (si * hy[j] + hyi * s[j]);
        }
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&m[i * n..(i + 1) * n], v);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
