//! Central-difference gradients.

use thiserror::Error;

/// Per-coordinate step `h_i = base · max(1, |x_i|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRule {
    pub base: f64,
}

impl Default for StepRule {
    /// Cube root of machine epsilon, about 6.055e-6.
    fn default() -> Self {
        StepRule { base: f64::EPSILON.cbrt() }
    }
}

impl StepRule {
    pub fn new(base: f64) -> Result<Self, NumdiffError> {
        if base > 0.0 && base.is_finite() {
            Ok(StepRule { base })
        } else {
            Err(NumdiffError::InvalidBase(base))
        }
    }

    pub fn step_size(&self, x: f64) -> f64 {
        self.base * x.abs().max(1.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumdiffError {
    #[error("step base must be positive and finite, got {0}")]
    InvalidBase(f64),
    #[error("objective is not finite when perturbing parameter {index}")]
    NonFinite { index: usize },
}

/// Gradient by `(f(x + h e_i) - f(x - h e_i)) / 2h`, one coordinate at a
/// time. Returns the gradient and the number of objective calls, which is
/// always `2 · x.len()` on success.
pub fn central_diff_gradient<F>(mut objective: F, x: &[f64], rule: StepRule) -> Result<(Vec<f64>, usize), NumdiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let evals = central_diff_into(&mut objective, x, rule, &mut grad)?;
    Ok((grad, evals))
}

/// Same as [`central_diff_gradient`], writing into `grad`.
pub fn central_diff_into<F>(objective: &mut F, x: &[f64], rule: StepRule, grad: &mut [f64]) -> Result<usize, NumdiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(grad.len(), x.len(), "gradient buffer length");
    let mut work = x.to_vec();
    let mut evals = 0;
    for i in 0..x.len() {
        let h = rule.step_size(x[i]);
        work[i] = x[i] + h;
        let up = objective(&work);
        work[i] = x[i] - h;
        let down = objective(&work);
        work[i] = x[i];
        evals += 2;
        if !(up.is_finite() && down.is_finite()) {
            return Err(NumdiffError::NonFinite { index: i });
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(evals)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_deviation(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
