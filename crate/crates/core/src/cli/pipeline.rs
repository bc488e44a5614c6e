//! Model → program → gradient source, shared by `fit`, `grad-check` and
//! `bench`.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CliError, GradMode, DEVIATION_FLOOR, FD_TOLERANCE};
use crate::ad::{forward_derivative, reverse_grad, GradientProgram};
use crate::histfactory::{build_model, Dataset, HistFactorySpec, ParamLayout};
use crate::ir::Program;
use crate::minimize::{minimize, FitResult, MinimizeOptions};
use crate::numdiff::{central_diff_into, relative_deviation, StepRule};
use crate::squash::squash;

/// A squashed model ready for evaluation, with its gradient program when
/// built for AD.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    layout: ParamLayout,
    objective: Program,
    gradient: Option<GradientProgram>,
}

/// Fit output plus the number of objective calls made on behalf of
/// numerical gradients (zero in AD mode).
#[derive(Debug, Clone)]
pub struct FitRun {
    pub result: FitResult,
    pub gradient_objective_evals: usize,
}

impl CompiledModel {
    /// Builds the graph, squashes and optimizes it, and in AD mode derives
    /// and optimizes the reverse-mode gradient program.
    pub fn build(spec: &HistFactorySpec, data: &Dataset, mode: GradMode) -> Result<Self, CliError> {
        let model = build_model(spec, data)?;
        let objective = squash(&model.graph, model.root)?.optimize()?;
        let gradient = match mode {
            GradMode::Ad => Some(reverse_grad(&objective)?.map_program(|p| p.optimize())?),
            GradMode::Numdiff => None,
        };
        Ok(CompiledModel { layout: model.layout, objective, gradient })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn objective_program(&self) -> &Program {
        &self.objective
    }

    pub fn gradient_program(&self) -> Option<&GradientProgram> {
        self.gradient.as_ref()
    }

    pub fn mode(&self) -> GradMode {
        if self.gradient.is_some() {
            GradMode::Ad
        } else {
            GradMode::Numdiff
        }
    }

    /// Objective closure; numerical-domain errors come back as NaN.
    pub fn objective_fn(&self) -> impl FnMut(&[f64]) -> f64 + '_ {
        let mut temps = Vec::with_capacity(self.objective.len());
        let mut out = [0.0];
        move |x| match self.objective.interpret_into(x, &mut temps, &mut out) {
            Ok(()) => out[0],
            Err(_) => f64::NAN,
        }
    }

    /// Gradient closure in this model's mode. Every objective call made by
    /// the numerical gradient is added to `counter`.
    pub fn gradient_fn<'a>(&'a self, counter: &'a Cell<usize>) -> Box<dyn FnMut(&[f64], &mut [f64]) -> bool + 'a> {
        match &self.gradient {
            Some(gp) => {
                let program = gp.program();
                let mut temps = Vec::with_capacity(program.len());
                let mut out = vec![0.0; program.outputs.len()];
                Box::new(move |x, g| match program.interpret_into(x, &mut temps, &mut out) {
                    Ok(()) => {
                        g.copy_from_slice(&out[1..]);
                        true
                    }
                    Err(_) => false,
                })
            }
            None => {
                let mut f = self.objective_fn();
                let rule = StepRule::default();
                Box::new(move |x, g| {
                    let mut counted = |p: &[f64]| {
                        counter.set(counter.get() + 1);
                        f(p)
                    };
                    central_diff_into(&mut counted, x, rule, g).is_ok()
                })
            }
        }
    }

    pub fn fit(&self, start: &[f64], opts: &MinimizeOptions) -> Result<FitRun, CliError> {
        let counter = Cell::new(0);
        let result = minimize(self.objective_fn(), self.gradient_fn(&counter), start, opts)?;
        Ok(FitRun { result, gradient_objective_evals: counter.get() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_points: usize,
    pub n_params: usize,
    pub max_fd_deviation: f64,
    /// (parameter, point) where the central-difference deviation peaked.
    pub worst_fd: (usize, usize),
    /// Reverse-mode and central-difference values at `worst_fd`.
    pub worst_fd_values: (f64, f64),
    /// Components whose central-difference deviation exceeds `FD_TOLERANCE`.
    pub fd_failures: usize,
    pub max_forward_deviation: f64,
}

impl GradCheckReport {
    pub fn passes(&self, fd_tol: f64, forward_tol: f64) -> bool {
        self.max_fd_deviation <= fd_tol && self.max_forward_deviation <= forward_tol
    }
}

/// Lower and upper edge of the box random check points are drawn from.
pub const CHECK_POINT_RANGE: (f64, f64) = (0.5, 1.5);

/// Points with every parameter uniform in [`CHECK_POINT_RANGE`]; all of
/// them keep γ and α·ν positive.
pub fn random_points(n_params: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = CHECK_POINT_RANGE;
    (0..count).map(|_| (0..n_params).map(|_| rng.random_range(lo..hi)).collect()).collect()
}

/// Reverse mode against forward mode and central differences at `points`
/// seeded random points.
pub fn grad_check(spec: &HistFactorySpec, data: &Dataset, points: usize, seed: u64) -> Result<GradCheckReport, CliError> {
    let model = build_model(spec, data)?;
    let program = squash(&model.graph, model.root)?;
    let n = program.n_params;
    let reverse = reverse_grad(&program)?;
    let forward: Vec<Program> = (0..n).map(|i| forward_derivative(&program, i)).collect::<Result<_, _>>()?;

    let mut temps = Vec::new();
    let mut out = [0.0];
    let mut objective = |x: &[f64]| match program.interpret_into(x, &mut temps, &mut out) {
        Ok(()) => out[0],
        Err(_) => f64::NAN,
    };

    let mut report = GradCheckReport {
        n_points: points,
        n_params: n,
        max_fd_deviation: 0.0,
        worst_fd: (0, 0),
        worst_fd_values: (0.0, 0.0),
        fd_failures: 0,
        max_forward_deviation: 0.0,
    };
    let mut fd = vec![0.0; n];
    for (k, x) in random_points(n, points, seed).iter().enumerate() {
        let (_, grad) = reverse.evaluate(x)?;
        central_diff_into(&mut objective, x, StepRule::default(), &mut fd)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        for i in 0..n {
            let dev = relative_deviation(grad[i], fd[i], DEVIATION_FLOOR);
            if dev > report.max_fd_deviation {
                report.max_fd_deviation = dev;
                report.worst_fd = (i, k);
                report.worst_fd_values = (grad[i], fd[i]);
            }
            if dev > FD_TOLERANCE {
                report.fd_failures += 1;
            }
            let tangent = forward[i].interpret(x)?[1];
            report.max_forward_deviation =
                report.max_forward_deviation.max(relative_deviation(grad[i], tangent, DEVIATION_FLOOR));
        }
    }
    Ok(report)
}
