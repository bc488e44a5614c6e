//! AD vs numerical-gradient benchmark.
//!
//! For every bin count an Asimov model over the default templates is built
//! once per mode. Each record times the build (squash, optimization and,
//! for AD, the reverse transform), `repeats` gradients and `repeats`
//! objective evaluations after one warm-up call, and one full minimization.
//! Gradients are timed and fits started at the nominal point with μ shifted
//! by [`MU_SHIFT`].

use std::cell::Cell;
use std::hint::black_box;
use std::io::{self, Write};
use std::time::Instant;

use super::pipeline::CompiledModel;
use super::{CliError, GradMode};
use crate::histfactory::{asimov_dataset, HistFactorySpec};
use crate::minimize::MinimizeOptions;

pub const CSV_HEADER: &str =
    "n_bins,n_params,mode,build_ms,grad_ms_mean,eval_ms_mean,minimize_ms,n_iterations,n_fn_evals,n_grad_evals,final_nll,converged";

pub const MIN_REPEATS: usize = 5;
pub const MU_SHIFT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub bins: Vec<usize>,
    pub modes: Vec<GradMode>,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub n_bins: usize,
    pub n_params: usize,
    pub mode: GradMode,
    pub build_ms: f64,
    pub grad_ms_mean: f64,
    pub eval_ms_mean: f64,
    pub minimize_ms: f64,
    pub n_iterations: usize,
    pub n_fn_evals: usize,
    pub n_grad_evals: usize,
    pub final_nll: f64,
    pub converged: bool,
    /// Objective calls made by numerical gradients during the fit; not
    /// written to the CSV.
    pub gradient_objective_evals: usize,
    /// Whether the accepted objective values never increased; not written
    /// to the CSV.
    pub monotone: bool,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{:.10},{}",
            self.n_bins,
            self.n_params,
            self.mode.as_str(),
            self.build_ms,
            self.grad_ms_mean,
            self.eval_ms_mean,
            self.minimize_ms,
            self.n_iterations,
            self.n_fn_evals,
            self.n_grad_evals,
            self.final_nll,
            self.converged
        )
    }
}

pub fn write_csv(w: &mut impl Write, records: &[BenchRecord]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Benchmarks one `(bins, mode)` pair.
pub fn bench_one(n_bins: usize, mode: GradMode, repeats: usize, opts: &MinimizeOptions) -> Result<BenchRecord, CliError> {
    let spec = HistFactorySpec::with_default_templates(n_bins)?;
    let layout = spec.layout();
    let data = asimov_dataset(&spec, &layout.nominal())?;

    let t = Instant::now();
    let compiled = CompiledModel::build(&spec, &data, mode)?;
    let build_ms = ms(t);

    let mut point = layout.nominal();
    point[layout.mu()] += MU_SHIFT;

    let counter = Cell::new(0);
    let mut grad = vec![0.0; layout.n_params()];
    let mut gradient = compiled.gradient_fn(&counter);
    if !gradient(&point, &mut grad) {
        return Err(CliError::Numerical("gradient failed at the timing point".into()));
    }
    let t = Instant::now();
    for _ in 0..repeats {
        black_box(gradient(black_box(&point), &mut grad));
    }
    let grad_ms_mean = ms(t) / repeats as f64;
    drop(gradient);

    let mut objective = compiled.objective_fn();
    black_box(objective(&point));
    let t = Instant::now();
    for _ in 0..repeats {
        black_box(objective(black_box(&point)));
    }
    let eval_ms_mean = ms(t) / repeats as f64;

    let t = Instant::now();
    let run = compiled.fit(&point, opts)?;
    let minimize_ms = ms(t);
    let r = run.result;

    Ok(BenchRecord {
        n_bins,
        n_params: layout.n_params(),
        mode,
        build_ms,
        grad_ms_mean,
        eval_ms_mean,
        minimize_ms,
        n_iterations: r.n_iterations,
        n_fn_evals: r.n_fn_evals,
        n_grad_evals: r.n_grad_evals,
        final_nll: r.nll_min,
        converged: r.converged,
        gradient_objective_evals: run.gradient_objective_evals,
        monotone: r.history.windows(2).all(|w| w[1] <= w[0]),
    })
}

/// Runs every `(bins, mode)` pair in order, handing each record to
/// `on_record` as soon as it is available. Stops at the first error.
pub fn run_bench(config: &BenchConfig, mut on_record: impl FnMut(&BenchRecord)) -> Result<(), CliError> {
    let opts = MinimizeOptions::default();
    for &n_bins in &config.bins {
        for &mode in &config.modes {
            let rec = bench_one(n_bins, mode, config.repeats, &opts)?;
            on_record(&rec);
        }
    }
    Ok(())
}
