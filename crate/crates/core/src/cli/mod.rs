//! `squashfit` command-line interface.
//!
//! Results go to the `out` writer, diagnostics to `err`. Exit codes:
//! 0 success, 1 usage/IO/parse error, 2 non-convergence, 3 numerical-domain
//! failure.

pub mod bench;
pub mod pipeline;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::ad::AdError;
use crate::histfactory::{toy_dataset, HistFactorySpec, ModelDocument, ModelError};
use crate::ir::IrError;
use crate::minimize::{MinimizeError, MinimizeOptions};
use crate::squash::{emit_source, SquashError};

pub use bench::{run_bench, write_csv, BenchConfig, BenchRecord, CSV_HEADER};
pub use pipeline::{grad_check, CompiledModel, GradCheckReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Reverse-mode tolerance against central differences.
pub const FD_TOLERANCE: f64 = 1e-5;
/// Reverse-mode tolerance against forward mode.
pub const FORWARD_TOLERANCE: f64 = 1e-10;
/// Denominator floor of [`crate::numdiff::relative_deviation`].
pub const DEVIATION_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradMode {
    Ad,
    Numdiff,
}

impl GradMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GradMode::Ad => "ad",
            GradMode::Numdiff => "numdiff",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "squashfit", version, about = "Binned-likelihood fits with reverse-mode gradients")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a model-spec JSON built from the default templates.
    GenModel {
        #[arg(long)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = crate::histfactory::DEFAULT_TAU)]
        tau: f64,
        #[arg(long = "sigma-alpha", default_value_t = crate::histfactory::DEFAULT_SIGMA_ALPHA)]
        sigma_alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Poisson-fluctuated observed counts instead of Asimov data.
        #[arg(long)]
        toy: bool,
    },
    /// Minimize the model's NLL from the nominal parameters.
    Fit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = GradMode::Ad)]
        mode: GradMode,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long = "max-iter")]
        max_iter: Option<usize>,
    },
    /// Compare reverse-mode, forward-mode and central-difference gradients.
    GradCheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the squashed program.
    DumpIr {
        #[arg(long)]
        model: PathBuf,
        /// Print the gradient program instead.
        #[arg(long)]
        grad: bool,
        /// Run constant folding, CSE and DCE first.
        #[arg(long)]
        optimize: bool,
    },
    /// Time AD against numerical gradients over several model sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,10,50,100,499")]
        bins: Vec<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "ad,numdiff")]
        modes: Vec<GradMode>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid model: {0}")]
    Model(ModelError),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("{0}")]
    NotConverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } | CliError::Parse { .. } | CliError::Model(_) => EXIT_USAGE,
            CliError::NotConverged(_) => EXIT_NOT_CONVERGED,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Domain(msg) => CliError::Numerical(msg),
            other => CliError::Model(other),
        }
    }
}

impl From<SquashError> for CliError {
    fn from(e: SquashError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<AdError> for CliError {
    fn from(e: AdError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<IrError> for CliError {
    fn from(e: IrError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<MinimizeError> for CliError {
    fn from(e: MinimizeError) -> Self {
        match e {
            MinimizeError::InvalidOptions => CliError::Usage(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub fn load_model(path: &Path) -> Result<ModelDocument, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Parse { path: path.to_path_buf(), source })
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, out, err),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = write!(err, "{}", e.render());
            code
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    match command {
        Command::GenModel { bins, out: path, tau, sigma_alpha, seed, toy } => {
            cmd_gen_model(bins, &path, tau, sigma_alpha, seed, toy)?;
            let _ = writeln!(err, "wrote {}", path.display());
            Ok(EXIT_OK)
        }
        Command::Fit { model, mode, tol, max_iter } => {
            let mut opts = MinimizeOptions::default();
            if let Some(t) = tol {
                opts.grad_tol = t;
            }
            if let Some(m) = max_iter {
                opts.max_iterations = m;
            }
            cmd_fit(&model, mode, &opts, out)
        }
        Command::GradCheck { model, points, seed } => cmd_grad_check(&model, points, seed, out),
        Command::DumpIr { model, grad, optimize } => cmd_dump_ir(&model, grad, optimize, out),
        Command::Bench { bins, modes, repeats, out: path } => cmd_bench(&bins, &modes, repeats, &path, err),
    }
}

pub fn cmd_gen_model(bins: usize, path: &Path, tau: f64, sigma_alpha: f64, seed: u64, toy: bool) -> Result<(), CliError> {
    if bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let mut spec = HistFactorySpec::with_default_templates(bins)?;
    spec.tau = tau;
    spec.sigma_alpha = sigma_alpha;
    spec.validate()?;
    let observed = if toy { Some(toy_dataset(&spec, &spec.layout().nominal(), seed)?.observed) } else { None };
    let doc = ModelDocument::new(&spec, observed);
    let mut text = serde_json::to_string_pretty(&doc).expect("model document serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn cmd_fit(path: &Path, mode: GradMode, opts: &MinimizeOptions, out: &mut dyn Write) -> Result<i32, CliError> {
    let (spec, data) = load_model(path)?.resolve()?;
    let compiled = CompiledModel::build(&spec, &data, mode)?;
    let start = compiled.layout().nominal();
    let run = compiled.fit(&start, opts)?;
    let r = &run.result;
    let names = compiled.layout().names();
    let _ = writeln!(out, "mode: {}", mode.as_str());
    let _ = writeln!(out, "status: {}", if r.converged { "converged" } else { "not converged" });
    let _ = writeln!(out, "termination: {:?}", r.termination);
    let _ = writeln!(out, "nll_min: {:.12}", r.nll_min);
    let _ = writeln!(out, "final_grad_norm: {:e}", r.final_grad_norm);
    let _ = writeln!(out, "n_iterations: {}", r.n_iterations);
    let _ = writeln!(out, "n_fn_evals: {}", r.n_fn_evals);
    let _ = writeln!(out, "n_grad_evals: {}", r.n_grad_evals);
    for (name, v) in names.iter().zip(&r.params_hat) {
        let _ = writeln!(out, "{name} = {v:.10}");
    }
    Ok(if r.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

pub fn cmd_grad_check(path: &Path, points: usize, seed: u64, out: &mut dyn Write) -> Result<i32, CliError> {
    if points == 0 {
        return Err(CliError::Usage("--points must be at least 1".into()));
    }
    let (spec, data) = load_model(path)?.resolve()?;
    let report = grad_check(&spec, &data, points, seed)?;
    let _ = writeln!(out, "points: {}", report.n_points);
    let _ = writeln!(out, "parameters: {}", report.n_params);
    let _ = writeln!(
        out,
        "max deviation reverse vs central difference: {:e} (param {}, point {})",
        report.max_fd_deviation, report.worst_fd.0, report.worst_fd.1
    );
    let _ = writeln!(out, "  reverse = {:e}, central difference = {:e}", report.worst_fd_values.0, report.worst_fd_values.1);
    let _ = writeln!(out, "components over {:e}: {} of {}", FD_TOLERANCE, report.fd_failures, report.n_points * report.n_params);
    let _ = writeln!(out, "max deviation reverse vs forward: {:e}", report.max_forward_deviation);
    let pass = report.passes(FD_TOLERANCE, FORWARD_TOLERANCE);
    let _ = writeln!(out, "result: {}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { EXIT_OK } else { EXIT_NUMERICAL })
}

pub fn cmd_dump_ir(path: &Path, grad: bool, optimize: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    let (spec, data) = load_model(path)?.resolve()?;
    let model = crate::histfactory::build_model(&spec, &data)?;
    let mut program = crate::squash::squash(&model.graph, model.root)?;
    if optimize {
        program = program.optimize()?;
    }
    let (program, name) = if grad {
        let g = crate::ad::reverse_grad(&program)?;
        let g = if optimize { g.map_program(|p| p.optimize())? } else { g };
        (g.into_program(), "nll_grad")
    } else {
        (program, "nll")
    };
    let _ = write!(out, "{}", emit_source(&program, name));
    let stats = program.stats();
    let _ = writeln!(out, "# statements: {}", stats.n_statements);
    let _ = writeln!(out, "# outputs: {}", stats.n_outputs);
    let per_op: Vec<String> = crate::ir::Op::ALL.iter().map(|op| format!("{op}={}", stats.count(*op))).collect();
    let _ = writeln!(out, "# ops: {}", per_op.join(" "));
    Ok(EXIT_OK)
}

pub fn cmd_bench(bins: &[usize], modes: &[GradMode], repeats: usize, path: &Path, err: &mut dyn Write) -> Result<i32, CliError> {
    if bins.is_empty() || bins.contains(&0) {
        return Err(CliError::Usage("--bins must be a list of positive integers".into()));
    }
    if modes.is_empty() {
        return Err(CliError::Usage("--modes must not be empty".into()));
    }
    if repeats < bench::MIN_REPEATS {
        return Err(CliError::Usage(format!("--repeats must be at least {}", bench::MIN_REPEATS)));
    }
    let config = BenchConfig { bins: bins.to_vec(), modes: modes.to_vec(), repeats };
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let result = run_bench(&config, |rec| {
        let _ = writeln!(
            err,
            "bins={} mode={} grad_ms={:.4} minimize_ms={:.2} converged={}",
            rec.n_bins,
            rec.mode.as_str(),
            rec.grad_ms_mean,
            rec.minimize_ms,
            rec.converged
        );
        records.push(rec.clone());
    });
    write_csv(&mut file, &records).map_err(io_err(path))?;
    result?;
    if records.iter().all(|r| r.converged) {
        Ok(EXIT_OK)
    } else {
        Err(CliError::NotConverged("at least one minimization did not converge".into()))
    }
}
