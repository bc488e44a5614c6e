#![allow(dead_code)]

use squashfit::cli::pipeline::random_points;
use squashfit::histfactory::{asimov_dataset, Dataset, HistFactorySpec, DEFAULT_SIGMA_ALPHA, DEFAULT_TAU};
use squashfit::ir::Program;

/// S = [5], B1 = [10], B2 = [20]: at nominal the Asimov count is 35.
pub fn one_bin_spec() -> HistFactorySpec {
    HistFactorySpec {
        n_bins: 1,
        signal: vec![5.0],
        background1: vec![10.0],
        background2: vec![20.0],
        sigma_alpha: DEFAULT_SIGMA_ALPHA,
        tau: DEFAULT_TAU,
    }
}

pub fn default_asimov(n_bins: usize) -> (HistFactorySpec, Dataset) {
    let spec = HistFactorySpec::with_default_templates(n_bins).unwrap();
    let data = asimov_dataset(&spec, &spec.layout().nominal()).unwrap();
    (spec, data)
}

pub fn points(n_params: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    random_points(n_params, count, seed)
}

pub fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Temps that no output reaches, found by a backward scan.
pub fn unreachable_statements(p: &Program) -> Vec<usize> {
    use squashfit::ir::Operand;
    let mut live = vec![false; p.statements.len()];
    for o in &p.outputs {
        if let Operand::Temp(t) = o {
            live[*t] = true;
        }
    }
    for (i, st) in p.statements.iter().enumerate().rev() {
        if !live[i] {
            continue;
        }
        for a in st.args.operands() {
            if let Operand::Temp(t) = a {
                live[t] = true;
            }
        }
    }
    live.iter().enumerate().filter(|(_, &l)| !l).map(|(i, _)| i).collect()
}
