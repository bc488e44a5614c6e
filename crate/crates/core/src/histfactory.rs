//! Single-channel template model: one signal and two background samples.
//!
//! Expected counts are `ν_i = μ·S_i + γ1_i·B1_i + γ2_i·B2_i`, scaled by the
//! luminosity factor `α`. The negative log-likelihood, with every
//! parameter-independent constant dropped, is
//!
//! ```text
//! Σ_i [α·ν_i − n_i·log(α·ν_i)] + (α − 1)² / (2σ_α²) + Σ_b Σ_i τ·(γb_i − log γb_i)
//! ```
//!
//! The first term is the per-bin Poisson likelihood, the second a Gaussian
//! constraint on `α`, the third a Poisson constraint `pois(τ | τ·γ)` on every
//! background scale factor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, ModelGraph, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("n_bins must be at least 1")]
    NoBins,
    #[error("{name} has {got} entries, expected {expected}")]
    Length { name: &'static str, expected: usize, got: usize },
    #[error("{name}[{bin}] = {value} must be strictly positive and finite")]
    NonPositiveTemplate { name: &'static str, bin: usize, value: f64 },
    #[error("{name} = {value} must be strictly positive and finite")]
    NonPositiveConstant { name: &'static str, value: f64 },
    #[error("observed[{bin}] = {value} must be non-negative and finite")]
    BadObservation { bin: usize, value: f64 },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub const DEFAULT_SIGMA_ALPHA: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistFactorySpec {
    pub n_bins: usize,
    pub signal: Vec<f64>,
    pub background1: Vec<f64>,
    pub background2: Vec<f64>,
    pub sigma_alpha: f64,
    pub tau: f64,
}

impl HistFactorySpec {
    /// Spec over [`default_templates`] with the default constraint widths.
    pub fn with_default_templates(n_bins: usize) -> Result<Self, ModelError> {
        if n_bins == 0 {
            return Err(ModelError::NoBins);
        }
        let (signal, background1, background2) = default_templates(n_bins);
        Ok(HistFactorySpec {
            n_bins,
            signal,
            background1,
            background2,
            sigma_alpha: DEFAULT_SIGMA_ALPHA,
            tau: DEFAULT_TAU,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_bins == 0 {
            return Err(ModelError::NoBins);
        }
        for (name, t) in [("signal", &self.signal), ("background1", &self.background1), ("background2", &self.background2)] {
            if t.len() != self.n_bins {
                return Err(ModelError::Length { name, expected: self.n_bins, got: t.len() });
            }
            if let Some((bin, &value)) = t.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
                return Err(ModelError::NonPositiveTemplate { name, bin, value });
            }
        }
        for (name, value) in [("sigma_alpha", self.sigma_alpha), ("tau", self.tau)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::NonPositiveConstant { name, value });
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout { n_bins: self.n_bins }
    }

    /// `ν_i` at `params`.
    pub fn expected(&self, params: &[f64]) -> Vec<f64> {
        let l = self.layout();
        (0..self.n_bins)
            .map(|i| {
                params[l.mu()] * self.signal[i]
                    + params[l.gamma1(i)] * self.background1[i]
                    + params[l.gamma2(i)] * self.background2[i]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observed: Vec<f64>,
}

impl Dataset {
    pub fn validate(&self, spec: &HistFactorySpec) -> Result<(), ModelError> {
        if self.observed.len() != spec.n_bins {
            return Err(ModelError::Length { name: "observed", expected: spec.n_bins, got: self.observed.len() });
        }
        match self.observed.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            Some((bin, &value)) => Err(ModelError::BadObservation { bin, value }),
            None => Ok(()),
        }
    }
}

/// Parameter order: `μ, α, γ1_0 … γ1_{n-1}, γ2_0 … γ2_{n-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_bins: usize,
}

impl ParamLayout {
    pub fn mu(&self) -> usize {
        0
    }

    pub fn alpha(&self) -> usize {
        1
    }

    pub fn gamma1(&self, bin: usize) -> usize {
        2 + bin
    }

    pub fn gamma2(&self, bin: usize) -> usize {
        2 + self.n_bins + bin
    }

    pub fn n_params(&self) -> usize {
        2 + 2 * self.n_bins
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["mu".to_string(), "alpha".to_string()];
        names.extend((0..self.n_bins).map(|i| format!("gamma1_{i}")));
        names.extend((0..self.n_bins).map(|i| format!("gamma2_{i}")));
        names
    }

    pub fn nominal(&self) -> Vec<f64> {
        vec![1.0; self.n_params()]
    }

    fn check(&self, params: &[f64]) -> Result<(), ModelError> {
        if params.len() == self.n_params() {
            Ok(())
        } else {
            Err(ModelError::ParamCount { expected: self.n_params(), got: params.len() })
        }
    }
}

#[derive(Debug, Clone)]
pub struct HistFactoryModel {
    pub graph: ModelGraph,
    pub root: NodeId,
    pub layout: ParamLayout,
}

/// Builds the likelihood graph. `α·ν_i` is built separately for the linear
/// and the log term, as two independent Poisson-term evaluations would.
pub fn build_model(spec: &HistFactorySpec, data: &Dataset) -> Result<HistFactoryModel, ModelError> {
    spec.validate()?;
    data.validate(spec)?;
    let layout = spec.layout();
    let n = spec.n_bins;

    let mut g = ModelGraph::new();
    for name in layout.names() {
        g.declare_param(name, 1.0);
    }
    let mu = g.param(layout.mu())?;
    let alpha = g.param(layout.alpha())?;
    let gamma1 = g.param_vector((0..n).map(|i| layout.gamma1(i)).collect())?;
    let gamma2 = g.param_vector((0..n).map(|i| layout.gamma2(i)).collect())?;

    let s = g.const_vector(spec.signal.clone())?;
    let b1 = g.const_vector(spec.background1.clone())?;
    let b2 = g.const_vector(spec.background2.clone())?;
    let obs = g.const_vector(data.observed.clone())?;

    // ν = μ·S + γ1·B1 + γ2·B2
    let mu_s = g.mul(mu, s)?;
    let g1_b1 = g.mul(gamma1, b1)?;
    let g2_b2 = g.mul(gamma2, b2)?;
    let partial = g.add(mu_s, g1_b1)?;
    let nu = g.add(partial, g2_b2)?;

    // Σ α·ν − n·log(α·ν)
    let lambda_lin = g.mul(alpha, nu)?;
    let lambda_log = g.mul(alpha, nu)?;
    let log_lambda = g.log(lambda_log)?;
    let n_log = g.mul(obs, log_lambda)?;
    let per_bin = g.sub(lambda_lin, n_log)?;
    let poisson = g.sum(per_bin)?;

    // (α − 1)² / (2σ²)
    let one = g.constant(1.0)?;
    let two_var = g.constant(2.0 * spec.sigma_alpha * spec.sigma_alpha)?;
    let dev = g.sub(alpha, one)?;
    let sq = g.mul(dev, dev)?;
    let gauss = g.div(sq, two_var)?;

    // τ·(γ − log γ) for both background samples
    let tau = g.constant(spec.tau)?;
    let constraint = |g: &mut ModelGraph, gamma: NodeId| -> Result<NodeId, GraphError> {
        let lg = g.log(gamma)?;
        let d = g.sub(gamma, lg)?;
        let t = g.mul(tau, d)?;
        g.sum(t)
    };
    let c1 = constraint(&mut g, gamma1)?;
    let c2 = constraint(&mut g, gamma2)?;

    let l1 = g.add(poisson, gauss)?;
    let l2 = g.add(l1, c1)?;
    let root = g.add(l2, c2)?;
    Ok(HistFactoryModel { graph: g, root, layout })
}

/// Direct evaluation of the negative log-likelihood with a plain loop.
pub fn reference_nll(spec: &HistFactorySpec, data: &Dataset, params: &[f64]) -> Result<f64, ModelError> {
    let l = spec.layout();
    l.check(params)?;
    let alpha = params[l.alpha()];
    let mut nll = 0.0;
    for i in 0..spec.n_bins {
        let nu = params[l.mu()] * spec.signal[i]
            + params[l.gamma1(i)] * spec.background1[i]
            + params[l.gamma2(i)] * spec.background2[i];
        let lambda = alpha * nu;
        if !(lambda > 0.0) {
            return Err(ModelError::Domain(format!("expected count α·ν in bin {i} is {lambda}")));
        }
        nll += lambda - data.observed[i] * lambda.ln();
    }
    nll += (alpha - 1.0) * (alpha - 1.0) / (2.0 * spec.sigma_alpha * spec.sigma_alpha);
    for i in 0..spec.n_bins {
        for (name, idx) in [("gamma1", l.gamma1(i)), ("gamma2", l.gamma2(i))] {
            let gamma = params[idx];
            if !(gamma > 0.0) {
                return Err(ModelError::Domain(format!("{name}_{i} = {gamma} must be positive")));
            }
            nll += spec.tau * (gamma - gamma.ln());
        }
    }
    Ok(nll)
}

/// Observed counts equal to the expected counts `α·ν_i` at `truth`.
pub fn asimov_dataset(spec: &HistFactorySpec, truth: &[f64]) -> Result<Dataset, ModelError> {
    let l = spec.layout();
    l.check(truth)?;
    let alpha = truth[l.alpha()];
    Ok(Dataset { observed: spec.expected(truth).into_iter().map(|nu| alpha * nu).collect() })
}

/// Poisson-fluctuated counts around `α·ν_i` at `truth`, drawn from a
/// ChaCha8 stream seeded with `seed`.
pub fn toy_dataset(spec: &HistFactorySpec, truth: &[f64], seed: u64) -> Result<Dataset, ModelError> {
    let l = spec.layout();
    l.check(truth)?;
    let alpha = truth[l.alpha()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observed = spec
        .expected(truth)
        .into_iter()
        .enumerate()
        .map(|(i, nu)| {
            let mean = alpha * nu;
            Poisson::new(mean)
                .map(|p| p.sample(&mut rng))
                .map_err(|_| ModelError::Domain(format!("Poisson mean {mean} in bin {i}")))
        })
        .collect::<Result<_, _>>()?;
    Ok(Dataset { observed })
}

/// Template shapes over bin centres `c = (i + ½)/n`: a Gaussian signal peak
/// at 0.5, a falling exponential and a flat background.
pub fn default_templates(n_bins: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let centres = (0..n_bins).map(|i| (i as f64 + 0.5) / n_bins as f64);
    let signal = centres.clone().map(|c| 20.0 * (-((c - 0.5) / 0.1).powi(2) / 2.0).exp()).collect();
    let background1 = centres.map(|c| 100.0 * (-3.0 * c).exp()).collect();
    let background2 = vec![50.0; n_bins];
    (signal, background1, background2)
}

/// On-disk model description. `observed` absent means Asimov data at the
/// nominal parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub n_bins: usize,
    pub signal: Vec<f64>,
    pub background1: Vec<f64>,
    pub background2: Vec<f64>,
    pub sigma_alpha: f64,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<Vec<f64>>,
}

impl ModelDocument {
    pub fn new(spec: &HistFactorySpec, observed: Option<Vec<f64>>) -> Self {
        ModelDocument {
            n_bins: spec.n_bins,
            signal: spec.signal.clone(),
            background1: spec.background1.clone(),
            background2: spec.background2.clone(),
            sigma_alpha: spec.sigma_alpha,
            tau: spec.tau,
            observed,
        }
    }

    /// Validated spec plus dataset.
    pub fn resolve(&self) -> Result<(HistFactorySpec, Dataset), ModelError> {
        let spec = HistFactorySpec {
            n_bins: self.n_bins,
            signal: self.signal.clone(),
            background1: self.background1.clone(),
            background2: self.background2.clone(),
            sigma_alpha: self.sigma_alpha,
            tau: self.tau,
        };
        spec.validate()?;
        let data = match &self.observed {
            Some(obs) => Dataset { observed: obs.clone() },
            None => asimov_dataset(&spec, &spec.layout().nominal())?,
        };
        data.validate(&spec)?;
        Ok((spec, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_bin() -> HistFactorySpec {
        HistFactorySpec {
            n_bins: 1,
            signal: vec![5.0],
            background1: vec![10.0],
            background2: vec![20.0],
            sigma_alpha: 0.1,
            tau: 100.0,
        }
    }

    #[test]
    fn layout_counts() {
        assert_eq!(ParamLayout { n_bins: 3 }.n_params(), 8);
        assert_eq!(ParamLayout { n_bins: 499 }.n_params(), 1000);
        let l = ParamLayout { n_bins: 2 };
        assert_eq!(l.names(), ["mu", "alpha", "gamma1_0", "gamma1_1", "gamma2_0", "gamma2_1"]);
        assert_eq!((l.gamma1(1), l.gamma2(0)), (3, 4));
    }

    #[test]
    fn one_bin_reference_values() {
        let spec = one_bin();
        let data = asimov_dataset(&spec, &[1.0; 4]).unwrap();
        assert_eq!(data.observed, vec![35.0]);
        let at_nominal = reference_nll(&spec, &data, &[1.0; 4]).unwrap();
        assert!((at_nominal - (235.0 - 35.0 * 35f64.ln())).abs() < 1e-12);
        assert!((at_nominal - 110.5628).abs() < 1e-4);
        let mu2 = reference_nll(&spec, &data, &[2.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((mu2 - (240.0 - 35.0 * 40f64.ln())).abs() < 1e-12);
        assert!((mu2 - 110.8892).abs() < 1e-4);
        assert!(matches!(reference_nll(&spec, &data, &[1.0, 1.0, 0.0, 1.0]), Err(ModelError::Domain(_))));
        assert!(matches!(reference_nll(&spec, &data, &[1.0]), Err(ModelError::ParamCount { .. })));
    }

    #[test]
    fn graph_matches_reference_on_one_bin() {
        let spec = one_bin();
        let data = asimov_dataset(&spec, &[1.0; 4]).unwrap();
        let m = build_model(&spec, &data).unwrap();
        let v = m.graph.eval(m.root, &[1.0; 4]).unwrap().as_scalar().unwrap();
        assert!((v - (235.0 - 35.0 * 35f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn asimov_examples() {
        let spec = one_bin();
        assert_eq!(asimov_dataset(&spec, &[2.0, 1.0, 1.0, 1.0]).unwrap().observed, vec![40.0]);
        let spec = HistFactorySpec::with_default_templates(5).unwrap();
        let d = asimov_dataset(&spec, &spec.layout().nominal()).unwrap();
        for i in 0..5 {
            assert_eq!(d.observed[i], spec.signal[i] + spec.background1[i] + spec.background2[i]);
        }
    }

    #[test]
    fn toys_are_seeded() {
        let spec = HistFactorySpec::with_default_templates(50).unwrap();
        let truth = spec.layout().nominal();
        let a = toy_dataset(&spec, &truth, 7).unwrap();
        assert_eq!(a, toy_dataset(&spec, &truth, 7).unwrap());
        assert_ne!(a, toy_dataset(&spec, &truth, 8).unwrap());
        assert!(a.observed.iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
    }

    #[test]
    fn toy_mean() {
        let spec = one_bin();
        let mean: f64 = (0..10_000).map(|s| toy_dataset(&spec, &[1.0; 4], s).unwrap().observed[0]).sum::<f64>() / 10_000.0;
        assert!((mean - 35.0).abs() < 1.0, "{mean}");
    }

    #[test]
    fn default_template_values() {
        let (s, b1, b2) = default_templates(1);
        assert_eq!(s, vec![20.0]);
        assert_eq!(b1, vec![100.0 * (-1.5f64).exp()]);
        assert_eq!(b2, vec![50.0]);
        assert_eq!(default_templates(2).2, vec![50.0, 50.0]);
        for n in [1, 2, 7, 100, 499] {
            let (s, b1, b2) = default_templates(n);
            assert!(s.iter().chain(&b1).chain(&b2).all(|v| *v > 0.0));
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = one_bin();
        spec.tau = 0.0;
        assert!(matches!(spec.validate(), Err(ModelError::NonPositiveConstant { name: "tau", .. })));
        let mut spec = one_bin();
        spec.signal = vec![1.0, 2.0];
        assert!(matches!(spec.validate(), Err(ModelError::Length { .. })));
        let mut spec = one_bin();
        spec.background2[0] = -1.0;
        assert!(matches!(spec.validate(), Err(ModelError::NonPositiveTemplate { .. })));
        let bad = Dataset { observed: vec![-1.0] };
        assert!(build_model(&one_bin(), &bad).is_err());
        assert!(HistFactorySpec::with_default_templates(0).is_err());
    }

    #[test]
    fn document_round_trip_and_unknown_keys() {
        let spec = HistFactorySpec::with_default_templates(3).unwrap();
        let doc = ModelDocument::new(&spec, None);
        let text = serde_json::to_string(&doc).unwrap();
        let back: ModelDocument = serde_json::from_str(&text).unwrap();
        let (s2, d2) = back.resolve().unwrap();
        assert_eq!(s2, spec);
        assert_eq!(d2, asimov_dataset(&spec, &spec.layout().nominal()).unwrap());

        let with_extra = text.replacen('{', "{\"colour\": 1,", 1);
        assert!(serde_json::from_str::<ModelDocument>(&with_extra).is_err());
    }
}
