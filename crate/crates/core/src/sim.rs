//! Monte Carlo harness: sample generation, contamination schemes,
//! replication management and MSE/bias/variance-curve summaries.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{builtin_model, variance_covariates, Dataset, RegressionModel};
use crate::pipeline::{
    fit_classical, fit_initial, fit_stepwise_from, fit_stepwise_n_from, homoscedastic_result,
    FitOptions, FitResult, InitialFit, Method, Weighting,
};
use crate::seeds::derive_seed;

/// Data-generating parameters (β₀, λ₀, σ₀).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub sigma: f64,
}

impl Default for Truth {
    fn default() -> Self {
        Self {
            beta: vec![5.0, 2.0],
            lambda: vec![1.0],
            sigma: 1.0,
        }
    }
}

impl Truth {
    pub fn validate(&self, model: &dyn RegressionModel) -> Result<()> {
        if self.beta.len() != model.n_beta() || self.lambda.len() != model.n_lambda() {
            return Err(Error::Config(format!(
                "truth has {} beta / {} lambda values, model `{}` needs {} / {}",
                self.beta.len(),
                self.lambda.len(),
                model.name(),
                model.n_beta(),
                model.n_lambda()
            )));
        }
        if !(self.sigma >= 0.0) || self.beta.iter().chain(&self.lambda).any(|v| !v.is_finite()) {
            return Err(Error::Config("truth must be finite with sigma >= 0".into()));
        }
        Ok(())
    }

    /// σ₀·exp(λ₀ᵀh(x, β₀)).
    pub fn variance_curve(&self, model: &dyn RegressionModel, x: f64) -> f64 {
        let h = variance_covariates(model, &[x], &self.beta);
        self.sigma
            * self
                .lambda
                .iter()
                .zip(&h)
                .map(|(l, v)| l * v)
                .sum::<f64>()
                .exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationScheme {
    pub name: String,
    pub fraction: f64,
    pub x0: f64,
    pub y0: f64,
    #[serde(default = "default_jitter")]
    pub jitter_sd: f64,
}

fn default_jitter() -> f64 {
    1e-4
}

impl ContaminationScheme {
    pub const BUILTIN: [&'static str; 6] = ["C0", "C1", "C2", "C3", "D1", "D2"];

    pub fn builtin(name: &str) -> Option<Self> {
        let (fraction, x0, y0) = match name {
            "C0" => (0.0, 0.0, 0.0),
            "C1" => (0.05, 0.01, 25.0),
            "C2" => (0.05, 0.01, 50.0),
            "C3" => (0.05, 0.01, 100.0),
            "D1" => (0.05, 3.5, 90.0),
            "D2" => (0.05, 3.5, 150.0),
            _ => return None,
        };
        Some(Self {
            name: name.into(),
            fraction,
            x0,
            y0,
            jitter_sd: default_jitter(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(Error::Config(format!(
                "scheme {}: fraction must lie in [0, 1)",
                self.name
            )));
        }
        if !(self.jitter_sd > 0.0) || !self.x0.is_finite() || !self.y0.is_finite() {
            return Err(Error::Config(format!(
                "scheme {}: needs finite x0, y0 and positive jitter_sd",
                self.name
            )));
        }
        Ok(())
    }

    /// Number of trailing observations replaced in a sample of size n.
    pub fn count(&self, n: usize) -> usize {
        ((self.fraction * n as f64).ceil() as usize).min(n)
    }
}

/// Scheme reference in a config: a built-in name or an inline definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemeSpec {
    Named(String),
    Inline(ContaminationScheme),
}

impl SchemeSpec {
    pub fn resolve(&self) -> Result<ContaminationScheme> {
        let s = match self {
            SchemeSpec::Named(n) => ContaminationScheme::builtin(n)
                .ok_or_else(|| Error::Config(format!("unknown contamination scheme `{n}`")))?,
            SchemeSpec::Inline(s) => s.clone(),
        };
        s.validate()?;
        Ok(s)
    }
}

/// n draws with xᵢ ~ U(0,1) and yᵢ = g(xᵢ, β₀) + σ₀·exp(λ₀ᵀh(xᵢ, β₀))·εᵢ, εᵢ ~ N(0,1).
pub fn generate_sample(
    model: &dyn RegressionModel,
    n: usize,
    truth: &Truth,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidInput("sample size must be positive".into()));
    }
    if model.n_covariates() != 1 {
        return Err(Error::InvalidInput(
            "sample generation supports scalar covariates only".into(),
        ));
    }
    truth.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.gen();
        let e: f64 = rng.sample(StandardNormal);
        x.push(xi);
        y.push(model.eval(&[xi], &truth.beta) + truth.variance_curve(model, xi) * e);
    }
    Dataset::from_scalar(x, y)
}

/// Replaces the trailing ⌈fraction·n⌉ observations by (x₀ + u, y₀), u ~ N(0, jitter_sd²).
pub fn apply_contamination(
    data: &Dataset,
    scheme: &ContaminationScheme,
    seed: u64,
) -> Result<Dataset> {
    scheme.validate()?;
    let k = scheme.count(data.len());
    let mut out = data.clone();
    if k == 0 {
        return Ok(out);
    }
    let jitter = Normal::new(0.0, scheme.jitter_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.len();
    for i in n - k..n {
        let x: Vec<f64> = data
            .x(i)
            .iter()
            .map(|_| scheme.x0 + jitter.sample(&mut rng))
            .collect();
        out.set_row(i, &x, scheme.y0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    pub n: usize,
    pub nrep: usize,
    pub master_seed: u64,
    pub schemes: Vec<SchemeSpec>,
    pub estimators: Vec<Method>,
    pub truth: Truth,
    pub options: FitOptions,
    /// Worker threads; 0 uses all available cores.
    pub threads: usize,
    pub out_dir: Option<std::path::PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: "exp-growth".into(),
            n: 100,
            nrep: 1000,
            master_seed: 20240101,
            schemes: ContaminationScheme::BUILTIN
                .iter()
                .map(|s| SchemeSpec::Named(s.to_string()))
                .collect(),
            estimators: Method::ALL.to_vec(),
            truth: Truth::default(),
            options: FitOptions::default(),
            threads: 0,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Checks everything that can be checked before running and returns the
    /// resolved model and schemes.
    pub fn validate(&self) -> Result<(Box<dyn RegressionModel>, Vec<ContaminationScheme>)> {
        let model = builtin_model(&self.model)
            .ok_or_else(|| Error::Config(format!("unknown model `{}`", self.model)))?;
        if self.nrep == 0 {
            return Err(Error::Config("nrep must be at least 1".into()));
        }
        if self.estimators.is_empty() || self.schemes.is_empty() {
            return Err(Error::Config(
                "need at least one scheme and one estimator".into(),
            ));
        }
        let need = self
            .estimators
            .iter()
            .map(|m| m.min_observations(model.n_beta(), model.n_lambda()))
            .max()
            .unwrap_or(1);
        if self.n < need {
            return Err(Error::Config(format!(
                "n = {} is below the minimum {need} for the chosen estimators",
                self.n
            )));
        }
        self.truth.validate(model.as_ref())?;
        self.options.mm.validate()?;
        let schemes = self
            .schemes
            .iter()
            .map(SchemeSpec::resolve)
            .collect::<Result<Vec<_>>>()?;
        for s in &schemes {
            if s.fraction > 0.0 && s.count(self.n) < 1 {
                return Err(Error::Config(format!(
                    "scheme {} replaces no observations",
                    s.name
                )));
            }
        }
        let mut names: Vec<&str> = schemes.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != schemes.len() {
            return Err(Error::Config("scheme names must be unique".into()));
        }
        Ok((model, schemes))
    }
}

/// Parses a JSON experiment config, naming unknown estimator tags.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    if let Some(list) = raw.get("estimators").and_then(|v| v.as_array()) {
        for tag in list {
            let s = tag
                .as_str()
                .ok_or_else(|| Error::Config("estimator tags must be strings".into()))?;
            s.parse::<Method>()
                .ok()
                .filter(|m| m.as_str() == s)
                .ok_or_else(|| Error::Config(format!("unknown estimator tag `{s}`")))?;
        }
    }
    Ok(serde_json::from_value(raw)?)
}

pub const CURVE_GRID_POINTS: usize = 101;

pub fn curve_grid() -> Vec<f64> {
    (0..CURVE_GRID_POINTS)
        .map(|i| i as f64 / (CURVE_GRID_POINTS - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub scheme: String,
    pub estimator: Method,
    pub replication: usize,
    pub fit: FitResult,
    /// σ̂·υ(x, λ̂) on [`curve_grid`].
    pub curve: Option<Vec<f64>>,
}

impl ReplicationRecord {
    pub fn included(&self) -> bool {
        !self.fit.failed() && self.fit.beta.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scheme: String,
    pub estimator: Method,
    pub included: usize,
    pub excluded: usize,
    pub not_converged: usize,
    pub mse: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: ExperimentConfig,
    pub grid: Vec<f64>,
    pub true_curve: Vec<f64>,
    pub cells: Vec<CellSummary>,
    pub records: Vec<ReplicationRecord>,
}

impl SimulationReport {
    pub fn cell(&self, scheme: &str, estimator: Method) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.scheme == scheme && c.estimator == estimator)
    }

    pub fn records_for<'a>(
        &'a self,
        scheme: &'a str,
        estimator: Method,
    ) -> impl Iterator<Item = &'a ReplicationRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.scheme == scheme && r.estimator == estimator)
    }

    /// Component `k` of the estimates of included replications.
    pub fn estimates(&self, scheme: &str, estimator: Method, k: usize) -> Vec<f64> {
        self.records_for(scheme, estimator)
            .filter(|r| r.included())
            .filter_map(|r| r.fit.beta.as_ref().map(|b| b[k]))
            .collect()
    }

    /// Refined λ̂ (or λ̂ when no refinement exists), first component.
    pub fn lambda_estimates(&self, scheme: &str, estimator: Method) -> Vec<f64> {
        self.records_for(scheme, estimator)
            .filter(|r| r.included())
            .filter_map(|r| {
                r.fit
                    .lambda_refined
                    .as_ref()
                    .or(r.fit.lambda.as_ref())
                    .map(|l| l[0])
            })
            .collect()
    }
}

/// MSE and bias of each component over the included estimates.
pub fn mse_bias(estimates: &[Vec<f64>], truth: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = estimates.len() as f64;
    truth
        .iter()
        .enumerate()
        .map(|(k, t)| {
            if estimates.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let (s, s2) = estimates.iter().fold((0.0, 0.0), |(s, s2), e| {
                let d = e[k] - t;
                (s + d, s2 + d * d)
            });
            (s2 / m, s / m)
        })
        .unzip()
}

fn run_replication(
    model: &dyn RegressionModel,
    config: &ExperimentConfig,
    schemes: &[ContaminationScheme],
    grid: &[f64],
    rep: usize,
) -> Vec<ReplicationRecord> {
    let r = rep as u64;
    let mut out = Vec::with_capacity(schemes.len() * config.estimators.len());
    let clean = match generate_sample(
        model,
        config.n,
        &config.truth,
        derive_seed(config.master_seed, &[r, 0]),
    ) {
        Ok(d) => d,
        Err(_) => unreachable!("config validated"),
    };
    let options = config
        .options
        .with_seed(derive_seed(config.master_seed, &[r, 2]));
    for scheme in schemes {
        let data = apply_contamination(&clean, scheme, derive_seed(config.master_seed, &[r, 1]))
            .expect("scheme validated");
        let mut initial: BTreeMap<bool, InitialFit> = BTreeMap::new();
        for &method in &config.estimators {
            let fit = match method.weighting() {
                None => fit_classical(&data, model, method).expect("classical method"),
                Some(w) => {
                    let init = initial
                        .entry(w == Weighting::BisquareLeverage)
                        .or_insert_with(|| fit_initial(&data, model, &options, w));
                    match method {
                        Method::MM | Method::WMM => homoscedastic_result(init, model),
                        Method::HMM | Method::HWMM => {
                            fit_stepwise_from(&data, model, &options, init)
                        }
                        _ => fit_stepwise_n_from(&data, model, &options, init),
                    }
                }
            };
            let curve = if fit.failed() {
                None
            } else {
                fit.variance_curve(model, grid)
            };
            out.push(ReplicationRecord {
                scheme: scheme.name.clone(),
                estimator: method,
                replication: rep,
                fit,
                curve,
            });
        }
    }
    out
}

/// Runs every (scheme, estimator) cell over `nrep` replications. Clean
/// samples and solver seeds are shared across schemes and estimators within a
/// replication.
pub fn run_experiment(config: &ExperimentConfig) -> Result<SimulationReport> {
    let (model, schemes) = config.validate()?;
    let grid = curve_grid();
    let model = model.as_ref();
    let work = || -> Vec<Vec<ReplicationRecord>> {
        (0..config.nrep)
            .into_par_iter()
            .map(|rep| run_replication(model, config, &schemes, &grid, rep))
            .collect()
    };
    let per_rep = if config.threads == 0 {
        work()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work)
    };
    // order: scheme, estimator, replication
    let mut records: Vec<ReplicationRecord> =
        Vec::with_capacity(config.nrep * schemes.len() * config.estimators.len());
    for scheme in &schemes {
        for &method in &config.estimators {
            for rep in &per_rep {
                records.extend(
                    rep.iter()
                        .filter(|r| r.scheme == scheme.name && r.estimator == method)
                        .cloned(),
                );
            }
        }
    }
    let mut cells = Vec::new();
    for scheme in &schemes {
        for &method in &config.estimators {
            let recs: Vec<&ReplicationRecord> = records
                .iter()
                .filter(|r| r.scheme == scheme.name && r.estimator == method)
                .collect();
            let est: Vec<Vec<f64>> = recs
                .iter()
                .filter(|r| r.included())
                .map(|r| r.fit.beta.clone().unwrap())
                .collect();
            let (mse, bias) = mse_bias(&est, &config.truth.beta);
            cells.push(CellSummary {
                scheme: scheme.name.clone(),
                estimator: method,
                included: est.len(),
                excluded: recs.len() - est.len(),
                not_converged: recs
                    .iter()
                    .filter(|r| r.included() && !r.fit.converged())
                    .count(),
                mse,
                bias,
            });
        }
    }
    let true_curve = grid
        .iter()
        .map(|&x| config.truth.variance_curve(model, x))
        .collect();
    Ok(SimulationReport {
        config: config.clone(),
        grid,
        true_curve,
        cells,
        records,
    })
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub scheme: String,
    pub estimator: Method,
    pub curves: usize,
    pub x: Vec<f64>,
    pub q025: Vec<f64>,
    pub q25: Vec<f64>,
    pub median: Vec<f64>,
    pub q75: Vec<f64>,
    pub q975: Vec<f64>,
    pub truth: Vec<f64>,
}

/// Pointwise quantile bands of the estimated variance curves of one cell.
pub fn summarize_curves(
    report: &SimulationReport,
    estimator: Method,
    scheme: &str,
) -> Result<CurveBand> {
    let curves: Vec<&Vec<f64>> = report
        .records_for(scheme, estimator)
        .filter(|r| r.included())
        .filter_map(|r| r.curve.as_ref())
        .collect();
    if curves.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no variance curves for {estimator} under {scheme}"
        )));
    }
    let m = report.grid.len();
    let mut band = CurveBand {
        scheme: scheme.into(),
        estimator,
        curves: curves.len(),
        x: report.grid.clone(),
        q025: Vec::with_capacity(m),
        q25: Vec::with_capacity(m),
        median: Vec::with_capacity(m),
        q75: Vec::with_capacity(m),
        q975: Vec::with_capacity(m),
        truth: report.true_curve.clone(),
    };
    let mut col = Vec::with_capacity(curves.len());
    for j in 0..m {
        col.clear();
        col.extend(curves.iter().map(|c| c[j]));
        col.sort_by(f64::total_cmp);
        band.q025.push(quantile_sorted(&col, 0.025));
        band.q25.push(quantile_sorted(&col, 0.25));
        band.median.push(quantile_sorted(&col, 0.5));
        band.q75.push(quantile_sorted(&col, 0.75));
        band.q975.push(quantile_sorted(&col, 0.975));
    }
    Ok(band)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExponentialGrowth;

    fn small(schemes: &[&str], estimators: &[Method], nrep: usize) -> ExperimentConfig {
        ExperimentConfig {
            nrep,
            master_seed: 11,
            schemes: schemes
                .iter()
                .map(|s| SchemeSpec::Named(s.to_string()))
                .collect(),
            estimators: estimators.to_vec(),
            ..Default::default()
        }
    }

    #[test]
    fn zero_sigma_lies_on_curve() {
        let t = Truth {
            sigma: 0.0,
            ..Default::default()
        };
        let d = generate_sample(&ExponentialGrowth, 50, &t, 3).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.y(i), 5.0 * (2.0 * d.x(i)[0]).exp());
        }
    }

    #[test]
    fn standardized_errors_have_unit_moments() {
        let t = Truth::default();
        let m = ExponentialGrowth;
        let d = generate_sample(&m, 100_000, &t, 9).unwrap();
        let e: Vec<f64> = (0..d.len())
            .map(|i| (d.y(i) - m.eval(d.x(i), &t.beta)) / t.variance_curve(&m, d.x(i)[0]))
            .collect();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let sd = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (e.len() - 1) as f64).sqrt();
        assert!(mean.abs() < 0.02 && (sd - 1.0).abs() < 0.02, "{mean} {sd}");
        assert!(d.xs().iter().all(|x| (0.0..1.0).contains(x)));
    }

    #[test]
    fn sample_is_seed_deterministic() {
        let a = generate_sample(&ExponentialGrowth, 100, &Truth::default(), 5).unwrap();
        let b = generate_sample(&ExponentialGrowth, 100, &Truth::default(), 5).unwrap();
        assert_eq!(a, b);
        assert!(generate_sample(&ExponentialGrowth, 0, &Truth::default(), 5).is_err());
    }

    #[test]
    fn contamination_replaces_tail_only() {
        let clean = generate_sample(&ExponentialGrowth, 100, &Truth::default(), 1).unwrap();
        for (name, x0, y0) in [("C2", 0.01, 50.0), ("D1", 3.5, 90.0)] {
            let s = ContaminationScheme::builtin(name).unwrap();
            let d = apply_contamination(&clean, &s, 2).unwrap();
            for i in 0..95 {
                assert_eq!((d.x(i), d.y(i)), (clean.x(i), clean.y(i)));
            }
            for i in 95..100 {
                assert_eq!(d.y(i), y0);
                assert!((d.x(i)[0] - x0).abs() < 5e-4);
                assert_ne!(d.x(i)[0], x0);
            }
        }
        let mut zero = ContaminationScheme::builtin("C3").unwrap();
        zero.fraction = 0.0;
        assert_eq!(apply_contamination(&clean, &zero, 2).unwrap(), clean);
        assert_eq!(ContaminationScheme::builtin("C1").unwrap().count(101), 6);
    }

    #[test]
    fn quantiles_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert!((quantile_sorted(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(small(&["C0"], &[Method::LS], 1).validate().is_ok());
        assert!(small(&["C9"], &[Method::LS], 1).validate().is_err());
        assert!(small(&["C0"], &[Method::LS], 0).validate().is_err());
        let err = parse_config(r#"{"estimators": ["LS", "HMMQ"]}"#).unwrap_err();
        assert!(err.to_string().contains("HMMQ"), "{err}");
        let c = parse_config(r#"{"nrep": 3, "schemes": ["C1", {"name": "X", "fraction": 0.1, "x0": 0.5, "y0": 80}]}"#).unwrap();
        let (_, s) = c.validate().unwrap();
        assert_eq!(s[1].jitter_sd, 1e-4);
        assert!(parse_config(r#"{"nrepz": 3}"#).is_err());
    }

    #[test]
    fn exact_data_gives_zero_error_rows() {
        let mut c = small(&["C0"], &Method::ALL, 1);
        c.truth.sigma = 0.0;
        let r = run_experiment(&c).unwrap();
        for cell in &r.cells {
            assert_eq!(cell.included, 1);
            assert!(cell.mse.iter().all(|&m| m < 1e-12), "{cell:?}");
        }
    }

    #[test]
    fn mse_dominates_squared_bias_and_c0_is_clean() {
        let methods = [Method::LS, Method::MM, Method::HMM_N];
        let r = run_experiment(&small(&["C0", "C2"], &methods, 6)).unwrap();
        for cell in &r.cells {
            for k in 0..2 {
                assert!(cell.mse[k] >= cell.bias[k] * cell.bias[k]);
            }
        }
        // C0 must match a run on the uncontaminated samples
        let clean = small(&["C0"], &methods, 6);
        let model = ExponentialGrowth;
        let opts = clean.options.with_seed(derive_seed(11, &[2, 2]));
        let d = generate_sample(&model, 100, &clean.truth, derive_seed(11, &[2, 0])).unwrap();
        let direct = crate::pipeline::fit(&d, &model, Method::HMM_N, &opts).unwrap();
        let rec = r
            .records_for("C0", Method::HMM_N)
            .find(|x| x.replication == 2)
            .unwrap();
        assert_eq!(rec.fit, direct);
    }

    #[test]
    fn report_independent_of_thread_count() {
        let mut a = small(&["C0", "D1"], &[Method::WMM, Method::HWMM], 4);
        a.threads = 1;
        let mut b = a.clone();
        b.threads = 3;
        let ra = run_experiment(&a).unwrap();
        let mut rb = run_experiment(&b).unwrap();
        rb.config.threads = 1;
        assert_eq!(
            serde_json::to_string(&ra).unwrap(),
            serde_json::to_string(&rb).unwrap()
        );
    }

    #[test]
    fn identical_curves_collapse_bands() {
        let mut c = small(&["C0"], &[Method::MM], 3);
        c.truth.sigma = 0.0;
        let mut r = run_experiment(&c).unwrap();
        let curve: Vec<f64> = r.grid.iter().map(|x| 1.0 + x).collect();
        for rec in &mut r.records {
            rec.curve = Some(curve.clone());
        }
        let b = summarize_curves(&r, Method::MM, "C0").unwrap();
        for v in [&b.q025, &b.q25, &b.median, &b.q75, &b.q975] {
            assert_eq!(v, &curve);
        }
        assert_eq!(b.curves, 3);
    }
}
