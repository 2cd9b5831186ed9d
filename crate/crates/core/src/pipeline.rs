//! The two stepwise procedures and the classical baselines, producing a
//! common [`FitResult`].
//!
//! Stepwise: robust homoscedastic start, joint (σ, λ) equations,
//! heteroscedastic MM with the variance frozen at the start, and a robust
//! log-residual regression for a refined λ.
//!
//! Log-regression variant (`_N`): the variance parameters come from a linear
//! MM fit of log|residual| on h(x, β) and σ from an S-scale, both before and
//! after the heteroscedastic MM step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{median_mad, Bisquare, CHI2_1_Q95};
use crate::mm::{linear_mm, nonlinear_mm, MmFit, MmOptions, ScaleOverride};
use crate::model::{
    log_abs_residuals, residuals, variance_covariates, variance_design, variance_divisors, Dataset,
    RegressionModel,
};
use crate::nls::{log_residual_ls, nonlinear_ls, scaled_residual_sd, weighted_ls};
use crate::scale::{m_scale, solve_sigma_lambda};
use crate::seeds::derive_seed;

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    LS,
    HLS,
    MM,
    WMM,
    HMM,
    HWMM,
    HMM_N,
    HWMM_N,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::LS,
        Method::HLS,
        Method::MM,
        Method::WMM,
        Method::HMM,
        Method::HWMM,
        Method::HMM_N,
        Method::HWMM_N,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::LS => "LS",
            Method::HLS => "HLS",
            Method::MM => "MM",
            Method::WMM => "WMM",
            Method::HMM => "HMM",
            Method::HWMM => "HWMM",
            Method::HMM_N => "HMM_N",
            Method::HWMM_N => "HWMM_N",
        }
    }

    /// Leverage weighting used by the robust methods; `None` for LS/HLS.
    pub fn weighting(&self) -> Option<Weighting> {
        match self {
            Method::LS | Method::HLS => None,
            Method::MM | Method::HMM | Method::HMM_N => Some(Weighting::Unweighted),
            Method::WMM | Method::HWMM | Method::HWMM_N => Some(Weighting::BisquareLeverage),
        }
    }

    /// Methods that carry a refined variance parameter.
    pub fn is_robust_heteroscedastic(&self) -> bool {
        matches!(
            self,
            Method::HMM | Method::HWMM | Method::HMM_N | Method::HWMM_N
        )
    }

    pub fn min_observations(&self, p: usize, q: usize) -> usize {
        match self {
            Method::LS => p,
            Method::HLS => p + q + 1,
            Method::MM | Method::WMM => p + 1,
            _ => p + q + 2,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown method tag `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Unweighted,
    BisquareLeverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub mm: MmOptions,
    /// Bisquare constant for the covariate leverage weights.
    pub leverage_c: f64,
    /// Normalization of the MAD entering the covariate scale
    /// (4/√12)·k·MAD; the default is the usual normal-consistency factor.
    pub leverage_mad_constant: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            mm: MmOptions::default(),
            leverage_c: CHI2_1_Q95,
            leverage_mad_constant: NORMAL_MAD_CONSTANT,
        }
    }
}

impl FitOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.mm.seed = seed;
        self
    }

    fn stage_options(&self, stage: u64) -> MmOptions {
        self.mm.with_seed(derive_seed(self.mm.seed, &[stage]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub stage: String,
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub beta_ini: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub sigma: Option<f64>,
    pub lambda: Option<Vec<f64>>,
    pub lambda_refined: Option<Vec<f64>>,
    pub sigma_refined: Option<f64>,
    /// Intercept of the final log-residual regression.
    pub log_intercept: Option<f64>,
    /// Set when the robust start fits the data exactly; the later stages are
    /// skipped and σ̂ is reported as 0.
    pub exact_fit: bool,
    pub overflow: bool,
    pub stages: Vec<StageDiagnostics>,
}

impl FitResult {
    fn new(method: Method) -> Self {
        Self {
            method,
            beta_ini: None,
            beta: None,
            sigma: None,
            lambda: None,
            lambda_refined: None,
            sigma_refined: None,
            log_intercept: None,
            exact_fit: false,
            overflow: false,
            stages: Vec::new(),
        }
    }

    fn ok_stage(&mut self, stage: &str, converged: bool, iterations: usize) {
        self.stages.push(StageDiagnostics {
            stage: stage.into(),
            converged,
            iterations,
            error: None,
        });
    }

    fn fail_stage(&mut self, stage: &str, err: &Error) {
        if matches!(err, Error::Overflow { .. }) {
            self.overflow = true;
        }
        self.stages.push(StageDiagnostics {
            stage: stage.into(),
            converged: false,
            iterations: 0,
            error: Some(err.to_string()),
        });
    }

    /// True when some stage raised an error; later stages are then absent.
    pub fn failed(&self) -> bool {
        self.stages.iter().any(|s| s.error.is_some())
    }

    pub fn converged(&self) -> bool {
        !self.failed() && self.stages.iter().all(|s| s.converged)
    }

    /// σ̂ and λ̂ used for the fitted variance curve: the refined pair where
    /// available.
    pub fn variance_parameters(&self) -> Option<(f64, &[f64])> {
        let sigma = self.sigma_refined.or(self.sigma)?;
        let lambda = self.lambda_refined.as_deref().or(self.lambda.as_deref())?;
        Some((sigma, lambda))
    }

    /// σ̂·exp(λ̂ᵀh(x, β̂)) at each scalar covariate value in `grid`.
    pub fn variance_curve(&self, model: &dyn RegressionModel, grid: &[f64]) -> Option<Vec<f64>> {
        let (sigma, lambda) = self.variance_parameters()?;
        let beta = self.beta.as_deref()?;
        Some(
            grid.iter()
                .map(|&x| {
                    let h = variance_covariates(model, &[x], beta);
                    sigma * lambda.iter().zip(&h).map(|(l, v)| l * v).sum::<f64>().exp()
                })
                .collect(),
        )
    }
}

/// 1/Φ⁻¹(3/4).
pub const NORMAL_MAD_CONSTANT: f64 = 1.482_602_218_505_602;

/// Bisquare leverage weights w(x) = w_c(d²(x)), where d² is the squared
/// robust standardized distance from the coordinatewise median with scale
/// (4/√12)·mad_constant·MAD, summed over coordinates.
pub fn leverage_weights(data: &Dataset, c: f64, mad_constant: f64) -> Result<Vec<f64>> {
    let kernel = Bisquare::new(c)?;
    let k = data.dim();
    let n = data.len();
    if !(mad_constant > 0.0) {
        return Err(Error::InvalidInput("MAD constant must be positive".into()));
    }
    let consistency = mad_constant * 4.0 / 12f64.sqrt();
    let mut centers = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<f64> = (0..n).map(|i| data.x(i)[j]).collect();
        let ls = median_mad(&col, consistency)?;
        if ls.scale == 0.0 {
            return Err(Error::InvalidInput(format!("covariate {j} has zero MAD")));
        }
        centers.push(ls);
    }
    Ok((0..n)
        .map(|i| {
            let d2: f64 = data
                .x(i)
                .iter()
                .zip(&centers)
                .map(|(x, ls)| ((x - ls.location) / ls.scale).powi(2))
                .sum();
            kernel.weight(d2)
        })
        .collect())
}

/// Robust homoscedastic start shared by the MM/WMM and stepwise methods.
#[derive(Debug, Clone)]
pub struct InitialFit {
    pub weighting: Weighting,
    pub leverage: Option<Vec<f64>>,
    pub fit: Result<MmFit>,
}

pub fn fit_initial(
    data: &Dataset,
    model: &dyn RegressionModel,
    options: &FitOptions,
    weighting: Weighting,
) -> InitialFit {
    let leverage = match weighting {
        Weighting::Unweighted => None,
        Weighting::BisquareLeverage => {
            match leverage_weights(data, options.leverage_c, options.leverage_mad_constant) {
                Ok(w) => Some(w),
                Err(e) => {
                    return InitialFit {
                        weighting,
                        leverage: None,
                        fit: Err(e),
                    }
                }
            }
        }
    };
    let fit = nonlinear_mm(data, model, &options.mm, leverage.as_deref(), None);
    InitialFit {
        weighting,
        leverage,
        fit,
    }
}

fn tag(weighting: Weighting, homo: Method, weighted: Method) -> Method {
    match weighting {
        Weighting::Unweighted => homo,
        Weighting::BisquareLeverage => weighted,
    }
}

/// Starts a result from the robust initial fit, or returns it finished when
/// that fit failed or was exact.
fn begin(
    method: Method,
    init: &InitialFit,
    q: usize,
) -> std::result::Result<(FitResult, MmFit), Box<FitResult>> {
    let mut out = FitResult::new(method);
    let fit = match &init.fit {
        Ok(f) => f.clone(),
        Err(e) => {
            out.fail_stage("initial", e);
            return Err(Box::new(out));
        }
    };
    out.ok_stage("initial", fit.converged, fit.iterations);
    out.beta_ini = Some(fit.beta.clone());
    if fit.exact_fit {
        out.exact_fit = true;
        out.beta = Some(fit.beta.clone());
        out.sigma = Some(0.0);
        out.lambda = Some(vec![0.0; q]);
        if method.is_robust_heteroscedastic() {
            out.lambda_refined = Some(vec![0.0; q]);
            if matches!(method, Method::HMM_N | Method::HWMM_N) {
                out.sigma_refined = Some(0.0);
            }
        }
        return Err(Box::new(out));
    }
    Ok((out, fit))
}

/// MM or WMM: the robust homoscedastic fit on its own.
pub fn homoscedastic_result(init: &InitialFit, model: &dyn RegressionModel) -> FitResult {
    let method = tag(init.weighting, Method::MM, Method::WMM);
    match begin(method, init, model.n_lambda()) {
        Err(done) => *done,
        Ok((mut out, fit)) => {
            out.beta = Some(fit.beta);
            out.sigma = Some(fit.s_scale);
            out.lambda = Some(vec![0.0; model.n_lambda()]);
            out
        }
    }
}

/// Robust log-residual regression at β: slope → λ̂, intercept returned too.
fn log_residual_mm(
    data: &Dataset,
    model: &dyn RegressionModel,
    beta: &[f64],
    options: &MmOptions,
) -> Result<(f64, Vec<f64>, bool)> {
    let z = log_abs_residuals(data, model, beta);
    let v = variance_design(data, model, beta);
    let fit = linear_mm(&z, &v, options)?;
    Ok((fit.intercept, fit.slopes, fit.converged))
}

/// Heteroscedastic MM step with σ̂ and υ(xᵢ, λ̂, β̂_ini) frozen.
fn heteroscedastic_step(
    data: &Dataset,
    model: &dyn RegressionModel,
    options: &MmOptions,
    init: &InitialFit,
    beta_ini: &[f64],
    sigma: f64,
    lambda: &[f64],
) -> Result<MmFit> {
    let divisors = variance_divisors(data, model, beta_ini, lambda)?;
    nonlinear_mm(
        data,
        model,
        options,
        init.leverage.as_deref(),
        Some(ScaleOverride {
            sigma,
            divisors: &divisors,
            start: beta_ini,
        }),
    )
}

/// Steps 1–4 from a precomputed robust start.
pub fn fit_stepwise_from(
    data: &Dataset,
    model: &dyn RegressionModel,
    options: &FitOptions,
    init: &InitialFit,
) -> FitResult {
    let method = tag(init.weighting, Method::HMM, Method::HWMM);
    let (mut out, start) = match begin(method, init, model.n_lambda()) {
        Ok(v) => v,
        Err(done) => return *done,
    };
    let beta_ini = start.beta;

    let joint = match solve_sigma_lambda(
        data,
        &beta_ini,
        model,
        &options.mm.scale_spec(),
        init.leverage.as_deref(),
        None,
    ) {
        Ok(j) => j,
        Err(e) => {
            out.fail_stage("sigma-lambda", &e);
            return out;
        }
    };
    out.ok_stage("sigma-lambda", joint.converged, joint.iterations);
    out.sigma = Some(joint.sigma);
    out.lambda = Some(joint.lambda.clone());

    let step3 = match heteroscedastic_step(
        data,
        model,
        &options.stage_options(3),
        init,
        &beta_ini,
        joint.sigma,
        &joint.lambda,
    ) {
        Ok(f) => f,
        Err(e) => {
            out.fail_stage("heteroscedastic-mm", &e);
            return out;
        }
    };
    out.ok_stage("heteroscedastic-mm", step3.converged, step3.iterations);
    out.beta = Some(step3.beta.clone());

    match log_residual_mm(data, model, &step3.beta, &options.stage_options(4)) {
        Ok((alpha, slopes, conv)) => {
            out.ok_stage("variance-refit", conv, 0);
            out.log_intercept = Some(alpha);
            out.lambda_refined = Some(slopes);
        }
        Err(e) => out.fail_stage("variance-refit", &e),
    }
    out
}

/// Steps N1–N4 from a precomputed robust start.
pub fn fit_stepwise_n_from(
    data: &Dataset,
    model: &dyn RegressionModel,
    options: &FitOptions,
    init: &InitialFit,
) -> FitResult {
    let method = tag(init.weighting, Method::HMM_N, Method::HWMM_N);
    let (mut out, start) = match begin(method, init, model.n_lambda()) {
        Ok(v) => v,
        Err(done) => return *done,
    };
    let beta_ini = start.beta;
    let spec = options.mm.scale_spec();

    let lambda = match log_residual_mm(data, model, &beta_ini, &options.stage_options(12)) {
        Ok((_, slopes, conv)) => {
            out.ok_stage("log-variance", conv, 0);
            slopes
        }
        Err(e) => {
            out.fail_stage("log-variance", &e);
            return out;
        }
    };
    out.lambda = Some(lambda.clone());
    let sigma = match residuals(data, model, &beta_ini, &lambda).and_then(|r| m_scale(&r, &spec)) {
        Ok(s) => s,
        Err(e) => {
            out.fail_stage("s-scale", &e);
            return out;
        }
    };
    out.ok_stage("s-scale", true, 0);
    out.sigma = Some(sigma);

    let step3 = match heteroscedastic_step(
        data,
        model,
        &options.stage_options(13),
        init,
        &beta_ini,
        sigma,
        &lambda,
    ) {
        Ok(f) => f,
        Err(e) => {
            out.fail_stage("heteroscedastic-mm", &e);
            return out;
        }
    };
    out.ok_stage("heteroscedastic-mm", step3.converged, step3.iterations);
    out.beta = Some(step3.beta.clone());

    let refined = match log_residual_mm(data, model, &step3.beta, &options.stage_options(14)) {
        Ok((alpha, slopes, conv)) => {
            out.ok_stage("variance-refit", conv, 0);
            out.log_intercept = Some(alpha);
            slopes
        }
        Err(e) => {
            out.fail_stage("variance-refit", &e);
            return out;
        }
    };
    out.lambda_refined = Some(refined.clone());
    match residuals(data, model, &step3.beta, &refined).and_then(|r| m_scale(&r, &spec)) {
        Ok(s) => {
            out.ok_stage("s-scale-refit", true, 0);
            out.sigma_refined = Some(s);
        }
        Err(e) => out.fail_stage("s-scale-refit", &e),
    }
    out
}

fn check_size(data: &Dataset, model: &dyn RegressionModel, method: Method) -> Result<()> {
    let need = method.min_observations(model.n_beta(), model.n_lambda());
    if data.len() < need {
        return Err(Error::InvalidInput(format!(
            "{method} needs at least {need} observations, got {}",
            data.len()
        )));
    }
    if data.dim() != model.n_covariates() {
        return Err(Error::InvalidInput(format!(
            "model `{}` expects {} covariate column(s), data has {}",
            model.name(),
            model.n_covariates(),
            data.dim()
        )));
    }
    Ok(())
}

/// HMM (unweighted) or HWMM (bisquare leverage weights).
pub fn fit_stepwise(
    data: &Dataset,
    model: &dyn RegressionModel,
    options: &FitOptions,
    weighting: Weighting,
) -> Result<FitResult> {
    check_size(data, model, tag(weighting, Method::HMM, Method::HWMM))?;
    let init = fit_initial(data, model, options, weighting);
    Ok(fit_stepwise_from(data, model, options, &init))
}

/// HMM_N (unweighted) or HWMM_N (bisquare leverage weights).
pub fn fit_stepwise_n(
    data: &Dataset,
    model: &dyn RegressionModel,
    options: &FitOptions,
    weighting: Weighting,
) -> Result<FitResult> {
    check_size(data, model, tag(weighting, Method::HMM_N, Method::HWMM_N))?;
    let init = fit_initial(data, model, options, weighting);
    Ok(fit_stepwise_n_from(data, model, options, &init))
}

/// Least squares (LS) or variance-weighted least squares (HLS). Both report
/// the log-residual least-squares λ̂ and the standard deviation of the
/// variance-scaled residuals as σ̂.
pub fn fit_classical(
    data: &Dataset,
    model: &dyn RegressionModel,
    variant: Method,
) -> Result<FitResult> {
    if !matches!(variant, Method::LS | Method::HLS) {
        return Err(Error::InvalidInput(format!(
            "{variant} is not a classical method"
        )));
    }
    check_size(data, model, variant)?;
    let start = model
        .initial_guess(data)
        .unwrap_or_else(|| vec![1.0; model.n_beta()]);
    let mut out = FitResult::new(variant);
    if variant == Method::LS {
        let ls = match nonlinear_ls(data, model, &start, None) {
            Ok(f) => f,
            Err(e) => {
                out.fail_stage("least-squares", &e);
                return Ok(out);
            }
        };
        out.ok_stage("least-squares", ls.converged, ls.iterations);
        out.beta = Some(ls.beta.clone());
        if data.len() > model.n_beta() + model.n_lambda() {
            match log_residual_ls(data, model, &ls.beta)
                .and_then(|(a, l)| scaled_residual_sd(data, model, &ls.beta, &l).map(|s| (a, l, s)))
            {
                Ok((alpha, lambda, sigma)) => {
                    out.ok_stage("log-variance", true, 0);
                    out.log_intercept = Some(alpha);
                    out.lambda = Some(lambda);
                    out.sigma = Some(sigma);
                }
                Err(e) => out.fail_stage("log-variance", &e),
            }
        }
        return Ok(out);
    }
    match weighted_ls(data, model, &start) {
        Ok(h) => {
            out.ok_stage("weighted-least-squares", h.converged, h.ls.iterations);
            out.beta = Some(h.beta);
            out.lambda = Some(h.lambda);
            out.sigma = Some(h.sigma);
            out.log_intercept = Some(h.log_intercept);
        }
        Err(e) => out.fail_stage("weighted-least-squares", &e),
    }
    Ok(out)
}

/// Fits any method by tag.
pub fn fit(
    data: &Dataset,
    model: &dyn RegressionModel,
    method: Method,
    options: &FitOptions,
) -> Result<FitResult> {
    match method {
        Method::LS | Method::HLS => fit_classical(data, model, method),
        Method::MM | Method::WMM => {
            check_size(data, model, method)?;
            let init = fit_initial(data, model, options, method.weighting().expect("robust"));
            Ok(homoscedastic_result(&init, model))
        }
        Method::HMM | Method::HWMM => {
            fit_stepwise(data, model, options, method.weighting().expect("robust"))
        }
        Method::HMM_N | Method::HWMM_N => {
            fit_stepwise_n(data, model, options, method.weighting().expect("robust"))
        }
    }
}
