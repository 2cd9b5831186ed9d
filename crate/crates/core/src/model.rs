//! Regression functions, the exponential variance link and scaled residuals.

use std::fmt;

use crate::error::{Error, Result};

/// Largest exponent accepted by the variance link before reporting overflow.
pub const EXPONENT_LIMIT: f64 = 700.0;

/// Observations with `dim` covariates per row, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput(
                "covariate dimension must be positive".into(),
            ));
        }
        if x.len() != dim * y.len() {
            return Err(Error::InvalidInput(format!(
                "covariate buffer has {} values, expected {} x {}",
                x.len(),
                y.len(),
                dim
            )));
        }
        Ok(Self { dim, x, y })
    }

    /// Scalar-covariate convenience constructor.
    pub fn from_scalar(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        Self::new(1, x, y)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn ys(&self) -> &[f64] {
        &self.y
    }

    pub fn xs(&self) -> &[f64] {
        &self.x
    }

    /// Replaces the response vector, keeping the covariates.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.dim, self.x.clone(), y)
    }

    pub(crate) fn set_row(&mut self, i: usize, x: &[f64], y: f64) {
        self.x[i * self.dim..(i + 1) * self.dim].copy_from_slice(x);
        self.y[i] = y;
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        let mut y = Vec::with_capacity(rows.len());
        for &i in rows {
            x.extend_from_slice(self.x(i));
            y.push(self.y[i]);
        }
        Dataset {
            dim: self.dim,
            x,
            y,
        }
    }
}

/// A nonlinear regression function together with the covariate map of its
/// exponential variance link, υ(x, λ, β) = exp(λᵀh(x, β)).
///
/// Implementations must be free of side effects: the estimators evaluate
/// these maps concurrently and in arbitrary order.
pub trait RegressionModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Number of regression parameters.
    fn n_beta(&self) -> usize;

    /// Number of variance parameters.
    fn n_lambda(&self) -> usize;

    /// Covariates per observation.
    fn n_covariates(&self) -> usize;

    fn eval(&self, x: &[f64], beta: &[f64]) -> f64;

    /// Writes ∂g/∂β into `out` (length `n_beta`).
    fn gradient(&self, x: &[f64], beta: &[f64], out: &mut [f64]);

    /// Writes h(x, β) into `out` (length `n_lambda`).
    fn variance_covariates(&self, x: &[f64], beta: &[f64], out: &mut [f64]);

    /// A cheap data-driven starting value for iterative fits, if the model
    /// knows one.
    fn initial_guess(&self, _data: &Dataset) -> Option<Vec<f64>> {
        None
    }
}

/// g(x, β) = β₁·exp(β₂x) with variance covariate h(x) = (x + 1)².
#[derive(Debug, Clone, Copy, Default)]
pub struct ExponentialGrowth;

impl RegressionModel for ExponentialGrowth {
    fn name(&self) -> &str {
        "exp-growth"
    }

    fn n_beta(&self) -> usize {
        2
    }

    fn n_lambda(&self) -> usize {
        1
    }

    fn n_covariates(&self) -> usize {
        1
    }

    #[inline]
    fn eval(&self, x: &[f64], beta: &[f64]) -> f64 {
        beta[0] * (beta[1] * x[0]).exp()
    }

    #[inline]
    fn gradient(&self, x: &[f64], beta: &[f64], out: &mut [f64]) {
        let e = (beta[1] * x[0]).exp();
        out[0] = e;
        out[1] = beta[0] * x[0] * e;
    }

    #[inline]
    fn variance_covariates(&self, x: &[f64], _beta: &[f64], out: &mut [f64]) {
        let s = x[0] + 1.0;
        out[0] = s * s;
    }

    /// Least-squares line through (x, log max(y, ε)): slope → β₂, exp(intercept) → β₁.
    fn initial_guess(&self, data: &Dataset) -> Option<Vec<f64>> {
        let n = data.len();
        if n == 0 {
            return None;
        }
        let floor = {
            let m = data.ys().iter().fold(0.0f64, |a, &y| a.max(y.abs()));
            (m * 1e-6).max(1e-8)
        };
        let (mut sx, mut sz) = (0.0, 0.0);
        let zs: Vec<f64> = data.ys().iter().map(|&y| y.max(floor).ln()).collect();
        for (i, z) in zs.iter().enumerate() {
            sx += data.x(i)[0];
            sz += z;
        }
        let (mx, mz) = (sx / n as f64, sz / n as f64);
        let (mut sxx, mut sxz) = (0.0, 0.0);
        for (i, z) in zs.iter().enumerate() {
            let dx = data.x(i)[0] - mx;
            sxx += dx * dx;
            sxz += dx * (z - mz);
        }
        let slope = if sxx > 0.0 { sxz / sxx } else { 0.0 };
        let intercept = mz - slope * mx;
        let guess = vec![intercept.exp(), slope];
        guess.iter().all(|v| v.is_finite()).then_some(guess)
    }
}

/// g(x, β) = β₁ + β₂x with variance covariate h(x) = x. Used for closed-form
/// checks of the estimators.
#[derive(Debug, Clone, Copy, Default)]
pub struct StraightLine;

impl RegressionModel for StraightLine {
    fn name(&self) -> &str {
        "linear"
    }

    fn n_beta(&self) -> usize {
        2
    }

    fn n_lambda(&self) -> usize {
        1
    }

    fn n_covariates(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64], beta: &[f64]) -> f64 {
        beta[0] + beta[1] * x[0]
    }

    fn gradient(&self, x: &[f64], _beta: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = x[0];
    }

    fn variance_covariates(&self, x: &[f64], _beta: &[f64], out: &mut [f64]) {
        out[0] = x[0];
    }

    fn initial_guess(&self, _data: &Dataset) -> Option<Vec<f64>> {
        Some(vec![0.0, 0.0])
    }
}

/// Looks up a built-in model by its command-line name.
pub fn builtin_model(name: &str) -> Option<Box<dyn RegressionModel>> {
    match name {
        "exp-growth" => Some(Box::new(ExponentialGrowth)),
        "linear" => Some(Box::new(StraightLine)),
        _ => None,
    }
}

pub fn variance_covariates(model: &dyn RegressionModel, x: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; model.n_lambda()];
    model.variance_covariates(x, beta, &mut h);
    h
}

fn link_exponent(
    model: &dyn RegressionModel,
    x: &[f64],
    lambda: &[f64],
    beta: &[f64],
    h: &mut [f64],
) -> f64 {
    model.variance_covariates(x, beta, h);
    lambda.iter().zip(h.iter()).map(|(l, v)| l * v).sum()
}

/// υ(x, λ, β) = exp(λᵀh(x, β)). `observation` only labels the overflow error.
pub fn upsilon(
    model: &dyn RegressionModel,
    x: &[f64],
    lambda: &[f64],
    beta: &[f64],
    observation: usize,
) -> Result<f64> {
    let mut h = vec![0.0; model.n_lambda()];
    let e = link_exponent(model, x, lambda, beta, &mut h);
    if e > EXPONENT_LIMIT || e.is_nan() {
        return Err(Error::Overflow {
            observation,
            exponent: e,
            limit: EXPONENT_LIMIT,
        });
    }
    Ok(e.exp())
}

/// υ(xᵢ, λ, β) for every observation.
pub fn variance_divisors(
    data: &Dataset,
    model: &dyn RegressionModel,
    beta: &[f64],
    lambda: &[f64],
) -> Result<Vec<f64>> {
    let mut h = vec![0.0; model.n_lambda()];
    (0..data.len())
        .map(|i| {
            let e = link_exponent(model, data.x(i), lambda, beta, &mut h);
            if e > EXPONENT_LIMIT || e.is_nan() {
                Err(Error::Overflow {
                    observation: i,
                    exponent: e,
                    limit: EXPONENT_LIMIT,
                })
            } else {
                Ok(e.exp())
            }
        })
        .collect()
}

/// Raw residuals yᵢ − g(xᵢ, β).
pub fn raw_residuals(data: &Dataset, model: &dyn RegressionModel, beta: &[f64]) -> Vec<f64> {
    (0..data.len())
        .map(|i| data.y(i) - model.eval(data.x(i), beta))
        .collect()
}

/// rᵢ(β, λ) = (yᵢ − g(xᵢ, β)) / υ(xᵢ, λ, β).
pub fn residuals(
    data: &Dataset,
    model: &dyn RegressionModel,
    beta: &[f64],
    lambda: &[f64],
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("residuals of an empty dataset".into()));
    }
    if lambda.iter().all(|&l| l == 0.0) {
        return Ok(raw_residuals(data, model, beta));
    }
    let div = variance_divisors(data, model, beta, lambda)?;
    Ok(raw_residuals(data, model, beta)
        .into_iter()
        .zip(div)
        .map(|(r, d)| r / d)
        .collect())
}

/// Rows h(xᵢ, β) for the log-residual pseudo regression.
pub fn variance_design(data: &Dataset, model: &dyn RegressionModel, beta: &[f64]) -> Vec<Vec<f64>> {
    (0..data.len())
        .map(|i| variance_covariates(model, data.x(i), beta))
        .collect()
}

/// Floor applied to |residual| before taking logs.
pub const LOG_RESIDUAL_FLOOR: f64 = 1e-12;

/// zᵢ = log|yᵢ − g(xᵢ, β)| with |r| floored at [`LOG_RESIDUAL_FLOOR`].
pub fn log_abs_residuals(data: &Dataset, model: &dyn RegressionModel, beta: &[f64]) -> Vec<f64> {
    raw_residuals(data, model, beta)
        .into_iter()
        .map(|r| r.abs().max(LOG_RESIDUAL_FLOOR).ln())
        .collect()
}
