//! Levenberg–Marquardt least squares and the variance-weighted (HLS) baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    log_abs_residuals, variance_design, variance_divisors, Dataset, RegressionModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsFit {
    pub beta: Vec<f64>,
    /// Σ wᵢ (yᵢ − g(xᵢ, β))² at `beta`.
    pub rss: f64,
    pub converged: bool,
    pub iterations: usize,
}

const LM_MAX_ITER: usize = 500;
const LM_GRAD_TOL: f64 = 1e-8;
const LM_STEP_TOL: f64 = 1e-10;
const LM_MU_CAP: f64 = 1e30;

fn weighted_rss(
    data: &Dataset,
    model: &dyn RegressionModel,
    beta: &[f64],
    w: Option<&[f64]>,
) -> f64 {
    (0..data.len())
        .map(|i| {
            let r = data.y(i) - model.eval(data.x(i), beta);
            w.map_or(1.0, |w| w[i]) * r * r
        })
        .sum()
}

/// Normal-equation pieces JᵀWJ and JᵀWr at `beta`.
fn normal_equations(
    data: &Dataset,
    model: &dyn RegressionModel,
    beta: &[f64],
    w: Option<&[f64]>,
) -> (DMatrix<f64>, DVector<f64>) {
    let p = beta.len();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut g = DVector::<f64>::zeros(p);
    let mut grad = vec![0.0; p];
    for i in 0..data.len() {
        let wi = w.map_or(1.0, |w| w[i]);
        if wi == 0.0 {
            continue;
        }
        let x = data.x(i);
        let r = data.y(i) - model.eval(x, beta);
        model.gradient(x, beta, &mut grad);
        for j in 0..p {
            g[j] += wi * grad[j] * r;
            for k in 0..=j {
                a[(j, k)] += wi * grad[j] * grad[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            a[(k, j)] = a[(j, k)];
        }
    }
    (a, g)
}

const RSS_SLACK: f64 = 64.0 * f64::EPSILON;

/// Minimizes Σ wᵢ (yᵢ − g(xᵢ, β))² by Levenberg–Marquardt from `beta0`.
///
/// Damping starts at 1e-3 times the largest diagonal entry of JᵀWJ, grows
/// tenfold on a rejected step and shrinks threefold on an accepted one.
/// Hitting the iteration cap returns the best iterate with `converged = false`.
pub fn nonlinear_ls(
    data: &Dataset,
    model: &dyn RegressionModel,
    beta0: &[f64],
    case_weights: Option<&[f64]>,
) -> Result<LsFit> {
    let n = data.len();
    let p = model.n_beta();
    if beta0.len() != p {
        return Err(Error::InvalidInput(format!(
            "expected {p} starting values, got {}",
            beta0.len()
        )));
    }
    if n < p {
        return Err(Error::InvalidInput(format!(
            "need at least {p} observations, got {n}"
        )));
    }
    if beta0.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidInput("non-finite starting value".into()));
    }
    if let Some(w) = case_weights {
        if w.len() != n || w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "case weights must be finite, nonnegative and one per row".into(),
            ));
        }
    }

    let mut beta = beta0.to_vec();
    let mut rss = weighted_rss(data, model, &beta, case_weights);
    if !rss.is_finite() {
        return Err(Error::InvalidInput(
            "objective is not finite at the starting value".into(),
        ));
    }
    let mut mu: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < LM_MAX_ITER {
        iterations += 1;
        let (a, g) = normal_equations(data, model, &beta, case_weights);
        let max_diag = (0..p).map(|j| a[(j, j)]).fold(0.0f64, f64::max);
        if !(max_diag > 0.0) || !max_diag.is_finite() {
            if max_diag == 0.0 && iterations == 1 {
                return Err(Error::RankDeficient);
            }
            break;
        }
        if g.norm() == 0.0 {
            converged = true;
            break;
        }
        let mut damping = *mu.get_or_insert(1e-3 * max_diag);

        let mut accepted = false;
        let mut factorized_once = false;
        let mut last_step_norm = f64::INFINITY;
        while damping <= LM_MU_CAP * (1.0 + max_diag) {
            let mut m = a.clone();
            for j in 0..p {
                m[(j, j)] += damping;
            }
            let Some(chol) = m.cholesky() else {
                damping *= 10.0;
                continue;
            };
            factorized_once = true;
            let delta = chol.solve(&g);
            last_step_norm = delta.norm();
            let trial: Vec<f64> = beta.iter().zip(delta.iter()).map(|(b, d)| b + d).collect();
            let trial_rss = weighted_rss(data, model, &trial, case_weights);
            // slack at rounding level so the final Gauss-Newton steps, whose
            // gain the RSS can no longer resolve, are still taken
            if trial_rss.is_finite() && trial_rss <= rss + RSS_SLACK * rss {
                beta = trial;
                rss = trial_rss;
                damping /= 3.0;
                accepted = true;
                break;
            }
            let beta_norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
            if last_step_norm <= LM_STEP_TOL * (1.0 + beta_norm) {
                break;
            }
            damping *= 10.0;
        }
        mu = Some(damping);
        if !factorized_once {
            return Err(Error::RankDeficient);
        }
        let beta_norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        if last_step_norm <= LM_STEP_TOL * (1.0 + beta_norm) {
            converged = true;
            break;
        }
        if !accepted {
            // no descent at any damping level: numerically stationary
            converged = g.norm() <= LM_GRAD_TOL * (1.0 + rss);
            break;
        }
    }

    Ok(LsFit {
        beta,
        rss,
        converged,
        iterations,
    })
}

/// Ordinary least squares with an intercept column prepended to `rows`.
/// Returns (intercept, slopes) or `None` for a singular design.
pub(crate) fn ols_with_intercept(rows: &[Vec<f64>], z: &[f64]) -> Option<(f64, Vec<f64>)> {
    let n = rows.len();
    let q = rows.first()?.len();
    let design = DMatrix::from_fn(n, q + 1, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let zt = DVector::from_column_slice(z);
    let coef = design.clone().svd(true, true).solve(&zt, 1e-12).ok()?;
    let gram = design.transpose() * &design;
    if gram.rank(1e-10 * gram.norm()) < q + 1 {
        return None;
    }
    coef.iter()
        .all(|v| v.is_finite())
        .then(|| (coef[0], coef.iter().skip(1).copied().collect()))
}

/// E[log|ε|] for standard normal ε: −(γ + log 2)/2.
pub const LOG_ABS_NORMAL_MEAN: f64 = -0.635_181_422_730_739_1;

/// Classical variance-weighted least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HlsFit {
    /// Unweighted LS fit used to estimate the variance function.
    pub ls: LsFit,
    /// Intercept of the log-residual regression.
    pub log_intercept: f64,
    /// Slopes of the log-residual regression.
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub converged: bool,
    /// Sample standard deviation of (yᵢ − g(xᵢ, β̂))/υ(xᵢ, λ̂, β̂).
    pub sigma: f64,
    /// exp(intercept − E log|ε|), the normal-theory scale from the log fit.
    pub sigma_from_intercept: f64,
}

/// Log-residual least-squares fit of the variance parameters at `beta`:
/// log|yᵢ − g(xᵢ, β)| on h(xᵢ, β). Returns (intercept, slopes).
pub fn log_residual_ls(
    data: &Dataset,
    model: &dyn RegressionModel,
    beta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let z = log_abs_residuals(data, model, beta);
    let v = variance_design(data, model, beta);
    ols_with_intercept(&v, &z)
        .ok_or_else(|| Error::InvalidInput("singular log-residual design".into()))
}

/// Sample standard deviation of residuals scaled by the fitted variance function.
pub fn scaled_residual_sd(
    data: &Dataset,
    model: &dyn RegressionModel,
    beta: &[f64],
    lambda: &[f64],
) -> Result<f64> {
    let r = crate::model::residuals(data, model, beta, lambda)?;
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    Ok((r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt())
}

/// LS fit, log-residual regression for λ, then case-weighted LS with weights
/// 1/υ(xᵢ, λ̂, β̂_LS)².
pub fn weighted_ls(data: &Dataset, model: &dyn RegressionModel, beta0: &[f64]) -> Result<HlsFit> {
    let p = model.n_beta();
    let q = model.n_lambda();
    if data.len() < p + q + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least {} observations, got {}",
            p + q + 1,
            data.len()
        )));
    }
    let ls = nonlinear_ls(data, model, beta0, None)?;
    let (alpha, lambda) = log_residual_ls(data, model, &ls.beta)?;
    let div = variance_divisors(data, model, &ls.beta, &lambda)?;
    let weights: Vec<f64> = div.iter().map(|d| 1.0 / (d * d)).collect();
    let wls = nonlinear_ls(data, model, &ls.beta, Some(&weights))?;
    let sigma = scaled_residual_sd(data, model, &wls.beta, &lambda)?;
    Ok(HlsFit {
        converged: ls.converged && wls.converged,
        beta: wls.beta,
        log_intercept: alpha,
        sigma,
        sigma_from_intercept: (alpha - LOG_ABS_NORMAL_MEAN).exp(),
        lambda,
        ls,
    })
}
