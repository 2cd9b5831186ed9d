//! M-scale root finding and the joint (σ, λ) estimating equations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Bisquare, C_SCALE};
use crate::model::{
    raw_residuals, variance_covariates, Dataset, RegressionModel, EXPONENT_LIMIT,
    LOG_RESIDUAL_FLOOR,
};

/// ρ₀ and the breakdown target b of χ(u) = ρ₀(u) − b.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MScaleSpec {
    pub rho: Bisquare,
    pub b: f64,
}

impl MScaleSpec {
    pub fn new(rho: Bisquare, b: f64) -> Result<Self> {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::InvalidInput(format!(
                "breakdown target must lie in (0, 1), got {b}"
            )));
        }
        Ok(Self { rho, b })
    }

    pub fn breakdown_point(&self) -> f64 {
        self.b.min(1.0 - self.b)
    }

    #[inline]
    pub fn chi(&self, u: f64) -> f64 {
        self.rho.rho(u) - self.b
    }
}

impl Default for MScaleSpec {
    fn default() -> Self {
        Self {
            rho: Bisquare::new(C_SCALE).expect("valid constant"),
            b: 0.5,
        }
    }
}

const EXPANSION: f64 = 10.0;
const MAX_EXPANSIONS: usize = 300;
const BISECTION_RTOL: f64 = 1e-12;

/// (Σ wᵢ ρ(rᵢ/σ)) / Σ wᵢ, or the plain mean when `weights` is `None`.
#[inline]
pub fn mean_rho(residuals: &[f64], weights: Option<&[f64]>, sigma: f64, rho: &Bisquare) -> f64 {
    let inv = 1.0 / sigma;
    match weights {
        None => residuals.iter().map(|&r| rho.rho(r * inv)).sum::<f64>() / residuals.len() as f64,
        Some(w) => {
            let (mut num, mut den) = (0.0, 0.0);
            for (&r, &wi) in residuals.iter().zip(w) {
                num += wi * rho.rho(r * inv);
                den += wi;
            }
            num / den
        }
    }
}

/// Solves (1/n) Σ χ(rᵢ/σ) = 0 for σ.
pub fn m_scale(residuals: &[f64], spec: &MScaleSpec) -> Result<f64> {
    weighted_m_scale(residuals, None, spec)
}

/// Weighted M-scale: Σ wᵢ χ(rᵢ/σ) = 0. Unit weights give the same bits as
/// the unweighted solver.
pub fn weighted_m_scale(
    residuals: &[f64],
    weights: Option<&[f64]>,
    spec: &MScaleSpec,
) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::InvalidInput(
            "M-scale of an empty residual vector".into(),
        ));
    }
    if let Some(w) = weights {
        if w.len() != residuals.len() {
            return Err(Error::InvalidInput(
                "weight and residual lengths differ".into(),
            ));
        }
        if w.iter().any(|&v| !(v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidInput(
                "M-scale weights must be nonnegative with positive sum".into(),
            ));
        }
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidInput("non-finite residual in M-scale".into()));
    }
    // As σ → 0 the weighted mean of ρ tends to the weighted share of nonzero
    // residuals; a root exists only if that share exceeds b.
    let nonzero_share = {
        let (mut nz, mut tot) = (0.0, 0.0);
        for (i, &r) in residuals.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            tot += w;
            if r != 0.0 {
                nz += w;
            }
        }
        nz / tot
    };
    if nonzero_share == 0.0 {
        return Err(Error::DegenerateScale("all residuals are zero".into()));
    }
    if nonzero_share <= spec.b {
        return Err(Error::DegenerateScale(format!(
            "share of nonzero residuals {nonzero_share:.4} does not exceed b = {}",
            spec.b
        )));
    }

    let f = |s: f64| mean_rho(residuals, weights, s, &spec.rho) - spec.b;

    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let start = {
        let med = crate::kernels::median_in_place(&mut abs);
        if med > 0.0 {
            med / 0.6745
        } else {
            residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()))
        }
    };

    let (mut lo, mut hi) = (start, start);
    let mut expansions = 0;
    let mut f_hi = f(hi);
    while f_hi > 0.0 {
        lo = hi;
        hi *= EXPANSION;
        f_hi = f(hi);
        expansions += 1;
        if expansions > MAX_EXPANSIONS || !hi.is_finite() {
            return Err(Error::BracketNotFound { expansions, lo, hi });
        }
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if lo == hi {
        let mut f_lo = f(lo);
        while f_lo <= 0.0 {
            if f_lo == 0.0 {
                return Ok(lo);
            }
            hi = lo;
            lo /= EXPANSION;
            f_lo = f(lo);
            expansions += 1;
            if expansions > MAX_EXPANSIONS || lo == 0.0 {
                return Err(Error::BracketNotFound { expansions, lo, hi });
            }
        }
    }

    // f(lo) > 0 > f(hi)
    while hi - lo > BISECTION_RTOL * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm > 0.0 {
            lo = mid;
        } else if fm < 0.0 {
            hi = mid;
        } else {
            return Ok(mid);
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Solution of the joint scale / variance-parameter equations at a fixed β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaLambdaEstimate {
    pub sigma: f64,
    pub lambda: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual_norm: f64,
}

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_MAX_HALVINGS: usize = 20;
const NEWTON_TOL: f64 = 1e-8;
const FD_STEP: f64 = 1e-6;

struct JointSystem<'a> {
    raw: Vec<f64>,
    h: Vec<Vec<f64>>,
    w2: Option<&'a [f64]>,
    spec: &'a MScaleSpec,
    q: usize,
}

struct Evaluation {
    sigma: f64,
    values: Vec<f64>,
    norm: f64,
}

impl JointSystem<'_> {
    fn scaled(&self, lambda: &[f64]) -> Option<Vec<f64>> {
        self.raw
            .iter()
            .zip(&self.h)
            .map(|(&e, h)| {
                let s: f64 = lambda.iter().zip(h).map(|(l, v)| l * v).sum();
                (s.abs() <= EXPONENT_LIMIT).then(|| e / s.exp())
            })
            .collect()
    }

    /// Returns σ(λ) and the stacked system [mean χ, mean χ·w₂·h].
    fn evaluate(&self, lambda: &[f64]) -> Option<Evaluation> {
        let r = self.scaled(lambda)?;
        let sigma = m_scale(&r, self.spec).ok()?;
        let n = r.len() as f64;
        let mut values = vec![0.0; self.q + 1];
        for (i, &ri) in r.iter().enumerate() {
            let chi = self.spec.chi(ri / sigma);
            values[0] += chi;
            let w = self.w2.map_or(1.0, |w| w[i]);
            for (k, hv) in self.h[i].iter().enumerate() {
                values[k + 1] += chi * w * hv;
            }
        }
        values.iter_mut().for_each(|v| *v /= n);
        let norm = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        norm.is_finite().then_some(Evaluation {
            sigma,
            values,
            norm,
        })
    }

    fn newton(&self, start: &[f64]) -> (Vec<f64>, Option<Evaluation>, usize) {
        let mut lambda = start.to_vec();
        let Some(mut cur) = self.evaluate(&lambda) else {
            return (lambda, None, 0);
        };
        let mut it = 0;
        while it < NEWTON_MAX_ITER && cur.norm > NEWTON_TOL {
            it += 1;
            let q = self.q;
            let mut jac = DMatrix::<f64>::zeros(q, q);
            let mut ok = true;
            for j in 0..q {
                let step = FD_STEP * lambda[j].abs().max(1.0);
                let mut probe = lambda.clone();
                probe[j] += step;
                match self.evaluate(&probe) {
                    Some(ev) => {
                        for k in 0..q {
                            jac[(k, j)] = (ev.values[k + 1] - cur.values[k + 1]) / step;
                        }
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                break;
            }
            let rhs = DVector::from_iterator(q, cur.values[1..].iter().map(|v| -v));
            let Some(delta) = jac.lu().solve(&rhs) else {
                break;
            };
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=NEWTON_MAX_HALVINGS {
                let trial: Vec<f64> = lambda
                    .iter()
                    .zip(delta.iter())
                    .map(|(l, d)| l + t * d)
                    .collect();
                if let Some(ev) = self.evaluate(&trial) {
                    if ev.norm < cur.norm {
                        accepted = Some((trial, ev));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((l, ev)) => {
                    lambda = l;
                    cur = ev;
                }
                None => break,
            }
        }
        (lambda, Some(cur), it)
    }
}

/// Solves, at fixed β, for (σ, λ) such that
/// (1/n) Σ χ(rᵢ(β, λ)/σ) = 0 and (1/n) Σ χ(rᵢ(β, λ)/σ) w₂ᵢ h(xᵢ, β) = 0.
///
/// σ is eliminated exactly by the M-scale for each trial λ; the remaining
/// q equations are solved by damped Newton from several starts (zero, a
/// log-residual moment fit, and `previous` if given).
pub fn solve_sigma_lambda(
    data: &Dataset,
    beta: &[f64],
    model: &dyn RegressionModel,
    spec: &MScaleSpec,
    w2: Option<&[f64]>,
    previous: Option<&[f64]>,
) -> Result<SigmaLambdaEstimate> {
    let n = data.len();
    let q = model.n_lambda();
    if n <= q + 1 {
        return Err(Error::InvalidInput(format!(
            "need more than {} observations, got {n}",
            q + 1
        )));
    }
    if let Some(w) = w2 {
        if w.len() != n {
            return Err(Error::InvalidInput(
                "leverage weight length differs from sample size".into(),
            ));
        }
    }
    let raw = raw_residuals(data, model, beta);
    // degenerate residual configurations do not depend on λ
    m_scale(&raw, spec)?;

    let h: Vec<Vec<f64>> = (0..n)
        .map(|i| variance_covariates(model, data.x(i), beta))
        .collect();
    let system = JointSystem {
        raw,
        h,
        w2,
        spec,
        q,
    };

    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; q]];
    if let Some(m) = log_residual_moment_fit(&system.raw, &system.h) {
        starts.push(m);
    }
    if let Some(p) = previous {
        if p.len() == q && p.iter().all(|v| v.is_finite()) {
            starts.push(p.to_vec());
        }
    }

    let mut best: Option<(Vec<f64>, Evaluation, usize)> = None;
    let mut total_iter = 0;
    for start in &starts {
        let (lambda, ev, it) = system.newton(start);
        total_iter += it;
        let Some(ev) = ev else { continue };
        let better = match &best {
            None => true,
            Some((bl, bev, _)) => {
                ev.norm < bev.norm || (ev.norm == bev.norm && norm2(&lambda) < norm2(bl))
            }
        };
        if better {
            best = Some((lambda, ev, it));
        }
    }
    let (lambda, ev, _) = best.ok_or_else(|| {
        Error::DegenerateScale("variance equations could not be evaluated at any start".into())
    })?;
    Ok(SigmaLambdaEstimate {
        sigma: ev.sigma,
        converged: ev.norm <= NEWTON_TOL,
        iterations: total_iter,
        final_residual_norm: ev.norm,
        lambda,
    })
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Least-squares slope of log|eᵢ| on hᵢ (with intercept).
fn log_residual_moment_fit(raw: &[f64], h: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = raw.len();
    let q = h.first()?.len();
    let design = DMatrix::from_fn(n, q + 1, |i, j| if j == 0 { 1.0 } else { h[i][j - 1] });
    let z = DVector::from_iterator(n, raw.iter().map(|r| r.abs().max(LOG_RESIDUAL_FLOOR).ln()));
    let coef = (design.transpose() * &design)
        .lu()
        .solve(&(design.transpose() * z))?;
    let slope: Vec<f64> = coef.iter().skip(1).copied().collect();
    slope.iter().all(|v| v.is_finite()).then_some(slope)
}
