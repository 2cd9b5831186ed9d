//! S-initialized (weighted) MM regression, linear and nonlinear.
//!
//! Both estimators share one engine: a random elemental-subset search for
//! the S-estimator, IRWLS refinement of the best few candidates on the
//! M-scale criterion, then descent-guarded IRWLS on the ρ₁ objective with
//! the S-scale held fixed.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{mad_about_median, Bisquare, C_EFFICIENCY, C_SCALE};
use crate::model::{Dataset, RegressionModel};
use crate::nls::nonlinear_ls;
use crate::scale::{mean_rho, weighted_m_scale, MScaleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmOptions {
    pub rho0: Bisquare,
    pub rho1: Bisquare,
    pub b: f64,
    pub n_subsets: usize,
    /// Number of best subset candidates polished on the S-criterion.
    pub n_refine: usize,
    pub max_refine: usize,
    pub max_irwls: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for MmOptions {
    fn default() -> Self {
        Self {
            rho0: Bisquare::new(C_SCALE).expect("valid constant"),
            rho1: Bisquare::new(C_EFFICIENCY).expect("valid constant"),
            b: 0.5,
            n_subsets: 500,
            n_refine: 3,
            max_refine: 50,
            max_irwls: 200,
            tol: 1e-8,
            seed: 0,
        }
    }
}

impl MmOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn scale_spec(&self) -> MScaleSpec {
        MScaleSpec {
            rho: self.rho0,
            b: self.b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        MScaleSpec::new(self.rho0, self.b)?;
        if self.n_subsets == 0 || self.max_irwls == 0 {
            return Err(Error::InvalidInput(
                "n_subsets and max_irwls must be positive".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput("tolerance must be positive".into()));
        }
        // ρ₁ ≤ ρ₀ pointwise
        let top = self.rho1.c().max(self.rho0.c());
        for i in 0..=1000 {
            let t = top * i as f64 / 1000.0;
            if self.rho1.rho(t) > self.rho0.rho(t) + 1e-15 {
                return Err(Error::InvalidInput(format!(
                    "rho1 (c = {}) exceeds rho0 (c = {}) at t = {t}",
                    self.rho1.c(),
                    self.rho0.c()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmFit {
    pub beta: Vec<f64>,
    /// S-scale, or the supplied σ̂ when the scale stage was skipped.
    pub s_scale: f64,
    /// (1/n) Σ ρ₁(rᵢ/σ̂) wᵢ at `beta`.
    pub objective: f64,
    /// The same objective at the IRWLS starting point.
    pub start_objective: f64,
    /// Objective after each accepted IRWLS step, starting point first.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub exact_fit: bool,
    pub iterations: usize,
}

/// Linear MM fit of z on [1, v].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMmFit {
    pub intercept: f64,
    pub slopes: Vec<f64>,
    pub scale: f64,
    pub converged: bool,
    pub exact_fit: bool,
}

/// Fixed σ̂, per-observation variance divisors and starting point for the
/// heteroscedastic MM step; residuals become (yᵢ − g(xᵢ, β))/(σ̂ dᵢ).
#[derive(Debug, Clone, Copy)]
pub struct ScaleOverride<'a> {
    pub sigma: f64,
    pub divisors: &'a [f64],
    pub start: &'a [f64],
}

/// z = α + λᵀv as a regression model over rows v.
#[derive(Debug)]
struct LinearDesign {
    q: usize,
}

impl RegressionModel for LinearDesign {
    fn name(&self) -> &str {
        "linear-design"
    }
    fn n_beta(&self) -> usize {
        self.q + 1
    }
    fn n_lambda(&self) -> usize {
        0
    }
    fn n_covariates(&self) -> usize {
        self.q
    }
    fn eval(&self, x: &[f64], beta: &[f64]) -> f64 {
        beta[0] + x.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>()
    }
    fn gradient(&self, x: &[f64], _beta: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        out[1..].copy_from_slice(x);
    }
    fn variance_covariates(&self, _x: &[f64], _beta: &[f64], _out: &mut [f64]) {}
}

/// Residuals (yᵢ − g(xᵢ, β))/dᵢ with optional leverage weights wᵢ.
struct Criterion<'a> {
    data: &'a Dataset,
    model: &'a dyn RegressionModel,
    leverage: Option<&'a [f64]>,
    divisors: Option<&'a [f64]>,
}

impl Criterion<'_> {
    fn n(&self) -> usize {
        self.data.len()
    }

    fn residuals(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                let r = self.data.y(i) - self.model.eval(self.data.x(i), beta);
                match self.divisors {
                    Some(d) => r / d[i],
                    None => r,
                }
            })
            .collect()
    }

    fn leverage(&self, i: usize) -> f64 {
        self.leverage.map_or(1.0, |w| w[i])
    }

    /// (1/n) Σ ρ(rᵢ/σ) wᵢ.
    fn rho_objective(&self, r: &[f64], sigma: f64, rho: &Bisquare) -> f64 {
        let inv = 1.0 / sigma;
        r.iter()
            .enumerate()
            .map(|(i, &ri)| rho.rho(ri * inv) * self.leverage(i))
            .sum::<f64>()
            / r.len() as f64
    }

    /// Weighted Gauss–Newton direction with IRWLS weights uᵢ.
    fn gauss_newton(&self, beta: &[f64], r: &[f64], u: &[f64]) -> Option<DVector<f64>> {
        let p = beta.len();
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut g = DVector::<f64>::zeros(p);
        let mut grad = vec![0.0; p];
        for i in 0..self.n() {
            if u[i] == 0.0 {
                continue;
            }
            self.model.gradient(self.data.x(i), beta, &mut grad);
            if let Some(d) = self.divisors {
                grad.iter_mut().for_each(|v| *v /= d[i]);
            }
            for j in 0..p {
                g[j] += u[i] * grad[j] * r[i];
                for k in 0..=j {
                    a[(j, k)] += u[i] * grad[j] * grad[k];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                a[(k, j)] = a[(j, k)];
            }
        }
        if let Some(ch) = a.clone().cholesky() {
            let d = ch.solve(&g);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        let ridge = 1e-10 * (0..p).map(|j| a[(j, j)]).fold(0.0f64, f64::max).max(1e-300);
        for j in 0..p {
            a[(j, j)] += ridge;
        }
        let d = a.cholesky()?.solve(&g);
        d.iter().all(|v| v.is_finite()).then_some(d)
    }

    /// Weighted M-scale treating exact fits of more than a (1 − b) share as zero.
    fn scale_of(&self, r: &[f64], spec: &MScaleSpec) -> Option<f64> {
        match weighted_m_scale(r, self.leverage, spec) {
            Ok(s) => Some(s),
            Err(Error::DegenerateScale(_)) => Some(0.0),
            Err(_) => None,
        }
    }
}

fn rel_step(step: &DVector<f64>, t: f64, beta: &[f64]) -> f64 {
    let bn = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    t * step.norm() / (bn + 1e-12)
}

struct Candidate {
    beta: Vec<f64>,
    scale: f64,
}

/// Random elemental-subset search. Subset k draws from its own ChaCha stream
/// `k`, so any evaluation order gives the same candidates.
fn subset_search(
    crit: &Criterion<'_>,
    options: &MmOptions,
    fit_subset: &dyn Fn(&[usize]) -> Option<Vec<f64>>,
) -> Result<Vec<Candidate>> {
    let n = crit.n();
    let p = crit.model.n_beta();
    let spec = options.scale_spec();
    let keep = options.n_refine.max(1);
    let mut best: Vec<Candidate> = Vec::with_capacity(keep + 1);

    for k in 0..options.n_subsets {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(k as u64);
        let mut idx = sample(&mut rng, n, p).into_vec();
        idx.sort_unstable();
        let Some(beta) = fit_subset(&idx) else {
            continue;
        };
        if beta.iter().any(|b| !b.is_finite()) {
            continue;
        }
        let r = crit.residuals(&beta);
        if r.iter().any(|v| !v.is_finite()) {
            continue;
        }
        // a candidate whose mean ρ at the current cut-off scale is ≥ b
        // cannot have a smaller M-scale
        if best.len() == keep {
            let cutoff = best[keep - 1].scale;
            if cutoff == 0.0
                || (cutoff > 0.0 && mean_rho(&r, crit.leverage, cutoff, &spec.rho) >= spec.b)
            {
                continue;
            }
        }
        let Some(scale) = crit.scale_of(&r, &spec) else {
            continue;
        };
        let pos = best.partition_point(|c| c.scale <= scale);
        best.insert(pos, Candidate { beta, scale });
        best.truncate(keep);
    }
    if best.is_empty() {
        return Err(Error::SubsetSearchFailed);
    }
    Ok(best)
}

/// IRWLS on the S-criterion: each step must lower the M-scale.
fn refine_s(crit: &Criterion<'_>, options: &MmOptions, mut cand: Candidate) -> Candidate {
    let spec = options.scale_spec();
    for _ in 0..options.max_refine {
        if cand.scale <= 0.0 {
            break;
        }
        let r = crit.residuals(&cand.beta);
        let u: Vec<f64> = r
            .iter()
            .enumerate()
            .map(|(i, &ri)| spec.rho.weight(ri / cand.scale) * crit.leverage(i))
            .collect();
        let Some(step) = crit.gauss_newton(&cand.beta, &r, &u) else {
            break;
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..=20 {
            let trial: Vec<f64> = cand
                .beta
                .iter()
                .zip(step.iter())
                .map(|(b, d)| b + t * d)
                .collect();
            let rt = crit.residuals(&trial);
            if rt.iter().all(|v| v.is_finite()) {
                if let Some(s) = crit.scale_of(&rt, &spec) {
                    if s < cand.scale {
                        cand = Candidate {
                            beta: trial,
                            scale: s,
                        };
                        moved = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !moved || rel_step(&step, t, &cand.beta) < options.tol {
            break;
        }
    }
    cand
}

struct IrwlsOutcome {
    beta: Vec<f64>,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Minimizes (1/n) Σ ρ₁(rᵢ/σ) wᵢ from `start` by IRWLS with step halving.
fn irwls_mm(
    crit: &Criterion<'_>,
    options: &MmOptions,
    start: Vec<f64>,
    sigma: f64,
) -> IrwlsOutcome {
    let rho1 = options.rho1;
    let mut beta = start;
    let mut r = crit.residuals(&beta);
    let mut obj = crit.rho_objective(&r, sigma, &rho1);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_irwls {
        iterations += 1;
        let u: Vec<f64> = r
            .iter()
            .enumerate()
            .map(|(i, &ri)| rho1.weight(ri / sigma) * crit.leverage(i))
            .collect();
        let Some(step) = crit.gauss_newton(&beta, &r, &u) else {
            converged = true;
            break;
        };
        if rel_step(&step, 1.0, &beta) < options.tol {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=20 {
            let trial: Vec<f64> = beta
                .iter()
                .zip(step.iter())
                .map(|(b, d)| b + t * d)
                .collect();
            let rt = crit.residuals(&trial);
            if rt.iter().all(|v| v.is_finite()) {
                let ot = crit.rho_objective(&rt, sigma, &rho1);
                if ot <= obj {
                    accepted = Some((trial, rt, ot));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((b, rt, ot)) = accepted else {
            // no descent along the IRWLS direction
            converged = true;
            break;
        };
        assert!(ot <= obj, "IRWLS objective increased from {obj} to {ot}");
        beta = b;
        r = rt;
        obj = ot;
        trace.push(obj);
        if rel_step(&step, t, &beta) < options.tol {
            converged = true;
            break;
        }
    }
    IrwlsOutcome {
        beta,
        trace,
        iterations,
        converged,
    }
}

fn validate_leverage(leverage: Option<&[f64]>, n: usize) -> Result<()> {
    if let Some(w) = leverage {
        if w.len() != n {
            return Err(Error::InvalidInput(
                "leverage weights must have one entry per observation".into(),
            ));
        }
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidInput(
                "leverage weights must be nonnegative with positive sum".into(),
            ));
        }
    }
    Ok(())
}

/// S-stage followed by the MM stage for a model, returning the MM fit.
fn s_then_mm(
    crit: &Criterion<'_>,
    options: &MmOptions,
    fit_subset: &dyn Fn(&[usize]) -> Option<Vec<f64>>,
) -> Result<MmFit> {
    let candidates = subset_search(crit, options, fit_subset)?;
    let mut best: Option<Candidate> = None;
    for cand in candidates {
        let c = refine_s(crit, options, cand);
        if best.as_ref().is_none_or(|b| c.scale < b.scale) {
            best = Some(c);
        }
    }
    let s = best.expect("at least one candidate");

    let mad_y = mad_about_median(crit.data.ys());
    if s.scale <= 1e-10 * mad_y || s.scale == 0.0 {
        return Ok(MmFit {
            beta: s.beta,
            s_scale: s.scale,
            objective: 0.0,
            start_objective: 0.0,
            objective_trace: vec![0.0],
            converged: true,
            exact_fit: true,
            iterations: 0,
        });
    }
    let out = irwls_mm(crit, options, s.beta, s.scale);
    Ok(MmFit {
        beta: out.beta,
        s_scale: s.scale,
        objective: *out.trace.last().expect("non-empty trace"),
        start_objective: out.trace[0],
        objective_trace: out.trace,
        converged: out.converged,
        exact_fit: false,
        iterations: out.iterations,
    })
}

/// Nonlinear (weighted) MM regression.
///
/// Without `scale_override`, runs the S-stage (random p-point LM fits scored
/// by the leverage-weighted M-scale) and then minimizes
/// (1/n) Σ ρ₁(rᵢ/σ̂_S) wᵢ. With `scale_override`, skips the scale stage and
/// minimizes (1/n) Σ ρ₁((yᵢ − g(xᵢ, β))/(σ̂ dᵢ)) wᵢ from the given start.
pub fn nonlinear_mm(
    data: &Dataset,
    model: &dyn RegressionModel,
    options: &MmOptions,
    leverage_weights: Option<&[f64]>,
    scale_override: Option<ScaleOverride<'_>>,
) -> Result<MmFit> {
    options.validate()?;
    let n = data.len();
    let p = model.n_beta();
    if n < p + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least {} observations, got {n}",
            p + 1
        )));
    }
    validate_leverage(leverage_weights, n)?;

    if let Some(ov) = scale_override {
        if ov.divisors.len() != n || ov.divisors.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidInput(
                "variance divisors must be positive, one per observation".into(),
            ));
        }
        if !(ov.sigma > 0.0) || !ov.sigma.is_finite() {
            return Err(Error::InvalidInput(format!(
                "scale must be positive, got {}",
                ov.sigma
            )));
        }
        if ov.start.len() != p {
            return Err(Error::InvalidInput(format!("expected {p} starting values")));
        }
        let crit = Criterion {
            data,
            model,
            leverage: leverage_weights,
            divisors: Some(ov.divisors),
        };
        let out = irwls_mm(&crit, options, ov.start.to_vec(), ov.sigma);
        return Ok(MmFit {
            beta: out.beta,
            s_scale: ov.sigma,
            objective: *out.trace.last().expect("non-empty trace"),
            start_objective: out.trace[0],
            objective_trace: out.trace,
            converged: out.converged,
            exact_fit: false,
            iterations: out.iterations,
        });
    }

    let crit = Criterion {
        data,
        model,
        leverage: leverage_weights,
        divisors: None,
    };
    let fallback = model.initial_guess(data).unwrap_or_else(|| vec![1.0; p]);
    let fit_subset = |rows: &[usize]| -> Option<Vec<f64>> {
        let sub = data.subset(rows);
        let start = model
            .initial_guess(&sub)
            .unwrap_or_else(|| fallback.clone());
        nonlinear_ls(&sub, model, &start, None).ok().map(|f| f.beta)
    };
    s_then_mm(&crit, options, &fit_subset)
}

/// Objective (1/n) Σ ρ₁(rᵢ/σ) wᵢ of the heteroscedastic MM step at `beta`,
/// with rᵢ = (yᵢ − g(xᵢ, β))/dᵢ.
pub fn mm_objective(
    data: &Dataset,
    model: &dyn RegressionModel,
    rho1: &Bisquare,
    beta: &[f64],
    sigma: f64,
    divisors: Option<&[f64]>,
    leverage: Option<&[f64]>,
) -> f64 {
    let crit = Criterion {
        data,
        model,
        leverage,
        divisors,
    };
    crit.rho_objective(&crit.residuals(beta), sigma, rho1)
}

/// Linear MM regression of `z` on an intercept and the rows of `v`.
pub fn linear_mm(z: &[f64], v: &[Vec<f64>], options: &MmOptions) -> Result<LinearMmFit> {
    options.validate()?;
    let n = z.len();
    let q = v.first().map_or(0, |r| r.len());
    if v.len() != n {
        return Err(Error::InvalidInput(
            "response and design lengths differ".into(),
        ));
    }
    if q == 0 || v.iter().any(|r| r.len() != q) {
        return Err(Error::InvalidInput(
            "design rows must share a positive length".into(),
        ));
    }
    if n <= q + 1 {
        return Err(Error::InvalidInput(format!(
            "need more than {} observations, got {n}",
            q + 1
        )));
    }
    if z.iter().chain(v.iter().flatten()).any(|a| !a.is_finite()) {
        return Err(Error::InvalidInput(
            "non-finite value in linear MM input".into(),
        ));
    }
    let data = Dataset::new(q, v.iter().flatten().copied().collect(), z.to_vec())?;
    let model = LinearDesign { q };
    let crit = Criterion {
        data: &data,
        model: &model,
        leverage: None,
        divisors: None,
    };
    let fit_subset = |rows: &[usize]| -> Option<Vec<f64>> {
        let p = q + 1;
        let a = DMatrix::from_fn(p, p, |i, j| if j == 0 { 1.0 } else { v[rows[i]][j - 1] });
        let b = DVector::from_iterator(p, rows.iter().map(|&i| z[i]));
        let lu = a.lu();
        if lu.determinant().abs() < 1e-12 {
            return None;
        }
        lu.solve(&b).map(|c| c.iter().copied().collect())
    };
    let fit = s_then_mm(&crit, options, &fit_subset)?;
    Ok(LinearMmFit {
        intercept: fit.beta[0],
        slopes: fit.beta[1..].to_vec(),
        scale: fit.s_scale,
        converged: fit.converged,
        exact_fit: fit.exact_fit,
    })
}
