//! Approximate maximum-likelihood fitting.
//!
//! The outer loop alternates between moving the expansion points to the modes
//! of the regularized joint log-density and minimizing the working objective
//! `h_n` over `(beta, Sigma)` with the expansion points held fixed. The inner
//! minimization is block coordinate descent: a closed-form GLS step for `beta`
//! and an inertial projected-gradient method for `Sigma`, projecting onto the
//! feasible covariance set after every step.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::constraints::{ConstraintSpec, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::data::{Dataset, ModelSpec};
use crate::error::{Error, Result};
use crate::families::FamilyKind;
use crate::latent::{solve_latent, LatentControls, LatentPrecision};
use crate::sum;
use crate::worklik::{BetaRestrictions, WorkingPoint};

/// Number of step-size halvings before a `Sigma` line search gives up.
const MAX_HALVINGS: usize = 60;

/// Geometry of the `Sigma` step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMetric {
    /// Plain gradient `grad`.
    Euclidean,
    /// `B grad B / n` with `B` the inverse average working precision, and
    /// candidates projected onto the feasible set in the matching metric.
    /// A step of length one is a Fisher-scoring step; on all-Gaussian data it
    /// jumps straight to the stationary point of an unconstrained problem.
    #[default]
    Fisher,
}

impl std::str::FromStr for SigmaMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(SigmaMetric::Euclidean),
            "fisher" => Ok(SigmaMetric::Fisher),
            _ => Err(Error::Spec(format!(
                "unknown Sigma metric {s:?}; use fisher or euclidean"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitControls {
    /// Outer tolerance on `|beta_new - beta_old|^2`.
    pub eps_beta: f64,
    /// Outer tolerance on `|Sigma_new - Sigma_old|_F^2`.
    pub eps_sigma: f64,
    pub max_outer: usize,
    /// Relative change in `h_n` that ends the inner loops.
    pub inner_tol: f64,
    pub max_inner: usize,
    /// Inertia weight in (0, 1).
    pub gamma: f64,
    pub ls_shrink: f64,
    pub ls_grow: f64,
    pub alpha_init: f64,
    pub max_prox: usize,
    pub sigma_metric: SigmaMetric,
    pub projection_tol: f64,
    pub projection_max_iter: usize,
    pub latent: LatentControls,
}

impl Default for FitControls {
    fn default() -> Self {
        FitControls {
            eps_beta: 1e-8,
            eps_sigma: 1e-8,
            max_outer: 200,
            inner_tol: 1e-10,
            max_inner: 100,
            gamma: 0.5,
            ls_shrink: 0.5,
            ls_grow: 2.0,
            alpha_init: 1.0,
            max_prox: 500,
            sigma_metric: SigmaMetric::Fisher,
            projection_tol: DEFAULT_TOL,
            projection_max_iter: DEFAULT_MAX_ITER,
            latent: LatentControls::default(),
        }
    }
}

impl FitControls {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eps_beta", self.eps_beta),
            ("eps_sigma", self.eps_sigma),
            ("inner_tol", self.inner_tol),
            ("alpha_init", self.alpha_init),
            ("projection_tol", self.projection_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Spec(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Spec(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.ls_shrink > 0.0 && self.ls_shrink < 1.0 && self.ls_grow > 1.0) {
            return Err(Error::Spec(
                "line search factors must satisfy 0 < ls_shrink < 1 < ls_grow".into(),
            ));
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.max_prox == 0 {
            return Err(Error::Spec("iteration caps must be at least 1".into()));
        }
        self.latent.validate()
    }
}

/// Outcome of the projected-gradient `Sigma` update.
#[derive(Debug, Clone)]
pub struct SigmaDescent {
    pub sigma: DMatrix<f64>,
    pub h: f64,
    pub iterations: usize,
    /// The line search found no decrease; `sigma` is the last accepted iterate.
    pub stalled: bool,
    /// Step size to start the next call from.
    pub next_alpha: f64,
    pub trace: Vec<f64>,
}

/// Inertial projected-gradient descent for `Sigma` at fixed `beta` and
/// expansion points, starting from a feasible `sigma0`.
///
/// Each step is `P[Sigma_t - alpha grad + gamma (Sigma_t - Sigma_{t-1})]` with
/// `alpha` found by backtracking from `alpha_start` until `h_n` does not
/// increase by more than 1e-12. When no step size works with the inertial term, the step is
/// retried without it. With [`SigmaMetric::Fisher`] the gradient is replaced
/// by the scaled direction described there and `alpha` never exceeds
/// `alpha_init`.
pub fn sigma_prox_descent(
    beta: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    point: &WorkingPoint,
    cspec: &ConstraintSpec,
    ctl: &FitControls,
    alpha_start: f64,
) -> Result<SigmaDescent> {
    let mut prev = sigma0.clone();
    let mut current = sigma0.clone();
    let mut factored = point.factorize(&current)?;
    let mut h = factored.h_n(beta);
    let mut alpha = alpha_start;
    let mut trace = vec![h];
    let mut stalled = false;
    let mut iterations = 0;

    while iterations < ctl.max_prox {
        iterations += 1;
        let (grad, metric) = step_direction(&factored, beta, ctl.sigma_metric)?;
        let momentum = (&current - &prev) * ctl.gamma;
        let has_momentum = momentum.amax() > 0.0;

        let mut accepted = None;
        for use_momentum in [true, false] {
            if !use_momentum && !has_momentum {
                break;
            }
            let mut step = alpha;
            for _ in 0..=MAX_HALVINGS {
                let mut target = &current - &grad * step;
                if use_momentum {
                    target += &momentum;
                }
                let candidate = match &metric {
                    None => cspec.project(&target, ctl.projection_tol, ctl.projection_max_iter)?,
                    Some(w) => {
                        cspec.project_weighted(&target, w, ctl.projection_tol, ctl.projection_max_iter)?
                    }
                }
                .matrix;
                if let Ok(f) = point.factorize(&candidate) {
                    let hc = f.h_n(beta);
                    if hc <= h {
                        accepted = Some((candidate, hc, step));
                        break;
                    }
                }
                step *= ctl.ls_shrink;
            }
            if accepted.is_some() {
                break;
            }
        }

        let Some((candidate, hc, step)) = accepted else {
            stalled = true;
            break;
        };
        let h_old = h;
        prev = std::mem::replace(&mut current, candidate);
        h = hc;
        alpha = step * ctl.ls_grow;
        if ctl.sigma_metric == SigmaMetric::Fisher {
            alpha = alpha.min(ctl.alpha_init);
        }
        trace.push(h);
        if (h_old - h).abs() < ctl.inner_tol * (1.0 + h_old.abs()) {
            break;
        }
        factored = point.factorize(&current)?;
    }

    Ok(SigmaDescent {
        sigma: current,
        h,
        iterations,
        stalled,
        next_alpha: alpha,
        trace,
    })
}

/// Descent direction and the metric to project in (`None` is Frobenius).
/// Under the Fisher metric the direction is the gradient's Riesz
/// representer in `<A, B> = n tr(P A P B)`, `P` the average working precision.
fn step_direction(
    factored: &crate::worklik::Factorized<'_>,
    beta: &DVector<f64>,
    metric: SigmaMetric,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    match metric {
        SigmaMetric::Euclidean => Ok((factored.grad_sigma(beta), None)),
        SigmaMetric::Fisher => {
            let (grad, precision) = factored.grad_and_precision(beta);
            let r = precision.nrows();
            let ridge = 1e-10 * precision.trace() / r as f64;
            let precision = precision + DMatrix::identity(r, r) * ridge;
            let scale = precision
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numeric("average working precision is singular".into()))?
                .inverse();
            let n = factored.n() as f64;
            let d = &scale * grad * &scale / n;
            Ok(((&d + d.transpose()) * 0.5, Some(precision)))
        }
    }
}

/// Outcome of block coordinate descent over `(beta, Sigma)`.
#[derive(Debug, Clone)]
pub struct BcdResult {
    pub beta: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub h: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stalled: bool,
    /// `h_n` after every half-step, starting from the input point.
    pub trace: Vec<f64>,
    pub next_alpha: f64,
}

/// Minimizes `h_n` over `(beta, Sigma)` at fixed expansion points by
/// alternating GLS and projected-gradient updates, starting from a feasible
/// `sigma`. Every iteration ends with a GLS step.
#[allow(clippy::too_many_arguments)]
pub fn bcd_beta_sigma(
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    point: &WorkingPoint,
    cspec: &ConstraintSpec,
    restrictions: &BetaRestrictions,
    ctl: &FitControls,
    alpha_start: f64,
) -> Result<BcdResult> {
    let mut sigma = sigma.clone();
    let factored = point.factorize(&sigma)?;
    let mut trace = vec![factored.h_n(beta)];
    let mut beta = factored.beta_gls(restrictions)?;
    let mut h = factored.h_n(&beta);
    trace.push(h);
    drop(factored);

    let mut alpha = alpha_start;
    let mut converged = false;
    let mut stalled = false;
    let mut iterations = 0;
    while iterations < ctl.max_inner {
        iterations += 1;
        let h_start = h;
        let descent = sigma_prox_descent(&beta, &sigma, point, cspec, ctl, alpha)?;
        alpha = descent.next_alpha;
        stalled = descent.stalled;
        sigma = descent.sigma;
        trace.push(descent.h);

        let factored = point.factorize(&sigma)?;
        beta = factored.beta_gls(restrictions)?;
        h = factored.h_n(&beta);
        trace.push(h);
        debug_assert!(
            h <= descent.h + 1e-9 * (1.0 + descent.h.abs()),
            "GLS step increased h_n: {} -> {h}",
            descent.h
        );

        if (h_start - h).abs() < ctl.inner_tol * (1.0 + h_start.abs()) {
            converged = true;
            break;
        }
    }
    Ok(BcdResult {
        beta,
        sigma,
        h,
        iterations,
        converged,
        stalled,
        trace,
        next_alpha: alpha,
    })
}

/// Estimates and diagnostics from [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    /// Expansion points at which `(beta_hat, sigma_hat)` minimize `h_n`.
    pub w_hat: DMatrix<f64>,
    /// `h_n(beta_hat, sigma_hat | w_hat)`.
    pub h_final: f64,
    pub outer_iters: usize,
    pub converged: bool,
    /// `h_n` at the end of every outer iteration.
    pub trace: Vec<f64>,
    /// Per outer iteration, `h_n` after every inner half-step.
    pub inner_traces: Vec<Vec<f64>>,
    /// Expansion-point solves that hit their iteration cap.
    pub latent_warnings: usize,
}

/// Optional starting values for [`fit_with`].
#[derive(Debug, Clone, Default)]
pub struct FitStart {
    pub beta: Option<DVector<f64>>,
    pub sigma: Option<DMatrix<f64>>,
}

/// Fits the model under the covariance constraints `cspec`.
pub fn fit(data: &Dataset, spec: &ModelSpec, cspec: &ConstraintSpec, ctl: &FitControls) -> Result<FitResult> {
    fit_with(
        data,
        spec,
        cspec,
        &BetaRestrictions::none(),
        ctl,
        &FitStart::default(),
    )
}

/// [`fit`] with coefficient restrictions and optional starting values.
pub fn fit_with(
    data: &Dataset,
    spec: &ModelSpec,
    cspec: &ConstraintSpec,
    restrictions: &BetaRestrictions,
    ctl: &FitControls,
    start: &FitStart,
) -> Result<FitResult> {
    ctl.validate()?;
    data.validate(spec)?;
    spec.validate_constraints(cspec)?;
    restrictions.validate(spec.q())?;

    let mut beta = match &start.beta {
        Some(b) if b.len() == spec.q() => {
            let mut b = b.clone();
            restrictions.apply(&mut b);
            b
        }
        Some(b) => {
            return Err(Error::Dimension(format!(
                "starting beta has length {}, expected {}",
                b.len(),
                spec.q()
            )))
        }
        None => initial_beta(data, spec, restrictions)?,
    };
    let sigma_seed = match &start.sigma {
        Some(s) => s.clone(),
        None => DMatrix::identity(spec.r(), spec.r()),
    };
    let mut sigma = cspec
        .project(&sigma_seed, ctl.projection_tol, ctl.projection_max_iter)?
        .matrix;
    if !cspec.is_feasible(&sigma, 0.0, 1e-8) {
        return Err(Error::Infeasible(format!(
            "projection of the starting matrix misses the eigenvalue floor by {:e}",
            cspec.eigen_floor() - crate::constraints::min_eigenvalue(&sigma)?
        )));
    }

    let mut w = DMatrix::zeros(data.n(), data.r());
    let mut trace = Vec::new();
    let mut inner_traces = Vec::new();
    let mut latent_warnings = 0;
    let mut alpha = ctl.alpha_init;
    let mut converged = false;
    let mut outer_iters = 0;
    let mut h_final = f64::NAN;

    while outer_iters < ctl.max_outer {
        outer_iters += 1;
        let context = |e: Error| e.context(format!("outer iteration {outer_iters}"));

        let (new_w, warnings) =
            update_expansion_points(data, spec, &beta, &sigma, &ctl.latent).map_err(context)?;
        w = new_w;
        latent_warnings += warnings;

        let point = WorkingPoint::new(data, &w, spec).map_err(context)?;
        let bcd = bcd_beta_sigma(&beta, &sigma, &point, cspec, restrictions, ctl, alpha).map_err(context)?;
        alpha = bcd.next_alpha;

        let beta_change = (&bcd.beta - &beta).norm_squared();
        let sigma_change = (&bcd.sigma - &sigma).norm_squared();
        beta = bcd.beta;
        sigma = bcd.sigma;
        h_final = bcd.h;
        trace.push(bcd.h);
        inner_traces.push(bcd.trace);

        if beta_change <= ctl.eps_beta && sigma_change <= ctl.eps_sigma {
            converged = true;
            break;
        }
    }

    Ok(FitResult {
        beta_hat: beta,
        sigma_hat: sigma,
        w_hat: w,
        h_final,
        outer_iters,
        converged,
        trace,
        inner_traces,
        latent_warnings,
    })
}

/// Solves every observation's expansion-point problem, started at `X_i beta`.
/// Returns the `n x r` points and the number of solves that hit their cap.
pub fn update_expansion_points(
    data: &Dataset,
    spec: &ModelSpec,
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    ctl: &LatentControls,
) -> Result<(DMatrix<f64>, usize)> {
    let precision = LatentPrecision::new(sigma, ctl.kappa)?;
    let solutions = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let eta = data.x(i) * beta;
            solve_latent(&data.y_row(i), &eta, &precision, spec, ctl, &eta)
                .map_err(|e| e.context(format!("expansion point of observation {}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = DMatrix::zeros(data.n(), data.r());
    let mut warnings = 0;
    for (i, s) in solutions.iter().enumerate() {
        w.row_mut(i).copy_from(&s.w.transpose());
        if !s.converged {
            warnings += 1;
        }
    }
    Ok((w, warnings))
}

/// Starting coefficients from independent canonical-link GLM fits, computed
/// by iteratively reweighted least squares over all `n r` responses.
pub fn initial_beta(
    data: &Dataset,
    spec: &ModelSpec,
    restrictions: &BetaRestrictions,
) -> Result<DVector<f64>> {
    let (n, r, q) = (data.n(), data.r(), data.q());
    let mut eta = DMatrix::from_fn(n, r, |i, j| {
        let f = spec.family(j);
        let y = data.y()[(i, j)];
        let mu = match f.kind {
            FamilyKind::Gaussian => y,
            FamilyKind::Poisson => y + 0.1,
            FamilyKind::Bernoulli => 0.25 + 0.5 * y,
        };
        f.link(mu)
    });
    let mut beta: Option<DVector<f64>> = None;
    for _ in 0..50 {
        let mut a = sum::Matrix::zeros(q, q);
        let mut b = sum::Vector::zeros(q);
        for i in 0..n {
            let xi = data.x(i);
            let mut xw = xi.clone();
            let mut z = DVector::zeros(r);
            for j in 0..r {
                let f = spec.family(j);
                let e = eta[(i, j)].clamp(-30.0, 30.0);
                let v = f.varweight(e);
                z[j] = e + (data.y()[(i, j)] - f.mean(e)) / v;
                xw.row_mut(j).scale_mut(v / f.psi);
            }
            a.add(&xw.tr_mul(xi));
            b.add(&xw.tr_mul(&z));
        }
        let next = restrictions.solve(&a.value(), &b.value())?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("starting-value GLM fit diverged".into()));
        }
        for i in 0..n {
            let e = data.x(i) * &next;
            eta.row_mut(i).copy_from(&e.transpose());
        }
        let done = beta
            .as_ref()
            .is_some_and(|old| (old - &next).norm() <= 1e-10 * (1.0 + next.norm()));
        beta = Some(next);
        if done {
            break;
        }
    }
    Ok(beta.expect("at least one iteration runs"))
}
