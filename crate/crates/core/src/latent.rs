//! Per-observation update of the expansion points.
//!
//! Each `w_i` is the unique minimizer of the strongly convex objective
//!
//! ```text
//! F(w) = -sum_j (y_j w_j - c_j(w_j)) / psi_j
//!        + 1/2 (w - X beta)^T (Sigma + kappa I)^{-1} (w - X beta)
//!        + tau |w - X beta|^2
//! ```
//!
//! solved by a dogleg trust-region method on the exact Hessian.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::ModelSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentControls {
    /// Ridge added to `Sigma` before inverting.
    pub kappa: f64,
    /// Weight of the shrinkage penalty towards `X beta`.
    pub tau: f64,
    pub grad_tol: f64,
    pub max_newton: usize,
    pub trust_init: f64,
    pub trust_max: f64,
}

impl Default for LatentControls {
    fn default() -> Self {
        LatentControls {
            kappa: 1e-4,
            tau: 1e-3,
            grad_tol: 1e-8,
            max_newton: 100,
            trust_init: 1.0,
            trust_max: 100.0,
        }
    }
}

impl LatentControls {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Spec(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Spec(format!("tau must be nonnegative, got {}", self.tau)));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::Spec("grad_tol must be positive".into()));
        }
        if self.max_newton == 0 {
            return Err(Error::Spec("max_newton must be at least 1".into()));
        }
        if !(self.trust_init > 0.0 && self.trust_max >= self.trust_init) {
            return Err(Error::Spec(
                "trust radii must satisfy 0 < trust_init <= trust_max".into(),
            ));
        }
        Ok(())
    }
}

/// `(Sigma + kappa I)^{-1}`, shared by all observations of one outer iteration.
#[derive(Debug, Clone)]
pub struct LatentPrecision {
    precision: DMatrix<f64>,
}

impl LatentPrecision {
    pub fn new(sigma: &DMatrix<f64>, kappa: f64) -> Result<Self> {
        let r = sigma.nrows();
        let regularized = sigma + DMatrix::identity(r, r) * kappa;
        let factor = Cholesky::new(regularized)
            .ok_or_else(|| Error::Numeric("Sigma + kappa I is not positive definite".into()))?;
        Ok(LatentPrecision {
            precision: factor.inverse(),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.precision
    }
}

#[derive(Debug, Clone)]
pub struct LatentSolution {
    pub w: DVector<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    /// False when `max_newton` was reached before `grad_tol`.
    pub converged: bool,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

struct Objective<'a> {
    y: &'a DVector<f64>,
    eta: &'a DVector<f64>,
    precision: &'a DMatrix<f64>,
    spec: &'a ModelSpec,
    tau: f64,
}

impl Objective<'_> {
    fn value(&self, w: &DVector<f64>) -> f64 {
        let delta = w - self.eta;
        let data: f64 = (0..w.len())
            .map(|j| self.spec.family(j).logdensity_kernel(self.y[j], w[j]))
            .sum();
        -data + 0.5 * delta.dot(&(self.precision * &delta)) + self.tau * delta.norm_squared()
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let delta = w - self.eta;
        let mut g = self.precision * &delta + &delta * (2.0 * self.tau);
        for j in 0..w.len() {
            let f = self.spec.family(j);
            g[j] -= (self.y[j] - f.mean(w[j])) / f.psi;
        }
        g
    }

    fn hessian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut h = self.precision.clone();
        for j in 0..w.len() {
            let f = self.spec.family(j);
            h[(j, j)] += f.varweight(w[j]) / f.psi + 2.0 * self.tau;
        }
        h
    }
}

/// Dogleg step for the model `g^T p + p^T H p / 2` within radius `radius`.
fn dogleg(g: &DVector<f64>, h: &DMatrix<f64>, radius: f64) -> Result<DVector<f64>> {
    let factor = Cholesky::new(h.clone())
        .ok_or_else(|| Error::Numeric("latent Hessian is not positive definite".into()))?;
    let newton = -factor.solve(g);
    if newton.norm() <= radius {
        return Ok(newton);
    }
    let gg = g.norm_squared();
    let ghg = g.dot(&(h * g));
    let cauchy = g * (-gg / ghg);
    let cauchy_norm = cauchy.norm();
    if cauchy_norm >= radius {
        return Ok(g * (-radius / g.norm()));
    }
    // largest s in [0, 1] with |cauchy + s (newton - cauchy)| = radius
    let dir = &newton - &cauchy;
    let a = dir.norm_squared();
    let b = 2.0 * cauchy.dot(&dir);
    let c = cauchy_norm * cauchy_norm - radius * radius;
    let s = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
    Ok(cauchy + dir * s)
}

/// Minimizes the expansion-point objective for one observation, starting
/// from `start`. `eta` is the linear predictor `X_i beta`.
pub fn solve_latent(
    y: &DVector<f64>,
    eta: &DVector<f64>,
    precision: &LatentPrecision,
    spec: &ModelSpec,
    ctl: &LatentControls,
    start: &DVector<f64>,
) -> Result<LatentSolution> {
    let objective = Objective {
        y,
        eta,
        precision: precision.matrix(),
        spec,
        tau: ctl.tau,
    };
    let mut w = start.clone();
    let mut value = objective.value(&w);
    let mut g = objective.gradient(&w);
    if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "latent objective is not finite at the start".into(),
        ));
    }
    let mut radius = ctl.trust_init;
    let mut trace = vec![value];
    let mut iterations = 0;
    while g.norm() >= ctl.grad_tol && iterations < ctl.max_newton {
        iterations += 1;
        let h = objective.hessian(&w);
        let step = dogleg(&g, &h, radius)?;
        let step_norm = step.norm();
        let predicted = -(g.dot(&step) + 0.5 * step.dot(&(&h * &step)));
        let trial = &w + &step;
        let trial_value = objective.value(&trial);
        let actual = value - trial_value;
        let ratio = if trial_value.is_finite() && predicted > 0.0 {
            actual / predicted
        } else {
            f64::NEG_INFINITY
        };

        let mut accept = ratio > 1e-4;
        let mut trial_grad = None;
        if !accept && trial_value.is_finite() && predicted <= 1e-12 * (1.0 + value.abs()) {
            // the model decrease is at rounding level; judge the step by the gradient
            let tg = objective.gradient(&trial);
            if tg.norm() < g.norm() {
                accept = true;
                trial_grad = Some(tg);
            }
        }

        if ratio < 0.25 {
            radius = 0.25 * step_norm;
        } else if ratio > 0.75 && step_norm >= 0.99 * radius {
            radius = (2.0 * radius).min(ctl.trust_max);
        }

        if accept {
            w = trial;
            value = trial_value;
            g = trial_grad.unwrap_or_else(|| objective.gradient(&w));
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("latent gradient became non-finite".into()));
            }
            trace.push(value);
        } else if radius < 1e-15 * (1.0 + w.norm()) {
            break;
        }
    }
    let grad_norm = g.norm();
    Ok(LatentSolution {
        w,
        grad_norm,
        iterations,
        converged: grad_norm < ctl.grad_tol,
        trace,
    })
}

/// Expansion-point update for one observation, started at `X beta`.
pub fn update_w(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    spec: &ModelSpec,
    ctl: &LatentControls,
) -> Result<LatentSolution> {
    ctl.validate()?;
    let precision = LatentPrecision::new(sigma, ctl.kappa)?;
    let eta = x * beta;
    solve_latent(y, &eta, &precision, spec, ctl, &eta)
}

/// Objective value `F(w)`; exposed for diagnostics and tests.
pub fn latent_objective(
    w: &DVector<f64>,
    y: &DVector<f64>,
    eta: &DVector<f64>,
    precision: &LatentPrecision,
    spec: &ModelSpec,
    tau: f64,
) -> f64 {
    Objective {
        y,
        eta,
        precision: precision.matrix(),
        spec,
        tau,
    }
    .value(w)
}

/// Gradient of `F`; exposed for diagnostics and tests.
pub fn latent_gradient(
    w: &DVector<f64>,
    y: &DVector<f64>,
    eta: &DVector<f64>,
    precision: &LatentPrecision,
    spec: &ModelSpec,
    tau: f64,
) -> DVector<f64> {
    Objective {
        y,
        eta,
        precision: precision.matrix(),
        spec,
        tau,
    }
    .gradient(w)
}
