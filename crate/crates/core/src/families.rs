//! Conditional exponential-family kernels for each response type.
//!
//! A response `y_j` given its latent coordinate `w_j` has density proportional
//! to `exp{(y_j w_j - c_j(w_j)) / psi_j}`, where `c_j` is the cumulant function
//! of the family and `psi_j > 0` a known dispersion. The first two derivatives
//! of `c_j` give the conditional mean (inverse link) and the conditional
//! variance weight.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this magnitude the softplus and logistic switch to asymptotic forms.
const SOFTPLUS_BRANCH: f64 = 30.0;

/// Largest latent value for which `exp(w)` is a usable Poisson rate.
const MAX_LOG_RATE: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    /// Normal response, identity link.
    Gaussian,
    /// Count response, log link. `psi != 1` gives quasi-Poisson moments.
    Poisson,
    /// Binary response, logit link. Dispersion is always one.
    Bernoulli,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Bernoulli => "bernoulli",
        }
    }
}

/// A response family together with its known dispersion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Family {
    #[serde(rename = "family")]
    pub kind: FamilyKind,
    pub psi: f64,
}

impl Family {
    pub fn new(kind: FamilyKind, psi: f64) -> Result<Self> {
        let family = Family { kind, psi };
        family.validate()?;
        Ok(family)
    }

    pub fn gaussian(psi: f64) -> Result<Self> {
        Self::new(FamilyKind::Gaussian, psi)
    }

    pub fn poisson() -> Self {
        Family {
            kind: FamilyKind::Poisson,
            psi: 1.0,
        }
    }

    pub fn quasi_poisson(psi: f64) -> Result<Self> {
        Self::new(FamilyKind::Poisson, psi)
    }

    pub fn bernoulli() -> Self {
        Family {
            kind: FamilyKind::Bernoulli,
            psi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.psi.is_finite() && self.psi > 0.0) {
            return Err(Error::Spec(format!(
                "{} dispersion must be positive and finite, got {}",
                self.kind.name(),
                self.psi
            )));
        }
        if self.kind == FamilyKind::Bernoulli && self.psi != 1.0 {
            return Err(Error::Spec(format!(
                "bernoulli dispersion is fixed at 1, got {}",
                self.psi
            )));
        }
        Ok(())
    }

    /// Cumulant function `c(w)`.
    pub fn cumulant(&self, w: f64) -> Result<f64> {
        if !w.is_finite() {
            return Err(Error::Domain(format!("cumulant at non-finite w = {w}")));
        }
        Ok(match self.kind {
            FamilyKind::Gaussian => 0.5 * w * w,
            FamilyKind::Poisson => w.exp(),
            FamilyKind::Bernoulli => softplus(w),
        })
    }

    /// Conditional mean `c'(w)`, i.e. the inverse link.
    pub fn mean(&self, w: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => w,
            FamilyKind::Poisson => w.exp(),
            FamilyKind::Bernoulli => logistic(w),
        }
    }

    /// Variance weight `c''(w)`; the conditional variance is `psi * c''(w)`.
    pub fn varweight(&self, w: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Poisson => w.exp(),
            // p(1 - p) written so neither factor loses precision in the tails
            FamilyKind::Bernoulli => logistic(w) * logistic(-w),
        }
    }

    /// The `w`-dependent part of the conditional log-density,
    /// `(y w - c(w)) / psi`.
    ///
    /// Terms depending only on `y` are dropped, so values are only comparable
    /// across `w` at a fixed `y`; they are not textbook log-densities.
    pub fn logdensity_kernel(&self, y: f64, w: f64) -> f64 {
        let c = match self.kind {
            FamilyKind::Gaussian => 0.5 * w * w,
            FamilyKind::Poisson => w.exp(),
            FamilyKind::Bernoulli => softplus(w),
        };
        (y * w - c) / self.psi
    }

    /// Draws `Y | W = w`. Quasi-Poisson families sample a plain Poisson.
    pub fn sample<R: Rng + ?Sized>(&self, w: f64, rng: &mut R) -> Result<f64> {
        if !w.is_finite() {
            return Err(Error::Domain(format!("sampling at non-finite w = {w}")));
        }
        match self.kind {
            FamilyKind::Gaussian => {
                let normal = Normal::new(w, self.psi.sqrt())
                    .map_err(|e| Error::Domain(format!("normal sampler: {e}")))?;
                Ok(normal.sample(rng))
            }
            FamilyKind::Poisson => {
                if w > MAX_LOG_RATE {
                    return Err(Error::Domain(format!("poisson rate exp({w}) overflows")));
                }
                let rate = w.exp();
                if rate <= 0.0 {
                    return Ok(0.0);
                }
                let poisson =
                    Poisson::new(rate).map_err(|e| Error::Domain(format!("poisson sampler: {e}")))?;
                Ok(poisson.sample(rng))
            }
            FamilyKind::Bernoulli => {
                let p = logistic(w);
                Ok(if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            }
        }
    }

    /// Whether `y` lies in the support of the conditional distribution.
    pub fn in_support(&self, y: f64) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self.kind {
            FamilyKind::Gaussian => true,
            FamilyKind::Poisson => y >= 0.0 && y.fract() == 0.0,
            FamilyKind::Bernoulli => y == 0.0 || y == 1.0,
        }
    }

    /// Canonical link `g(mu)`, used to build starting values.
    pub(crate) fn link(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => mu,
            FamilyKind::Poisson => mu.ln(),
            FamilyKind::Bernoulli => (mu / (1.0 - mu)).ln(),
        }
    }
}

/// `log(1 + exp(w))` without overflow.
pub fn softplus(w: f64) -> f64 {
    if w > SOFTPLUS_BRANCH {
        w + (-w).exp().ln_1p()
    } else if w < -SOFTPLUS_BRANCH {
        w.exp()
    } else {
        w.exp().ln_1p()
    }
}

/// `1 / (1 + exp(-w))` without overflow.
pub fn logistic(w: f64) -> f64 {
    if w >= 0.0 {
        1.0 / (1.0 + (-w).exp())
    } else {
        let e = w.exp();
        e / (1.0 + e)
    }
}
