//! Approximate likelihood-ratio tests and profile confidence intervals.
//!
//! The statistic compares the working objective at the null fit with its
//! minimum over the alternative, both at the null fit's expansion points.
//! `h_n` already has deviance scaling, so differences are referred to the
//! chi-square distribution directly.

use nalgebra::DMatrix;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::constraints::{ConstraintSpec, Position};
use crate::data::{Dataset, ModelSpec};
use crate::error::{Error, Result};
use crate::fitter::{bcd_beta_sigma, fit, fit_with, BcdResult, FitControls, FitResult, FitStart};
use crate::worklik::{BetaRestrictions, WorkingPoint};

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chisq_sf(x: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::Domain("chi-square needs df >= 1".into()));
    }
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!(
            "chi-square argument must be >= 0, got {x}"
        )));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x == f64::INFINITY {
        return Ok(0.0);
    }
    let dist = ChiSquared::new(df as f64).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(dist.sf(x).clamp(0.0, 1.0))
}

/// The `level` quantile of the chi-square distribution.
pub fn chisq_quantile(level: f64, df: usize) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("level must lie in (0, 1), got {level}")));
    }
    let tail = 1.0 - level;
    let mut hi = df as f64 + 1.0;
    while chisq_sf(hi, df)? > tail {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chisq_sf(mid, df)? > tail {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn free_parameters(c: &ConstraintSpec) -> usize {
    let r = c.dim();
    let tied: usize = c.ties().iter().map(|g| g.len() - 1).sum();
    r * (r + 1) / 2 - c.fixed().len() - c.zeros().len() - tied
}

/// A null hypothesis nested in an alternative.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    null: ConstraintSpec,
    beta_restrictions: BetaRestrictions,
    alt: ConstraintSpec,
    df: usize,
}

impl Hypothesis {
    /// Validates that the null constraints imply the alternative ones and
    /// counts the degrees of freedom: one per extra fixed or zero entry, one
    /// per tie-group member beyond the first, and one per restricted
    /// coefficient.
    pub fn new(
        null: ConstraintSpec,
        beta_restrictions: BetaRestrictions,
        alt: ConstraintSpec,
    ) -> Result<Self> {
        null.validate()?;
        alt.validate()?;
        if null.dim() != alt.dim() {
            return Err(Error::Spec(format!(
                "null is for r = {}, alternative for r = {}",
                null.dim(),
                alt.dim()
            )));
        }
        check_nested(&null, &alt)?;
        for f in null.fixed() {
            if f.row == f.col && f.value <= 0.0 {
                return Err(Error::Spec(format!(
                    "null fixes variance ({0}, {0}) at {1}; boundary hypotheses are not supported",
                    f.row + 1,
                    f.value
                )));
            }
        }
        let df = free_parameters(&alt) - free_parameters(&null) + beta_restrictions.len();
        if df == 0 {
            return Err(Error::Spec(
                "the null hypothesis imposes no restriction beyond the alternative".into(),
            ));
        }
        Ok(Hypothesis {
            null,
            beta_restrictions,
            alt,
            df,
        })
    }

    /// `Sigma` diagonal against unrestricted, keeping `base` (typically the
    /// Bernoulli identifiability constraints) under both.
    pub fn diagonal_sigma(base: &ConstraintSpec) -> Result<Self> {
        let null = base.clone().with_all_offdiagonal_zero()?;
        Self::new(null, BetaRestrictions::none(), base.clone())
    }

    pub fn null(&self) -> &ConstraintSpec {
        &self.null
    }

    pub fn alt(&self) -> &ConstraintSpec {
        &self.alt
    }

    pub fn beta_restrictions(&self) -> &BetaRestrictions {
        &self.beta_restrictions
    }

    pub fn df(&self) -> usize {
        self.df
    }
}

fn check_nested(null: &ConstraintSpec, alt: &ConstraintSpec) -> Result<()> {
    let not_nested = |what: String| Err(Error::Spec(format!("hypotheses are not nested: {what}")));
    for f in alt.fixed() {
        if null.fixed_value(f.row, f.col) != Some(f.value) {
            return not_nested(format!(
                "alternative fixes ({}, {}) = {} but the null does not",
                f.row + 1,
                f.col + 1,
                f.value
            ));
        }
    }
    for &(j, k) in alt.zeros() {
        if null.fixed_value(j, k) != Some(0.0) {
            return not_nested(format!(
                "alternative sets ({}, {}) to zero but the null does not",
                j + 1,
                k + 1
            ));
        }
    }
    for group in alt.ties() {
        let in_one_null_tie = null.ties().iter().any(|g| group.iter().all(|p| g.contains(p)));
        let values: Vec<Option<f64>> = group.iter().map(|&(j, k)| null.fixed_value(j, k)).collect();
        let fixed_equal = values[0].is_some() && values.iter().all(|v| *v == values[0]);
        if !(in_one_null_tie || fixed_equal) {
            return not_nested(format!(
                "alternative tie group starting at ({}, {}) is not implied by the null",
                group[0].0 + 1,
                group[0].1 + 1
            ));
        }
    }
    if null.eigen_floor() < alt.eigen_floor() {
        return not_nested("the null has a lower eigenvalue floor".into());
    }
    Ok(())
}

/// Estimates and convergence status of one fit.
#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub beta: Vec<f64>,
    /// Rows of `Sigma`.
    pub sigma: Vec<Vec<f64>>,
    pub h: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitSummary {
    fn from_fit(f: &FitResult) -> Self {
        FitSummary {
            beta: f.beta_hat.iter().copied().collect(),
            sigma: row_major(&f.sigma_hat),
            h: f.h_final,
            iterations: f.outer_iters,
            converged: f.converged,
        }
    }

    fn from_bcd(b: &BcdResult) -> Self {
        FitSummary {
            beta: b.beta.iter().copied().collect(),
            sigma: row_major(&b.sigma),
            h: b.h,
            iterations: b.iterations,
            converged: b.converged,
        }
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|row| row.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub t_n: f64,
    pub df: usize,
    pub p_value: f64,
    pub null_fit: FitSummary,
    pub alt_fit: FitSummary,
    pub warnings: Vec<String>,
}

/// The null fit and the alternative minimization at its expansion points.
#[derive(Debug, Clone)]
pub struct LrtParts {
    pub t_n: f64,
    pub null: FitResult,
    pub alt: BcdResult,
}

/// Computes `T_n` without checking how the hypotheses are related; the
/// alternative minimization starts from the null solution.
#[allow(clippy::too_many_arguments)]
pub fn lrt_statistic(
    data: &Dataset,
    spec: &ModelSpec,
    null: &ConstraintSpec,
    beta_restrictions: &BetaRestrictions,
    alt: &ConstraintSpec,
    ctl: &FitControls,
    start: &FitStart,
) -> Result<LrtParts> {
    spec.validate_constraints(alt)?;
    let null_fit =
        fit_with(data, spec, null, beta_restrictions, ctl, start).map_err(|e| e.context("null fit"))?;
    let point = WorkingPoint::new(data, &null_fit.w_hat, spec)?;
    let h_null = point.factorize(&null_fit.sigma_hat)?.h_n(&null_fit.beta_hat);
    let alt_fit = bcd_beta_sigma(
        &null_fit.beta_hat,
        &null_fit.sigma_hat,
        &point,
        alt,
        &BetaRestrictions::none(),
        ctl,
        ctl.alpha_init,
    )
    .map_err(|e| e.context("alternative fit"))?;
    Ok(LrtParts {
        t_n: h_null - alt_fit.h,
        null: null_fit,
        alt: alt_fit,
    })
}

/// Approximate likelihood-ratio test of `hyp`.
pub fn lrt(data: &Dataset, spec: &ModelSpec, hyp: &Hypothesis, ctl: &FitControls) -> Result<TestResult> {
    let parts = lrt_statistic(
        data,
        spec,
        &hyp.null,
        &hyp.beta_restrictions,
        &hyp.alt,
        ctl,
        &FitStart::default(),
    )?;
    let mut warnings = Vec::new();
    if !parts.null.converged {
        warnings.push(format!(
            "null fit did not converge in {} outer iterations",
            parts.null.outer_iters
        ));
    }
    if !parts.alt.converged {
        warnings.push(format!(
            "alternative fit did not converge in {} iterations",
            parts.alt.iterations
        ));
    }
    if parts.null.latent_warnings > 0 {
        warnings.push(format!(
            "{} expansion-point solves hit their iteration cap",
            parts.null.latent_warnings
        ));
    }
    Ok(TestResult {
        t_n: parts.t_n,
        df: hyp.df,
        p_value: chisq_sf(parts.t_n.max(0.0), hyp.df)?,
        null_fit: FitSummary::from_fit(&parts.null),
        alt_fit: FitSummary::from_bcd(&parts.alt),
        warnings,
    })
}

/// Confidence interval for one `Sigma` entry. A missing bound means the
/// statistic stayed below the critical value over the whole search range.
#[derive(Debug, Clone, Serialize)]
pub struct ProfileInterval {
    pub estimate: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub level: f64,
    pub critical_value: f64,
}

const CI_MAX_STEPS: usize = 50;
const CI_WIDTH: f64 = 1e-4;

/// Inverts the likelihood-ratio test of `Sigma_jk = v` against `cspec`.
pub fn profile_ci(
    data: &Dataset,
    spec: &ModelSpec,
    cspec: &ConstraintSpec,
    element: Position,
    level: f64,
    ctl: &FitControls,
) -> Result<ProfileInterval> {
    let (j, k) = if element.0 <= element.1 {
        element
    } else {
        (element.1, element.0)
    };
    if k >= cspec.dim() {
        return Err(Error::Spec(format!(
            "element ({}, {}) out of range for r = {}",
            j + 1,
            k + 1,
            cspec.dim()
        )));
    }
    if cspec.constrained_positions().contains(&(j, k)) {
        return Err(Error::Spec(format!(
            "element ({}, {}) is already constrained",
            j + 1,
            k + 1
        )));
    }
    let critical_value = chisq_quantile(level, 1)?;
    let base = fit(data, spec, cspec, ctl)?;
    let estimate = base.sigma_hat[(j, k)];
    let base_start = FitStart {
        beta: Some(base.beta_hat.clone()),
        sigma: Some(base.sigma_hat.clone()),
    };

    // None when v lies outside the feasible set
    let statistic = |v: f64, start: &FitStart| -> Result<Option<(f64, FitStart)>> {
        let Ok(null) = cspec.clone().with_fixed(j, k, v) else {
            return Ok(None);
        };
        match lrt_statistic(data, spec, &null, &BetaRestrictions::none(), cspec, ctl, start) {
            Ok(parts) => Ok(Some((
                parts.t_n,
                FitStart {
                    beta: Some(parts.null.beta_hat),
                    sigma: Some(parts.null.sigma_hat),
                },
            ))),
            Err(e) if matches!(e.root(), Error::Infeasible(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let step = 0.1 * (1.0 + estimate.abs());
    let search = |direction: f64| -> Result<Option<f64>> {
        let mut inside = estimate;
        let mut start = base_start.clone();
        for m in 1..=CI_MAX_STEPS {
            let v = estimate + direction * m as f64 * step;
            match statistic(v, &start)? {
                Some((t, next)) if t <= critical_value => {
                    inside = v;
                    start = next;
                }
                _ => {
                    let mut outside = v;
                    while (outside - inside).abs() >= CI_WIDTH {
                        let mid = 0.5 * (inside + outside);
                        match statistic(mid, &start)? {
                            Some((t, next)) if t <= critical_value => {
                                inside = mid;
                                start = next;
                            }
                            _ => outside = mid,
                        }
                    }
                    return Ok(Some(0.5 * (inside + outside)));
                }
            }
        }
        Ok(None)
    };

    Ok(ProfileInterval {
        estimate,
        lo: search(-1.0)?,
        hi: search(1.0)?,
        level,
        critical_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // P(chi2_1 <= x) = 2 Phi(sqrt x) - 1, integrated with composite Simpson
    fn chisq1_cdf_oracle(x: f64) -> f64 {
        let upper = x.sqrt();
        let m = 20_000;
        let h = upper / m as f64;
        let f = |u: f64| 2.0 * (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(0.0) + f(upper);
        for i in 1..m {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn chisq_tail_values() {
        assert_eq!(chisq_sf(0.0, 3).unwrap(), 1.0);
        assert_eq!(chisq_sf(f64::INFINITY, 3).unwrap(), 0.0);
        assert!(chisq_sf(1e4, 5).unwrap() < 1e-300);
        let p = chisq_sf(3.841459, 1).unwrap();
        assert!((p - (1.0 - chisq1_cdf_oracle(3.841459))).abs() < 1e-10);
        assert!((p - 0.05).abs() < 1e-6);
        assert!(chisq_sf(-1.0, 1).is_err());
    }

    #[test]
    fn quantile_inverts_tail() {
        let q = chisq_quantile(0.95, 1).unwrap();
        assert!((q - 3.841458820694124).abs() < 1e-9);
        let q = chisq_quantile(0.99, 36).unwrap();
        assert!((chisq_sf(q, 36).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn degrees_of_freedom() {
        let r = 9;
        let alt = ConstraintSpec::unconstrained(r);
        let hyp = Hypothesis::diagonal_sigma(&alt).unwrap();
        assert_eq!(hyp.df(), 36);

        let null = ConstraintSpec::unconstrained(2).with_zero(0, 1).unwrap();
        let hyp = Hypothesis::new(null, BetaRestrictions::none(), ConstraintSpec::unconstrained(2)).unwrap();
        assert_eq!(hyp.df(), 1);

        let null = ConstraintSpec::unconstrained(3)
            .with_tie(vec![(0, 1), (0, 2), (1, 2)])
            .unwrap();
        let restr = BetaRestrictions::new(vec![(0, 0.0)]).unwrap();
        let hyp = Hypothesis::new(null, restr, ConstraintSpec::unconstrained(3)).unwrap();
        assert_eq!(hyp.df(), 3);
    }

    #[test]
    fn rejects_bad_hypotheses() {
        let alt = ConstraintSpec::unconstrained(2).with_zero(0, 1).unwrap();
        let null = ConstraintSpec::unconstrained(2).with_fixed(0, 0, 1.0).unwrap();
        assert!(Hypothesis::new(null, BetaRestrictions::none(), alt.clone()).is_err());
        assert!(Hypothesis::new(alt.clone(), BetaRestrictions::none(), alt).is_err());
        let boundary = ConstraintSpec::unconstrained(2).with_fixed(1, 1, 0.0).unwrap();
        assert!(Hypothesis::new(
            boundary,
            BetaRestrictions::none(),
            ConstraintSpec::unconstrained(2)
        )
        .is_err());
    }
}
