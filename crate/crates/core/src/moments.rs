//! Marginal moments of the responses implied by `(beta, Sigma)`.
//!
//! Gaussian and Poisson coordinates have closed forms. Anything involving a
//! Bernoulli coordinate is integrated by Gauss-Hermite quadrature of order 64,
//! on a tensor grid for pairs. Latent standard deviations above
//! [`GH_MAX_SD`] switch to a composite Gauss-Legendre rule.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::ModelSpec;
use crate::error::{Error, Result};
use crate::families::{Family, FamilyKind};
use crate::fitter::FitResult;

pub const GH_ORDER: usize = 64;

/// Nodes and weights for `int exp(-x^2) f(x) dx`, by Newton iteration on the
/// orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Order-64 rule rescaled for expectations under a standard normal:
/// `E f(Z) ~ sum_i w_i f(z_i)`.
fn normal_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let (x, w) = gauss_hermite(GH_ORDER);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        (
            x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
            w.iter().map(|v| v / sqrt_pi).collect(),
        )
    })
}

/// Largest latent standard deviation handled by the Gauss-Hermite rule.
/// Beyond it the inverse link varies faster than the node spacing.
pub const GH_MAX_SD: f64 = 2.0;
const PANEL_ORDER: usize = 16;
const Z_RANGE: f64 = 9.0;

/// Gauss-Legendre nodes and weights on [-1, 1] (Golub-Welsch).
fn legendre_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = PANEL_ORDER;
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i.abs_diff(j) == 1 {
                let k = i.max(j) as f64;
                k / (4.0 * k * k - 1.0).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.into_iter().unzip()
    })
}

/// Standard-normal rule adequate for integrands that vary on the scale
/// `1 / sd` in `z`: Gauss-Hermite for moderate `sd`, otherwise composite
/// Gauss-Legendre over `|z| <= 9` with panels of width `1 / sd`.
fn rule_for(sd: f64) -> std::borrow::Cow<'static, (Vec<f64>, Vec<f64>)> {
    if sd <= GH_MAX_SD {
        return std::borrow::Cow::Borrowed(normal_rule());
    }
    let (x, w) = legendre_rule();
    let panels = (2.0 * Z_RANGE * sd).ceil() as usize;
    let width = 2.0 * Z_RANGE / panels as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut nodes = Vec::with_capacity(panels * x.len());
    let mut weights = Vec::with_capacity(panels * x.len());
    for p in 0..panels {
        let centre = -Z_RANGE + (p as f64 + 0.5) * width;
        for (&xi, &wi) in x.iter().zip(w) {
            let z = centre + 0.5 * width * xi;
            nodes.push(z);
            weights.push(0.5 * width * wi * norm * (-0.5 * z * z).exp());
        }
    }
    std::borrow::Cow::Owned((nodes, weights))
}

/// `E g(W)` for `W ~ N(mu, var)`.
pub fn normal_expectation(mu: f64, var: f64, g: impl Fn(f64) -> f64) -> f64 {
    let sd = var.max(0.0).sqrt();
    let rule = rule_for(sd);
    let (z, w) = (&rule.0, &rule.1);
    z.iter().zip(w).map(|(&z, &w)| w * g(mu + sd * z)).sum()
}

/// `E g(W_1) h(W_2)`, `E g(W_1)` and `E h(W_2)` for a bivariate normal with
/// means `mu` and covariance `[[v1, c], [c, v2]]`, on one tensor grid. The
/// factorization tolerates singular covariances.
pub fn bivariate_expectations(
    mu: [f64; 2],
    v1: f64,
    v2: f64,
    c: f64,
    g: impl Fn(f64) -> f64,
    h: impl Fn(f64) -> f64,
) -> (f64, f64, f64) {
    let l11 = v1.max(0.0).sqrt();
    let l21 = if l11 > 0.0 { c / l11 } else { 0.0 };
    let l22 = (v2 - l21 * l21).max(0.0).sqrt();
    let outer = rule_for(l11.max(l21.abs()));
    let inner_rule = rule_for(l22);
    let (mut gh, mut eg, mut eh) = (0.0, 0.0, 0.0);
    for (&za, &wa) in outer.0.iter().zip(&outer.1) {
        let ga = g(mu[0] + l11 * za);
        let inner: f64 = inner_rule
            .0
            .iter()
            .zip(&inner_rule.1)
            .map(|(&zb, &wb)| wb * h(mu[1] + l21 * za + l22 * zb))
            .sum();
        gh += wa * ga * inner;
        eg += wa * ga;
        eh += wa * inner;
    }
    (gh, eg, eh)
}

fn check_dims(beta: &DVector<f64>, sigma: &DMatrix<f64>, x: &DMatrix<f64>, spec: &ModelSpec) -> Result<()> {
    let r = spec.r();
    if sigma.nrows() != r || sigma.ncols() != r || x.nrows() != r || x.ncols() != beta.len() {
        return Err(Error::Dimension(format!(
            "expected Sigma {r}x{r} and X {r}x{}, got Sigma {}x{} and X {}x{}",
            beta.len(),
            sigma.nrows(),
            sigma.ncols(),
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

fn coordinate_mean(f: &Family, eta: f64, var: f64) -> f64 {
    match f.kind {
        FamilyKind::Gaussian => eta,
        FamilyKind::Poisson => (eta + 0.5 * var).exp(),
        FamilyKind::Bernoulli => normal_expectation(eta, var, |t| f.mean(t)),
    }
}

/// `E(Y)` at design `x`.
pub fn marginal_mean(
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    x: &DMatrix<f64>,
    spec: &ModelSpec,
) -> Result<DVector<f64>> {
    check_dims(beta, sigma, x, spec)?;
    let eta = x * beta;
    Ok(DVector::from_fn(spec.r(), |j, _| {
        coordinate_mean(spec.family(j), eta[j], sigma[(j, j)])
    }))
}

/// `cov(Y)` at design `x`.
pub fn marginal_cov(
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    x: &DMatrix<f64>,
    spec: &ModelSpec,
) -> Result<DMatrix<f64>> {
    check_dims(beta, sigma, x, spec)?;
    let r = spec.r();
    let eta = x * beta;
    let mean: Vec<f64> = (0..r)
        .map(|j| coordinate_mean(spec.family(j), eta[j], sigma[(j, j)]))
        .collect();
    let mut cov = DMatrix::zeros(r, r);
    for j in 0..r {
        let f = spec.family(j);
        let s = sigma[(j, j)];
        cov[(j, j)] = match f.kind {
            FamilyKind::Gaussian => f.psi + s,
            FamilyKind::Poisson => {
                (2.0 * eta[j] + s).exp() * (s.exp() - 1.0 + f.psi * (-eta[j] - 0.5 * s).exp())
            }
            FamilyKind::Bernoulli => mean[j] * (1.0 - mean[j]),
        };
        for k in 0..j {
            let g = spec.family(k);
            let c = sigma[(j, k)];
            use FamilyKind::*;
            let v = match (f.kind, g.kind) {
                (Gaussian, Gaussian) => c,
                (Gaussian, Poisson) => c * mean[k],
                (Poisson, Gaussian) => c * mean[j],
                (Poisson, Poisson) => (eta[j] + eta[k] + 0.5 * s + 0.5 * sigma[(k, k)]).exp() * c.exp_m1(),
                _ => {
                    let (egh, eg, eh) = bivariate_expectations(
                        [eta[j], eta[k]],
                        s,
                        sigma[(k, k)],
                        c,
                        |t| f.mean(t),
                        |t| g.mean(t),
                    );
                    egh - eg * eh
                }
            };
            cov[(j, k)] = v;
            cov[(k, j)] = v;
        }
    }
    Ok(cov)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cor: DMatrix<f64>,
}

pub fn marginal_moments(
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    x: &DMatrix<f64>,
    spec: &ModelSpec,
) -> Result<MarginalMoments> {
    let mean = marginal_mean(beta, sigma, x, spec)?;
    let cov = marginal_cov(beta, sigma, x, spec)?;
    let r = spec.r();
    let sd: Vec<f64> = (0..r).map(|j| cov[(j, j)].sqrt()).collect();
    let cor = DMatrix::from_fn(r, r, |j, k| {
        if j == k {
            1.0
        } else {
            cov[(j, k)] / (sd[j] * sd[k])
        }
    });
    Ok(MarginalMoments { mean, cov, cor })
}

/// Predicted means at new designs from given parameters.
pub fn predict_with(
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    x_new: &[DMatrix<f64>],
    spec: &ModelSpec,
) -> Result<Vec<DVector<f64>>> {
    x_new
        .iter()
        .enumerate()
        .map(|(i, x)| {
            marginal_mean(beta, sigma, x, spec).map_err(|e| e.context(format!("new observation {}", i + 1)))
        })
        .collect()
}

/// Predicted means at new designs from a fit.
pub fn predict(fit: &FitResult, x_new: &[DMatrix<f64>], spec: &ModelSpec) -> Result<Vec<DVector<f64>>> {
    predict_with(&fit.beta_hat, &fit.sigma_hat, x_new, spec)
}

/// What [`lemma1_monotonicity_check`] varies.
#[derive(Debug, Clone, PartialEq)]
pub enum MonotonicityGrid {
    /// `E g(W_1)` over the means `mus` at fixed variance.
    Mean { mus: Vec<f64>, var: f64 },
    /// `E g(W_1) h(W_2)` over the covariances `covs` at fixed means and variances.
    Covariance {
        mu: [f64; 2],
        var: [f64; 2],
        covs: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub values: Vec<f64>,
    /// Smallest successive difference.
    pub min_increment: f64,
    /// Every successive difference exceeds -1e-10.
    pub increasing: bool,
}

/// Evaluates the mean or cross-moment curve of a family pair by quadrature
/// and reports whether it increases along the grid. The inverse links of all
/// supported families are increasing, so the curves should be.
pub fn lemma1_monotonicity_check(pair: (&Family, &Family), grid: &MonotonicityGrid) -> MonotonicityReport {
    let (f, g) = pair;
    let values: Vec<f64> = match grid {
        MonotonicityGrid::Mean { mus, var } => mus
            .iter()
            .map(|&m| normal_expectation(m, *var, |t| f.mean(t)))
            .collect(),
        MonotonicityGrid::Covariance { mu, var, covs } => covs
            .iter()
            .map(|&c| bivariate_expectations(*mu, var[0], var[1], c, |t| f.mean(t), |t| g.mean(t)).0)
            .collect(),
    };
    let min_increment = values
        .windows(2)
        .map(|p| p[1] - p[0])
        .fold(f64::INFINITY, f64::min);
    MonotonicityReport {
        increasing: min_increment > -1e-10,
        min_increment,
        values,
    }
}

/// Correlation between a Gaussian response with dispersion `psi1` and a
/// Bernoulli response when both latent means are zero and the latent
/// correlation is one, i.e. `Sigma_12 = sqrt(Sigma_11 Sigma_22)`.
pub fn limiting_bernoulli_gaussian_correlation(psi1: f64, sigma11: f64, sigma22: f64) -> Result<f64> {
    let spec = ModelSpec::new(vec![Family::gaussian(psi1)?, Family::bernoulli()], 2)?;
    let c = (sigma11 * sigma22).sqrt();
    let sigma = DMatrix::from_row_slice(2, 2, &[sigma11, c, c, sigma22]);
    let m = marginal_moments(&DVector::zeros(2), &sigma, &DMatrix::identity(2, 2), &spec)?;
    Ok(m.cor[(0, 1)])
}
