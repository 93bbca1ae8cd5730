//! The linearized working model and its negative log-likelihood `h_n`.
//!
//! Linearizing the inverse link `grad c` around an expansion point `w` gives
//! the working model `y ~ N(m(w, beta), C(w, Sigma))` with
//!
//! ```text
//! m(w, beta)  = grad c(w) + D(w) (X beta - w)
//! C(w, Sigma) = diag(psi) D(w) + D(w) Sigma D(w),      D(w) = hess c(w)
//! ```
//!
//! and `h_n = sum_i log det C_i + r_i^T C_i^{-1} r_i` with `r_i = y_i - m_i`.
//! In the all-Gaussian case the working model is exact and `h_n` is twice the
//! negative log-likelihood up to `n r log(2 pi)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::{Dataset, ModelSpec};
use crate::error::{Error, Result};
use crate::sum;

/// Expansion points, coefficients and latent covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingState {
    /// `n x r`, row `i` is the expansion point of observation `i`.
    pub w: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// `grad c(w) + D(w)(X beta - w)`.
pub fn working_mean(
    w: &DVector<f64>,
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
    spec: &ModelSpec,
) -> DVector<f64> {
    let eta = x * beta;
    DVector::from_fn(spec.r(), |j, _| {
        let f = spec.family(j);
        f.mean(w[j]) + f.varweight(w[j]) * (eta[j] - w[j])
    })
}

/// `diag(psi) D(w) + D(w) Sigma D(w)`.
pub fn working_cov(w: &DVector<f64>, sigma: &DMatrix<f64>, spec: &ModelSpec) -> DMatrix<f64> {
    let d: Vec<f64> = (0..spec.r()).map(|j| spec.family(j).varweight(w[j])).collect();
    let psi_d: Vec<f64> = (0..spec.r()).map(|j| spec.family(j).psi * d[j]).collect();
    build_cov(&d, &psi_d, sigma)
}

fn build_cov(d: &[f64], psi_d: &[f64], sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let r = d.len();
    DMatrix::from_fn(r, r, |j, k| {
        let v = d[j] * sigma[(j, k)] * d[k];
        if j == k {
            v + psi_d[j]
        } else {
            v
        }
    })
}

/// Quantities that depend on the expansion points only: `D(w_i)`,
/// `X~_i = D(w_i) X_i` and `y~_i = y_i - grad c(w_i) + D(w_i) w_i`, so the
/// working residual is `y~_i - X~_i beta`.
#[derive(Debug, Clone)]
pub struct WorkingPoint {
    d: Vec<Vec<f64>>,
    psi_d: Vec<Vec<f64>>,
    xt: Vec<DMatrix<f64>>,
    yt: Vec<DVector<f64>>,
    r: usize,
    q: usize,
}

impl WorkingPoint {
    pub fn new(data: &Dataset, w: &DMatrix<f64>, spec: &ModelSpec) -> Result<Self> {
        let (n, r) = (data.n(), data.r());
        if w.nrows() != n || w.ncols() != r {
            return Err(Error::Dimension(format!(
                "expansion points are {}x{}, expected {n}x{r}",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite expansion point".into()));
        }
        let mut d = Vec::with_capacity(n);
        let mut psi_d = Vec::with_capacity(n);
        let mut xt = Vec::with_capacity(n);
        let mut yt = Vec::with_capacity(n);
        for i in 0..n {
            let di: Vec<f64> = (0..r).map(|j| spec.family(j).varweight(w[(i, j)])).collect();
            let mut xi = data.x(i).clone();
            for (j, &dj) in di.iter().enumerate() {
                xi.row_mut(j).scale_mut(dj);
            }
            let yi = DVector::from_fn(r, |j, _| {
                let f = spec.family(j);
                data.y()[(i, j)] - f.mean(w[(i, j)]) + di[j] * w[(i, j)]
            });
            psi_d.push((0..r).map(|j| spec.family(j).psi * di[j]).collect());
            d.push(di);
            xt.push(xi);
            yt.push(yi);
        }
        Ok(WorkingPoint {
            d,
            psi_d,
            xt,
            yt,
            r,
            q: data.q(),
        })
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// Factorizes every working covariance `C(w_i, Sigma)`.
    pub fn factorize(&self, sigma: &DMatrix<f64>) -> Result<Factorized<'_>> {
        if sigma.nrows() != self.r || sigma.ncols() != self.r {
            return Err(Error::Dimension(format!(
                "Sigma is {}x{}, expected {r}x{r}",
                sigma.nrows(),
                sigma.ncols(),
                r = self.r
            )));
        }
        let mut chol = Vec::with_capacity(self.n());
        let mut logdet = sum::Scalar::default();
        for i in 0..self.n() {
            let c = build_cov(&self.d[i], &self.psi_d[i], sigma);
            let factor = Cholesky::new(c).ok_or(Error::NotPositiveDefinite { observation: i })?;
            let l = factor.l_dirty();
            let ld: f64 = (0..self.r).map(|j| l[(j, j)].ln()).sum();
            if !ld.is_finite() {
                return Err(Error::NotPositiveDefinite { observation: i });
            }
            logdet.add(2.0 * ld);
            chol.push(factor);
        }
        Ok(Factorized {
            point: self,
            chol,
            logdet: logdet.value(),
        })
    }

    /// Working residual `y~_i - X~_i beta`.
    fn residual(&self, i: usize, beta: &DVector<f64>) -> DVector<f64> {
        &self.yt[i] - &self.xt[i] * beta
    }
}

/// Working covariances factorized at one `Sigma`; reused for the
/// objective, the `Sigma` gradient and the GLS update while `Sigma` is fixed.
pub struct Factorized<'a> {
    point: &'a WorkingPoint,
    chol: Vec<Cholesky<f64, Dyn>>,
    logdet: f64,
}

impl Factorized<'_> {
    pub fn n(&self) -> usize {
        self.chol.len()
    }

    pub fn h_n(&self, beta: &DVector<f64>) -> f64 {
        let mut quad = sum::Scalar::default();
        for (i, factor) in self.chol.iter().enumerate() {
            let resid = self.point.residual(i, beta);
            let z = factor
                .l_dirty()
                .solve_lower_triangular(&resid)
                .expect("cholesky factor has a positive diagonal");
            quad.add(z.norm_squared());
        }
        self.logdet + quad.value()
    }

    /// `sum_i D_i C_i^{-1} D_i - D_i C_i^{-1} r_i r_i^T C_i^{-1} D_i`.
    pub fn grad_sigma(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        self.grad_and_precision(beta).0
    }

    /// The `Sigma` gradient together with the average working precision
    /// `n^{-1} sum_i D_i C_i^{-1} D_i`, whose inverse scales Fisher-type steps.
    pub fn grad_and_precision(&self, beta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let r = self.point.r;
        let mut grad = sum::Matrix::zeros(r, r);
        let mut prec = sum::Matrix::zeros(r, r);
        for (i, factor) in self.chol.iter().enumerate() {
            let d = &self.point.d[i];
            let resid = self.point.residual(i, beta);
            let u = factor.solve(&resid);
            let cinv = factor.inverse();
            for j in 0..r {
                for k in 0..=j {
                    let a = d[j] * d[k] * cinv[(j, k)];
                    grad.add_entry(j, k, a - d[j] * d[k] * u[j] * u[k]);
                    prec.add_entry(j, k, a);
                }
            }
        }
        let mut grad = grad.value();
        let mut prec = prec.value() / self.chol.len() as f64;
        for j in 0..r {
            for k in 0..j {
                grad[(k, j)] = grad[(j, k)];
                prec[(k, j)] = prec[(j, k)];
            }
        }
        (grad, prec)
    }

    /// Generalized least squares for `beta` at the factorized `Sigma`,
    /// with any restricted coordinates held at their values.
    pub fn beta_gls(&self, restrictions: &BetaRestrictions) -> Result<DVector<f64>> {
        let q = self.point.q;
        let mut a = sum::Matrix::zeros(q, q);
        let mut b = sum::Vector::zeros(q);
        for (i, factor) in self.chol.iter().enumerate() {
            let l = factor.l_dirty();
            let zx = l
                .solve_lower_triangular(&self.point.xt[i])
                .expect("cholesky factor has a positive diagonal");
            let zy = l
                .solve_lower_triangular(&self.point.yt[i])
                .expect("cholesky factor has a positive diagonal");
            a.add(&zx.tr_mul(&zx));
            b.add(&zx.tr_mul(&zy));
        }
        restrictions.solve(&a.value(), &b.value())
    }
}

/// Coordinates of `beta` held at fixed values (0-based index, value).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BetaRestrictions {
    entries: Vec<(usize, f64)>,
}

impl BetaRestrictions {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Spec("a beta coordinate is restricted twice".into()));
        }
        if entries.iter().any(|e| !e.1.is_finite()) {
            return Err(Error::Spec("beta restriction values must be finite".into()));
        }
        Ok(BetaRestrictions { entries })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.0 >= q) {
            return Err(Error::Spec(format!(
                "beta restriction index {} out of range for q = {q}",
                e.0 + 1
            )));
        }
        if self.entries.len() >= q {
            return Err(Error::Spec("every beta coordinate is restricted".into()));
        }
        Ok(())
    }

    /// Overwrites the restricted coordinates of `beta`.
    pub fn apply(&self, beta: &mut DVector<f64>) {
        for &(k, v) in &self.entries {
            beta[k] = v;
        }
    }

    /// Minimizes `beta^T A beta - 2 b^T beta` over the free coordinates.
    pub(crate) fn solve(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
        let q = b.len();
        if self.entries.is_empty() {
            return spd_solve(a.clone(), b.clone()).map(|x| x.column(0).into_owned());
        }
        let mut fixed = vec![None; q];
        for &(k, v) in &self.entries {
            fixed[k] = Some(v);
        }
        let free: Vec<usize> = (0..q).filter(|&k| fixed[k].is_none()).collect();
        let m = free.len();
        let a_ff = DMatrix::from_fn(m, m, |s, t| a[(free[s], free[t])]);
        let rhs = DVector::from_fn(m, |s, _| {
            let k = free[s];
            b[k] - self.entries.iter().map(|&(c, v)| a[(k, c)] * v).sum::<f64>()
        });
        let sol = spd_solve(a_ff, rhs)?;
        let mut beta = DVector::zeros(q);
        for (s, &k) in free.iter().enumerate() {
            beta[k] = sol[(s, 0)];
        }
        self.apply(&mut beta);
        Ok(beta)
    }
}

fn spd_solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<DMatrix<f64>> {
    let scale = a.diagonal().amax().max(f64::MIN_POSITIVE);
    match Cholesky::new(a.clone()) {
        Some(factor) if factor.l_dirty().diagonal().min() > 1e-7 * scale.sqrt() => {
            Ok(factor.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice())))
        }
        _ => {
            let sv = a.singular_values();
            Err(Error::RankDeficient {
                smallest_singular_value: sv.min(),
            })
        }
    }
}

/// `h_n(beta, Sigma | w)`.
pub fn h_n(
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    data: &Dataset,
    w: &DMatrix<f64>,
    spec: &ModelSpec,
) -> Result<f64> {
    let point = WorkingPoint::new(data, w, spec)?;
    Ok(point.factorize(sigma)?.h_n(beta))
}

/// Gradient of `h_n` with respect to `Sigma`, entries treated as independent.
pub fn grad_sigma(
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    data: &Dataset,
    w: &DMatrix<f64>,
    spec: &ModelSpec,
) -> Result<DMatrix<f64>> {
    let point = WorkingPoint::new(data, w, spec)?;
    Ok(point.factorize(sigma)?.grad_sigma(beta))
}

/// Minimizer of `h_n` over `beta` at fixed `Sigma` and `w`.
pub fn beta_gls(
    sigma: &DMatrix<f64>,
    data: &Dataset,
    w: &DMatrix<f64>,
    spec: &ModelSpec,
) -> Result<DVector<f64>> {
    let point = WorkingPoint::new(data, w, spec)?;
    point.factorize(sigma)?.beta_gls(&BetaRestrictions::none())
}
