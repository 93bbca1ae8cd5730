//! Model specification and observed data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::constraints::ConstraintSpec;
use crate::error::{Error, Result};
use crate::families::{Family, FamilyKind};

/// Per-response families and the coefficient dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    families: Vec<Family>,
    q: usize,
}

impl ModelSpec {
    pub fn new(families: Vec<Family>, q: usize) -> Result<Self> {
        if families.is_empty() {
            return Err(Error::Spec("at least one response is required".into()));
        }
        if q == 0 {
            return Err(Error::Spec("coefficient dimension q must be positive".into()));
        }
        for f in &families {
            f.validate()?;
        }
        Ok(ModelSpec { families, q })
    }

    pub fn r(&self) -> usize {
        self.families.len()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn families(&self) -> &[Family] {
        &self.families
    }

    pub fn family(&self, j: usize) -> &Family {
        &self.families[j]
    }

    pub fn psi(&self) -> DVector<f64> {
        DVector::from_iterator(self.r(), self.families.iter().map(|f| f.psi))
    }

    pub fn is_all_gaussian(&self) -> bool {
        self.families.iter().all(|f| f.kind == FamilyKind::Gaussian)
    }

    /// Indices of logit-link responses.
    pub fn bernoulli_indices(&self) -> Vec<usize> {
        self.families
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == FamilyKind::Bernoulli)
            .map(|(j, _)| j)
            .collect()
    }

    /// Constraint set fixing every Bernoulli diagonal at `value` and nothing else.
    pub fn identifiability_constraints(&self, value: f64) -> Result<ConstraintSpec> {
        let mut spec = ConstraintSpec::unconstrained(self.r());
        for j in self.bernoulli_indices() {
            spec = spec.with_fixed(j, j, value)?;
        }
        Ok(spec)
    }

    /// Checks that `cspec` matches the model dimension and fixes the diagonal
    /// of every Bernoulli coordinate, without which the latent variance of a
    /// binary response is not identified.
    pub fn validate_constraints(&self, cspec: &ConstraintSpec) -> Result<()> {
        if cspec.dim() != self.r() {
            return Err(Error::Spec(format!(
                "constraints are for r = {}, model has r = {}",
                cspec.dim(),
                self.r()
            )));
        }
        for j in self.bernoulli_indices() {
            match cspec.fixed_value(j, j) {
                Some(v) if v > 0.0 => {}
                Some(v) => {
                    return Err(Error::Spec(format!(
                        "bernoulli response {} has its latent variance fixed at {v}; it must be positive",
                        j + 1
                    )))
                }
                None => {
                    return Err(Error::Spec(format!(
                        "bernoulli response {} requires a fixed diagonal constraint ({0}, {0}, v)",
                        j + 1
                    )))
                }
            }
        }
        Ok(())
    }
}

/// `n` observations of a response vector `y_i` in `R^r` with design
/// matrix `X_i` in `R^{r x q}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: Vec<DMatrix<f64>>) -> Result<Self> {
        if y.nrows() != x.len() {
            return Err(Error::Dimension(format!(
                "{} response rows but {} design matrices",
                y.nrows(),
                x.len()
            )));
        }
        if y.nrows() == 0 {
            return Err(Error::Spec("dataset has no observations".into()));
        }
        let (r, q) = (y.ncols(), x[0].ncols());
        if let Some(i) = x.iter().position(|xi| xi.nrows() != r || xi.ncols() != q) {
            return Err(Error::Dimension(format!(
                "design matrix {} is {}x{}, expected {r}x{q}",
                i + 1,
                x[i].nrows(),
                x[i].ncols()
            )));
        }
        Ok(Dataset { y, x })
    }

    /// Multivariate regression with every response sharing the same
    /// predictors: `X_i = I_r (x) x_i^T` and `beta = vec(B)` with `B` in
    /// `R^{p x r}`, so coefficients for response `j` occupy `j*p .. (j+1)*p`.
    pub fn from_shared_predictors(y: DMatrix<f64>, predictors: &DMatrix<f64>) -> Result<Self> {
        if y.nrows() != predictors.nrows() {
            return Err(Error::Dimension(format!(
                "{} response rows but {} predictor rows",
                y.nrows(),
                predictors.nrows()
            )));
        }
        let (n, r, p) = (y.nrows(), y.ncols(), predictors.ncols());
        let x = (0..n)
            .map(|i| {
                let mut xi = DMatrix::zeros(r, r * p);
                for j in 0..r {
                    for k in 0..p {
                        xi[(j, j * p + k)] = predictors[(i, k)];
                    }
                }
                xi
            })
            .collect();
        Self::new(y, x)
    }

    /// Seemingly-unrelated-regressions layout: response `j` has its own
    /// predictor block (`n x p_j`) and coefficients, stacked in order.
    pub fn from_per_response(y: DMatrix<f64>, blocks: &[DMatrix<f64>]) -> Result<Self> {
        let (n, r) = (y.nrows(), y.ncols());
        if blocks.len() != r {
            return Err(Error::Dimension(format!(
                "{} predictor blocks for {r} responses",
                blocks.len()
            )));
        }
        if let Some(b) = blocks.iter().find(|b| b.nrows() != n) {
            return Err(Error::Dimension(format!(
                "predictor block has {} rows, expected {n}",
                b.nrows()
            )));
        }
        let q: usize = blocks.iter().map(|b| b.ncols()).sum();
        let x = (0..n)
            .map(|i| {
                let mut xi = DMatrix::zeros(r, q);
                let mut offset = 0;
                for (j, b) in blocks.iter().enumerate() {
                    for k in 0..b.ncols() {
                        xi[(j, offset + k)] = b[(i, k)];
                    }
                    offset += b.ncols();
                }
                xi
            })
            .collect();
        Self::new(y, x)
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn r(&self) -> usize {
        self.y.ncols()
    }

    pub fn q(&self) -> usize {
        self.x[0].ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn y_row(&self, i: usize) -> DVector<f64> {
        self.y.row(i).transpose()
    }

    pub fn x(&self, i: usize) -> &DMatrix<f64> {
        &self.x[i]
    }

    pub fn designs(&self) -> &[DMatrix<f64>] {
        &self.x
    }

    /// Observations reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n()];
        for &i in order {
            if i >= self.n() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Dimension("order is not a permutation".into()));
            }
        }
        if order.len() != self.n() {
            return Err(Error::Dimension("order is not a permutation".into()));
        }
        let y = DMatrix::from_fn(self.n(), self.r(), |i, j| self.y[(order[i], j)]);
        let x = order.iter().map(|&i| self.x[i].clone()).collect();
        Self::new(y, x)
    }

    /// Stacked design Gram matrix `sum_i X_i^T X_i`.
    pub fn design_gram(&self) -> DMatrix<f64> {
        let q = self.q();
        let mut gram = DMatrix::zeros(q, q);
        for xi in &self.x {
            gram += xi.transpose() * xi;
        }
        gram
    }

    /// Checks dimensions against `spec`, response supports, and invertibility
    /// of the stacked design Gram matrix.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.r() != spec.r() || self.q() != spec.q() {
            return Err(Error::Dimension(format!(
                "data has r = {}, q = {}; model has r = {}, q = {}",
                self.r(),
                self.q(),
                spec.r(),
                spec.q()
            )));
        }
        for i in 0..self.n() {
            for (j, f) in spec.families().iter().enumerate() {
                let y = self.y[(i, j)];
                if !f.in_support(y) {
                    return Err(Error::Spec(format!(
                        "observation {}, response {}: {y} is outside the {} support",
                        i + 1,
                        j + 1,
                        f.kind.name()
                    )));
                }
            }
            if self.x[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::Spec(format!(
                    "observation {} has a non-finite design entry",
                    i + 1
                )));
            }
        }
        let gram = self.design_gram();
        let eig = SymmetricEigen::new(gram);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 1e-12 * max.max(1.0)) {
            return Err(Error::RankDeficient {
                smallest_singular_value: min.max(0.0).sqrt(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn shared_predictor_layout_is_kronecker() {
        let y = dmatrix![1.0, 0.0; 2.0, 1.0];
        let p = dmatrix![1.0, 0.5; 1.0, -0.5];
        let data = Dataset::from_shared_predictors(y, &p).unwrap();
        assert_eq!(data.q(), 4);
        assert_eq!(data.x(0), &dmatrix![1.0, 0.5, 0.0, 0.0; 0.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn per_response_layout_is_block_diagonal() {
        let y = dmatrix![1.0, 0.0];
        let blocks = [dmatrix![1.0, 0.3], dmatrix![1.0]];
        let data = Dataset::from_per_response(y, &blocks).unwrap();
        assert_eq!(data.x(0), &dmatrix![1.0, 0.3, 0.0; 0.0, 0.0, 1.0]);
    }

    #[test]
    fn bernoulli_requires_fixed_diagonal() {
        let spec = ModelSpec::new(vec![Family::gaussian(1.0).unwrap(), Family::bernoulli()], 2).unwrap();
        let ok = spec.identifiability_constraints(1.0).unwrap();
        assert!(spec.validate_constraints(&ok).is_ok());
        let missing = ConstraintSpec::unconstrained(2);
        assert!(spec.validate_constraints(&missing).is_err());
        let zero = ConstraintSpec::unconstrained(2).with_fixed(1, 1, 0.0).unwrap();
        assert!(spec.validate_constraints(&zero).is_err());
    }

    #[test]
    fn support_and_rank_checks() {
        let spec = ModelSpec::new(vec![Family::poisson(), Family::bernoulli()], 2).unwrap();
        let p = dmatrix![1.0; 1.0; 1.0];
        let bad = Dataset::from_shared_predictors(dmatrix![1.0, 0.0; 2.5, 1.0; 0.0, 1.0], &p).unwrap();
        assert!(bad.validate(&spec).is_err());
        let good = Dataset::from_shared_predictors(dmatrix![1.0, 0.0; 2.0, 1.0; 0.0, 1.0], &p).unwrap();
        assert!(good.validate(&spec).is_ok());
        let collinear = dmatrix![1.0, 2.0; 1.0, 2.0; 1.0, 2.0];
        let spec4 = ModelSpec::new(vec![Family::poisson(), Family::bernoulli()], 4).unwrap();
        let rankdef =
            Dataset::from_shared_predictors(dmatrix![1.0, 0.0; 2.0, 1.0; 0.0, 1.0], &collinear).unwrap();
        assert!(matches!(
            rankdef.validate(&spec4),
            Err(Error::RankDeficient { .. })
        ));
    }
}
