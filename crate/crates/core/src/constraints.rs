//! The feasible covariance set: element constraints (fixed values, zeros,
//! equality ties) intersected with the symmetric matrices whose eigenvalues are
//! bounded below by a floor `eigen_floor >= 0`.
//!
//! Projections onto the intersection use Dykstra's alternating projections,
//! which converge to the Frobenius-nearest feasible point rather than merely a
//! feasible point.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

const SYMMETRY_TOL: f64 = 1e-12;

/// An entry `(row, col)` of a symmetric matrix with `row <= col`, 0-based.
pub type Position = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedEntry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Description of the feasible covariance set for an `r x r` matrix.
///
/// Positions are 0-based and stored with `row <= col`; each constraint applies
/// to both `(row, col)` and `(col, row)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    r: usize,
    fixed: Vec<FixedEntry>,
    zeros: Vec<Position>,
    ties: Vec<Vec<Position>>,
    eigen_floor: f64,
}

fn ordered(j: usize, k: usize) -> Position {
    if j <= k {
        (j, k)
    } else {
        (k, j)
    }
}

impl ConstraintSpec {
    /// The unconstrained positive semidefinite cone.
    pub fn unconstrained(r: usize) -> Self {
        ConstraintSpec {
            r,
            fixed: Vec::new(),
            zeros: Vec::new(),
            ties: Vec::new(),
            eigen_floor: 0.0,
        }
    }

    pub fn new(
        r: usize,
        fixed: Vec<FixedEntry>,
        zeros: Vec<Position>,
        ties: Vec<Vec<Position>>,
        eigen_floor: f64,
    ) -> Result<Self> {
        let spec = ConstraintSpec {
            r,
            fixed: fixed
                .into_iter()
                .map(|f| {
                    let (row, col) = ordered(f.row, f.col);
                    FixedEntry {
                        row,
                        col,
                        value: f.value,
                    }
                })
                .collect(),
            zeros: zeros.into_iter().map(|(j, k)| ordered(j, k)).collect(),
            ties: ties
                .into_iter()
                .map(|g| g.into_iter().map(|(j, k)| ordered(j, k)).collect())
                .collect(),
            eigen_floor,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.r
    }

    pub fn fixed(&self) -> &[FixedEntry] {
        &self.fixed
    }

    pub fn zeros(&self) -> &[Position] {
        &self.zeros
    }

    pub fn ties(&self) -> &[Vec<Position>] {
        &self.ties
    }

    pub fn eigen_floor(&self) -> f64 {
        self.eigen_floor
    }

    /// Adds `Sigma_jk = Sigma_kj = value`.
    pub fn with_fixed(mut self, j: usize, k: usize, value: f64) -> Result<Self> {
        let (row, col) = ordered(j, k);
        self.fixed.push(FixedEntry { row, col, value });
        self.validate()?;
        Ok(self)
    }

    /// Adds `Sigma_jk = Sigma_kj = 0`.
    pub fn with_zero(mut self, j: usize, k: usize) -> Result<Self> {
        self.zeros.push(ordered(j, k));
        self.validate()?;
        Ok(self)
    }

    pub fn with_tie(mut self, group: Vec<Position>) -> Result<Self> {
        self.ties
            .push(group.into_iter().map(|(j, k)| ordered(j, k)).collect());
        self.validate()?;
        Ok(self)
    }

    pub fn with_eigen_floor(mut self, eigen_floor: f64) -> Result<Self> {
        self.eigen_floor = eigen_floor;
        self.validate()?;
        Ok(self)
    }

    /// Adds zeros on every off-diagonal position not already constrained.
    pub fn with_all_offdiagonal_zero(mut self) -> Result<Self> {
        let taken = self.constrained_positions();
        for j in 0..self.r {
            for k in (j + 1)..self.r {
                if !taken.contains(&(j, k)) {
                    self.zeros.push((j, k));
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    /// Value fixed at `(j, k)`, counting zeros as fixed at 0.
    pub fn fixed_value(&self, j: usize, k: usize) -> Option<f64> {
        let pos = ordered(j, k);
        if self.zeros.contains(&pos) {
            return Some(0.0);
        }
        self.fixed.iter().find(|f| (f.row, f.col) == pos).map(|f| f.value)
    }

    /// All positions touched by any constraint.
    pub fn constrained_positions(&self) -> HashSet<Position> {
        let mut set: HashSet<Position> = self.fixed.iter().map(|f| (f.row, f.col)).collect();
        set.extend(self.zeros.iter().copied());
        for g in &self.ties {
            set.extend(g.iter().copied());
        }
        set
    }

    pub fn has_affine_constraints(&self) -> bool {
        !(self.fixed.is_empty() && self.zeros.is_empty() && self.ties.is_empty())
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Spec("covariance dimension must be positive".into()));
        }
        if !(self.eigen_floor.is_finite() && self.eigen_floor >= 0.0) {
            return Err(Error::Spec(format!(
                "eigen_floor must be finite and nonnegative, got {}",
                self.eigen_floor
            )));
        }
        let mut seen = HashSet::new();
        let mut claim = |pos: Position, what: &str| -> Result<()> {
            if pos.1 >= self.r {
                return Err(Error::Spec(format!(
                    "{what} position ({}, {}) out of range for r = {}",
                    pos.0 + 1,
                    pos.1 + 1,
                    self.r
                )));
            }
            if !seen.insert(pos) {
                return Err(Error::Spec(format!(
                    "position ({}, {}) appears in more than one constraint",
                    pos.0 + 1,
                    pos.1 + 1
                )));
            }
            Ok(())
        };
        for f in &self.fixed {
            claim((f.row, f.col), "fixed")?;
            if !f.value.is_finite() {
                return Err(Error::Spec(format!(
                    "fixed value at ({}, {}) is not finite",
                    f.row + 1,
                    f.col + 1
                )));
            }
            if f.row == f.col && f.value < self.eigen_floor {
                return Err(Error::Spec(format!(
                    "fixed diagonal ({}, {}) = {} is below the eigenvalue floor {}",
                    f.row + 1,
                    f.col + 1,
                    f.value,
                    self.eigen_floor
                )));
            }
        }
        for &z in &self.zeros {
            if z.0 == z.1 {
                return Err(Error::Spec(format!(
                    "zero constraint on diagonal ({}, {}) is not allowed",
                    z.0 + 1,
                    z.1 + 1
                )));
            }
            claim(z, "zero")?;
        }
        for g in &self.ties {
            if g.len() < 2 {
                return Err(Error::Spec("a tie group needs at least two positions".into()));
            }
            for &pos in g {
                claim(pos, "tie")?;
            }
        }
        Ok(())
    }

    /// Frobenius projection onto the affine set of element constraints.
    pub fn project_affine(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shape(s)?;
        let mut out = s.clone();
        for f in &self.fixed {
            out[(f.row, f.col)] = f.value;
            out[(f.col, f.row)] = f.value;
        }
        for &(j, k) in &self.zeros {
            out[(j, k)] = 0.0;
            out[(k, j)] = 0.0;
        }
        for g in &self.ties {
            let mean = g.iter().map(|&(j, k)| s[(j, k)]).sum::<f64>() / g.len() as f64;
            for &(j, k) in g {
                out[(j, k)] = mean;
                out[(k, j)] = mean;
            }
        }
        Ok(out)
    }

    /// Frobenius projection onto the feasible set by Dykstra's algorithm.
    ///
    /// The iteration ends on the affine projection, so element constraints hold
    /// exactly while the eigenvalue floor holds to within the tolerance.
    pub fn project(&self, s: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<Projection> {
        self.check_shape(s)?;
        let s = symmetrized(s)?;
        if !self.has_affine_constraints() {
            let matrix = project_eigenfloor(&s, self.eigen_floor)?;
            return Ok(Projection {
                matrix,
                iterations: 1,
                converged: true,
                eigen_gap: 0.0,
            });
        }

        let r = self.r;
        let mut x = s;
        let mut p = DMatrix::<f64>::zeros(r, r);
        let mut q = DMatrix::<f64>::zeros(r, r);
        let mut converged = false;
        let mut iterations = 0;
        while iterations < max_iter {
            iterations += 1;
            let shifted = &x + &p;
            let y = project_eigenfloor(&shifted, self.eigen_floor)?;
            p = shifted - &y;
            let shifted = &y + &q;
            let next = self.project_affine(&shifted)?;
            q = shifted - &next;
            let step = (&next - &x).norm();
            x = next;
            if step < tol {
                converged = true;
                break;
            }
        }
        let x = self.restore_floor(x)?;
        let eigen_gap = (self.eigen_floor - min_eigenvalue(&x)?).max(0.0);
        Ok(Projection {
            matrix: x,
            iterations,
            converged,
            eigen_gap,
        })
    }

    /// Projection onto the feasible set in the metric
    /// `<A, B>_W = tr(W A W B)` for a symmetric positive definite `W`.
    ///
    /// In the coordinates `Psi = W^{1/2} X W^{1/2}` the metric is Frobenius,
    /// the floor becomes `Psi >= eigen_floor W` and the element constraints
    /// stay affine, so Dykstra's algorithm applies unchanged. Constrained
    /// entries of the result are set exactly; `W = I` gives [`project`](Self::project).
    pub fn project_weighted(
        &self,
        s: &DMatrix<f64>,
        w: &DMatrix<f64>,
        tol: f64,
        max_iter: usize,
    ) -> Result<Projection> {
        self.check_shape(s)?;
        self.check_shape(w)?;
        let s = symmetrized(s)?;
        let eig = SymmetricEigen::try_new(symmetrized(w)?, f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Numeric("metric eigendecomposition failed".into()))?;
        if !(eig.eigenvalues.min() > 0.0) {
            return Err(Error::Numeric(
                "projection metric is not positive definite".into(),
            ));
        }
        let v = &eig.eigenvectors;
        let half = v * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * v.transpose();
        let inv_half = v * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * v.transpose();
        let w_inv = &inv_half * &inv_half;
        let floor = symmetrized_loose(&(w * self.eigen_floor));
        let cone = |psi: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            Ok(&floor + project_eigenfloor(&symmetrized_loose(&(psi - &floor)), 0.0)?)
        };
        let to_x = |psi: &DMatrix<f64>| symmetrized_loose(&(&inv_half * psi * &inv_half));
        let psi0 = symmetrized_loose(&(&half * &s * &half));

        let (psi, iterations, converged) = if !self.has_affine_constraints() {
            (cone(&psi0)?, 1, true)
        } else {
            let affine = WeightedAffine::new(self, &w_inv, &inv_half)?;
            let mut x = psi0;
            let mut p = DMatrix::<f64>::zeros(self.r, self.r);
            let mut q = DMatrix::<f64>::zeros(self.r, self.r);
            let mut converged = false;
            let mut iterations = 0;
            while iterations < max_iter {
                iterations += 1;
                let shifted = &x + &p;
                let y = cone(&shifted)?;
                p = shifted - &y;
                let shifted = &y + &q;
                let next = affine.project(&shifted, &to_x(&shifted));
                q = shifted - &next;
                let step = (&next - &x).norm();
                x = next;
                if step < tol {
                    converged = true;
                    break;
                }
            }
            (x, iterations, converged)
        };
        let matrix = self.restore_floor(self.project_affine(&to_x(&psi))?)?;
        let eigen_gap = (self.eigen_floor - min_eigenvalue(&matrix)?).max(0.0);
        Ok(Projection {
            matrix,
            iterations,
            converged,
            eigen_gap,
        })
    }

    /// Pulls an element-feasible `x` that dips below the eigenvalue floor
    /// (Dykstra can stall near faces of the cone) onto the segment towards a
    /// strictly feasible point, as little as needed. Returns `x` unchanged
    /// when it is feasible or no interior point is found.
    fn restore_floor(&self, x: DMatrix<f64>) -> Result<DMatrix<f64>> {
        if min_eigenvalue(&x)? >= self.eigen_floor {
            return Ok(x);
        }
        let Some(inner) = self.interior_point()? else {
            return Ok(x);
        };
        let blend = |t: f64| symmetrized_loose(&(&x * (1.0 - t) + &inner * t));
        // lambda_min is concave along the segment, so feasibility is an interval ending at 1
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if min_eigenvalue(&blend(mid))? >= self.eigen_floor {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        self.project_affine(&blend(hi))
    }

    /// A point meeting the element constraints with every eigenvalue above
    /// the floor: fixed diagonals kept, free diagonals raised until it works.
    fn interior_point(&self) -> Result<Option<DMatrix<f64>>> {
        let base = self
            .fixed
            .iter()
            .map(|f| f.value.abs())
            .fold(self.eigen_floor.max(1.0), f64::max);
        for scale in [1.0, 10.0, 100.0, 1e3, 1e4] {
            let mut d = DMatrix::from_diagonal_element(self.r, self.r, base * scale);
            for f in self.fixed.iter().filter(|f| f.row == f.col) {
                d[(f.row, f.row)] = f.value;
            }
            let m = self.project_affine(&d)?;
            if min_eigenvalue(&m)? > self.eigen_floor {
                return Ok(Some(m));
            }
        }
        Ok(None)
    }

    /// [`project`](Self::project) with the default tolerance and iteration cap.
    pub fn project_default(&self, s: &DMatrix<f64>) -> Result<Projection> {
        self.project(s, DEFAULT_TOL, DEFAULT_MAX_ITER)
    }

    /// Largest violation of the element constraints.
    pub fn affine_violation(&self, m: &DMatrix<f64>) -> f64 {
        let mut worst = 0.0f64;
        for f in &self.fixed {
            worst = worst
                .max((m[(f.row, f.col)] - f.value).abs())
                .max((m[(f.col, f.row)] - f.value).abs());
        }
        for &(j, k) in &self.zeros {
            worst = worst.max(m[(j, k)].abs()).max(m[(k, j)].abs());
        }
        for g in &self.ties {
            let first = m[g[0]];
            for &(j, k) in g {
                worst = worst
                    .max((m[(j, k)] - first).abs())
                    .max((m[(k, j)] - first).abs());
            }
        }
        worst
    }

    /// Whether `m` satisfies the element constraints to `affine_tol` and the
    /// eigenvalue floor to `eigen_tol`.
    pub fn is_feasible(&self, m: &DMatrix<f64>, affine_tol: f64, eigen_tol: f64) -> bool {
        if m.nrows() != self.r || m.ncols() != self.r {
            return false;
        }
        self.affine_violation(m) <= affine_tol
            && min_eigenvalue(m).is_ok_and(|l| l >= self.eigen_floor - eigen_tol)
    }

    fn check_shape(&self, s: &DMatrix<f64>) -> Result<()> {
        if s.nrows() != self.r || s.ncols() != self.r {
            return Err(Error::Dimension(format!(
                "expected a {r}x{r} matrix, got {}x{}",
                s.nrows(),
                s.ncols(),
                r = self.r
            )));
        }
        Ok(())
    }
}

fn symmetrized_loose(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Terms `(j, k, coef)` of a functional, `(j, k)` reading `X_jk`, and its value.
type Functional = (Vec<(usize, usize, f64)>, f64);

/// The element constraints as linear functionals `<K_l, X> = c_l`, with the
/// orthogonal projection onto their solution set in the coordinates
/// `Psi = W^{1/2} X W^{1/2}`.
struct WeightedAffine<'a> {
    functionals: Vec<Functional>,
    gram: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    inv_half: &'a DMatrix<f64>,
}

impl<'a> WeightedAffine<'a> {
    fn new(spec: &ConstraintSpec, w_inv: &DMatrix<f64>, inv_half: &'a DMatrix<f64>) -> Result<Self> {
        let mut functionals = Vec::new();
        for f in &spec.fixed {
            functionals.push((vec![(f.row, f.col, 1.0)], f.value));
        }
        for &(j, k) in &spec.zeros {
            functionals.push((vec![(j, k, 1.0)], 0.0));
        }
        for g in &spec.ties {
            for &(j, k) in &g[1..] {
                functionals.push((vec![(j, k, 1.0), (g[0].0, g[0].1, -1.0)], 0.0));
            }
        }
        // <R E_jk R, R E_ab R> = (P_ka P_bj + P_kb P_aj) / 2 with P = W^{-1}
        let unit = |(j, k): (usize, usize), (a, b): (usize, usize)| {
            0.5 * (w_inv[(k, a)] * w_inv[(b, j)] + w_inv[(k, b)] * w_inv[(a, j)])
        };
        let m = functionals.len();
        let gram = DMatrix::from_fn(m, m, |l, t| {
            let mut g = 0.0;
            for &(j, k, c1) in &functionals[l].0 {
                for &(a, b, c2) in &functionals[t].0 {
                    g += c1 * c2 * unit((j, k), (a, b));
                }
            }
            g
        });
        let gram = gram
            .cholesky()
            .ok_or_else(|| Error::Numeric("element constraints are linearly dependent".into()))?;
        Ok(WeightedAffine {
            functionals,
            gram,
            inv_half,
        })
    }

    /// `x` is `psi` mapped back to the original coordinates.
    fn project(&self, psi: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
        let resid = DVector::from_iterator(
            self.functionals.len(),
            self.functionals
                .iter()
                .map(|(terms, c)| terms.iter().map(|&(j, k, a)| a * x[(j, k)]).sum::<f64>() - c),
        );
        let lambda = self.gram.solve(&resid);
        let r = psi.nrows();
        let mut k = DMatrix::<f64>::zeros(r, r);
        for ((terms, _), l) in self.functionals.iter().zip(lambda.iter()) {
            for &(j, kk, a) in terms {
                k[(j, kk)] += 0.5 * a * l;
                k[(kk, j)] += 0.5 * a * l;
            }
        }
        symmetrized_loose(&(psi - self.inv_half * k * self.inv_half))
    }
}

/// Result of projecting onto the feasible set.
#[derive(Debug, Clone)]
pub struct Projection {
    pub matrix: DMatrix<f64>,
    pub iterations: usize,
    /// False when the iteration cap was hit before the tolerance was met.
    pub converged: bool,
    /// `max(0, eigen_floor - min eigenvalue)` of the returned matrix.
    pub eigen_gap: f64,
}

/// Returns `(S + S^T) / 2`, rejecting matrices that are visibly asymmetric.
pub fn symmetrized(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.nrows() != s.ncols() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let scale = s.amax().max(1.0);
    let n = s.nrows();
    let mut out = s.clone();
    for j in 0..n {
        for k in (j + 1)..n {
            let (a, b) = (s[(j, k)], s[(k, j)]);
            if (a - b).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Domain(format!(
                    "matrix is not symmetric at ({}, {}): {a} vs {b}",
                    j + 1,
                    k + 1
                )));
            }
            let m = 0.5 * (a + b);
            out[(j, k)] = m;
            out[(k, j)] = m;
        }
    }
    Ok(out)
}

fn eigen(s: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(s.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))
}

pub fn min_eigenvalue(s: &DMatrix<f64>) -> Result<f64> {
    let s = symmetrized(s)?;
    Ok(eigen(&s)?.eigenvalues.min())
}

/// Frobenius projection onto `{S symmetric : eigenvalues >= eigen_floor}`.
pub fn project_eigenfloor(s: &DMatrix<f64>, eigen_floor: f64) -> Result<DMatrix<f64>> {
    let s = symmetrized(s)?;
    let decomposition = eigen(&s)?;
    if decomposition.eigenvalues.iter().all(|&l| l >= eigen_floor) {
        return Ok(s);
    }
    let clamped = decomposition.eigenvalues.map(|l| l.max(eigen_floor));
    let q = &decomposition.eigenvectors;
    let scaled = q * DMatrix::from_diagonal(&clamped);
    let out = scaled * q.transpose();
    // exact symmetry; the product is symmetric only up to rounding
    Ok((&out + out.transpose()) * 0.5)
}

/// JSON form of a [`ConstraintSpec`] with 1-based indices.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpecJson {
    #[serde(default)]
    pub fixed: Vec<(usize, usize, f64)>,
    #[serde(default)]
    pub zeros: Vec<(usize, usize)>,
    #[serde(default)]
    pub ties: Vec<Vec<(usize, usize)>>,
    #[serde(default)]
    pub eigen_floor: f64,
}

fn zero_based(j: usize, k: usize) -> Result<Position> {
    if j == 0 || k == 0 {
        return Err(Error::Spec(format!(
            "constraint indices are 1-based, got ({j}, {k})"
        )));
    }
    Ok((j - 1, k - 1))
}

impl ConstraintSpecJson {
    pub fn into_spec(self, r: usize) -> Result<ConstraintSpec> {
        let fixed = self
            .fixed
            .into_iter()
            .map(|(j, k, value)| {
                let (row, col) = zero_based(j, k)?;
                Ok(FixedEntry { row, col, value })
            })
            .collect::<Result<Vec<_>>>()?;
        let zeros = self
            .zeros
            .into_iter()
            .map(|(j, k)| {
                if j == k {
                    return Err(Error::Spec(format!("a variance cannot be zero, got ({j}, {k})")));
                }
                zero_based(j, k)
            })
            .collect::<Result<Vec<_>>>()?;
        let ties = self
            .ties
            .into_iter()
            .map(|g| g.into_iter().map(|(j, k)| zero_based(j, k)).collect())
            .collect::<Result<Vec<_>>>()?;
        ConstraintSpec::new(r, fixed, zeros, ties, self.eigen_floor)
    }
}

impl From<&ConstraintSpec> for ConstraintSpecJson {
    fn from(spec: &ConstraintSpec) -> Self {
        ConstraintSpecJson {
            fixed: spec
                .fixed
                .iter()
                .map(|f| (f.row + 1, f.col + 1, f.value))
                .collect(),
            zeros: spec.zeros.iter().map(|&(j, k)| (j + 1, k + 1)).collect(),
            ties: spec
                .ties
                .iter()
                .map(|g| g.iter().map(|&(j, k)| (j + 1, k + 1)).collect())
                .collect(),
            eigen_floor: spec.eigen_floor,
        }
    }
}
