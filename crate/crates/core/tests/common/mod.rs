//! Independent reference implementations used as test oracles. Nothing here
//! calls into the solver paths it is compared against.
#![allow(dead_code)]

use mixedreg::data::{Dataset, ModelSpec};
use mixedreg::families::Family;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_spd(r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(r, r, |_, _| normal(rng));
    (&a * a.transpose()) / r as f64 + DMatrix::identity(r, r) * 0.2
}

/// Gaussian, Poisson, Bernoulli, Gaussian, ... with varied dispersions.
pub fn mixed_families(r: usize) -> Vec<Family> {
    (0..r)
        .map(|j| match j % 4 {
            0 => Family::gaussian(0.5).unwrap(),
            1 => Family::quasi_poisson(0.8).unwrap(),
            2 => Family::bernoulli(),
            _ => Family::gaussian(0.2).unwrap(),
        })
        .collect()
}

pub struct Instance {
    pub spec: ModelSpec,
    pub data: Dataset,
    pub w: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Per-response designs with `p` columns each (first column an intercept),
/// responses drawn from the model at the returned `beta`, `sigma`, and
/// expansion points scattered around the linear predictor.
pub fn random_instance(seed: u64, families: Vec<Family>, n: usize, p: usize) -> Instance {
    let mut g = rng(seed);
    let r = families.len();
    let q = r * p;
    let spec = ModelSpec::new(families, q).unwrap();
    let sigma = random_spd(r, &mut g);
    let chol = sigma.clone().cholesky().unwrap().l();
    let beta = DVector::from_fn(q, |k, _| if k % p == 0 { 0.5 } else { 0.4 * normal(&mut g) });
    let mut y = DMatrix::zeros(n, r);
    let mut w = DMatrix::zeros(n, r);
    let mut xs = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = DMatrix::zeros(r, q);
        for j in 0..r {
            x[(j, j * p)] = 1.0;
            for k in 1..p {
                x[(j, j * p + k)] = g.random_range(-1.0..1.0);
            }
        }
        let eta = &x * &beta;
        let z = DVector::from_fn(r, |_, _| normal(&mut g));
        let latent = &eta + &chol * z;
        for j in 0..r {
            y[(i, j)] = spec.family(j).sample(latent[j], &mut g).unwrap();
            w[(i, j)] = eta[j] + 0.5 * normal(&mut g);
        }
        xs.push(x);
    }
    Instance {
        data: Dataset::new(y, xs).unwrap(),
        spec,
        w,
        beta,
        sigma,
    }
}

/// `h_n` written out with explicit inverses and determinants.
pub fn naive_h_n(
    data: &Dataset,
    spec: &ModelSpec,
    w: &DMatrix<f64>,
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> f64 {
    let mut total = 0.0;
    for i in 0..data.n() {
        let (c, resid) = naive_working(data, spec, w, beta, sigma, i);
        total += c.determinant().ln() + (resid.transpose() * c.try_inverse().unwrap() * &resid)[(0, 0)];
    }
    total
}

/// Working covariance and residual of observation `i`.
pub fn naive_working(
    data: &Dataset,
    spec: &ModelSpec,
    w: &DMatrix<f64>,
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    i: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let r = spec.r();
    let eta = data.x(i) * beta;
    let mut d = DMatrix::zeros(r, r);
    let mut m = DVector::zeros(r);
    let mut psi_d = DMatrix::zeros(r, r);
    for j in 0..r {
        let f = spec.family(j);
        let wj = w[(i, j)];
        d[(j, j)] = f.varweight(wj);
        psi_d[(j, j)] = f.psi * f.varweight(wj);
        m[j] = f.mean(wj) + f.varweight(wj) * (eta[j] - wj);
    }
    let c = psi_d + &d * sigma * &d;
    (c, data.y_row(i) - m)
}

/// Gradient of `h_n` in `beta` with explicit inverses.
pub fn naive_beta_gradient(
    data: &Dataset,
    spec: &ModelSpec,
    w: &DMatrix<f64>,
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> DVector<f64> {
    let r = spec.r();
    let mut g = DVector::zeros(beta.len());
    for i in 0..data.n() {
        let (c, resid) = naive_working(data, spec, w, beta, sigma, i);
        let d = DMatrix::from_fn(r, r, |j, k| {
            if j == k {
                spec.family(j).varweight(w[(i, j)])
            } else {
                0.0
            }
        });
        let xt = &d * data.x(i);
        g -= xt.transpose() * c.try_inverse().unwrap() * resid * 2.0;
    }
    g
}

/// Exact Gaussian log-likelihood without the `2 pi` constant, for total
/// covariance `v`.
pub fn gaussian_loglik(data: &Dataset, beta: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    let vinv = v.clone().try_inverse().unwrap();
    let logdet = v.determinant().ln();
    let mut ll = 0.0;
    for i in 0..data.n() {
        let resid = data.y_row(i) - data.x(i) * beta;
        ll -= 0.5 * (logdet + (resid.transpose() * &vinv * &resid)[(0, 0)]);
    }
    ll
}

/// Multivariate-normal MLE with unrestricted total covariance by iterated
/// feasible GLS: `beta = GLS(V)`, `V = mean r r^T`, until both settle.
/// Coefficients listed in `zero` are held at 0.
pub fn gaussian_mle(data: &Dataset, zero: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, r, q) = (data.n(), data.r(), data.q());
    let free: Vec<usize> = (0..q).filter(|k| !zero.contains(k)).collect();
    let mut v = DMatrix::<f64>::identity(r, r);
    let mut beta = DVector::zeros(q);
    for _ in 0..10_000 {
        let vinv = v.clone().try_inverse().unwrap();
        let mut a = DMatrix::zeros(free.len(), free.len());
        let mut b = DVector::zeros(free.len());
        for i in 0..n {
            let x = data.x(i).select_columns(&free);
            a += x.transpose() * &vinv * &x;
            b += x.transpose() * &vinv * data.y_row(i);
        }
        let sol = a.try_inverse().unwrap() * b;
        let mut next_beta = DVector::zeros(q);
        for (k, &c) in free.iter().enumerate() {
            next_beta[c] = sol[k];
        }
        let mut next_v = DMatrix::zeros(r, r);
        for i in 0..n {
            let resid = data.y_row(i) - data.x(i) * &next_beta;
            next_v += &resid * resid.transpose();
        }
        next_v /= n as f64;
        let change = (&next_beta - &beta).amax().max((&next_v - &v).amax());
        beta = next_beta;
        v = next_v;
        if change < 1e-14 {
            break;
        }
    }
    (beta, v)
}

/// All-Gaussian data with shared predictors (intercept plus `p - 1` slopes).
pub fn gaussian_data(
    seed: u64,
    psi: &[f64],
    sigma: &DMatrix<f64>,
    n: usize,
    p: usize,
) -> (ModelSpec, Dataset) {
    let mut g = rng(seed);
    let r = psi.len();
    let families = psi.iter().map(|&s| Family::gaussian(s).unwrap()).collect();
    let spec = ModelSpec::new(families, r * p).unwrap();
    let preds = DMatrix::from_fn(n, p, |_, k| if k == 0 { 1.0 } else { g.random_range(-1.0..1.0) });
    let beta = DVector::from_fn(r * p, |k, _| if k % p == 0 { 1.0 } else { 0.5 * normal(&mut g) });
    let total = sigma + DMatrix::from_diagonal(&DVector::from_column_slice(psi));
    let chol = total.cholesky().unwrap().l();
    let mut y = DMatrix::zeros(n, r);
    for i in 0..n {
        let z = DVector::from_fn(r, |_, _| normal(&mut g));
        let e = &chol * z;
        for j in 0..r {
            let eta: f64 = (0..p).map(|k| preds[(i, k)] * beta[j * p + k]).sum();
            y[(i, j)] = eta + e[j];
        }
    }
    (spec, Dataset::from_shared_predictors(y, &preds).unwrap())
}
