//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use mixedreg::constraints::{min_eigenvalue, ConstraintSpec, DEFAULT_MAX_ITER, DEFAULT_TOL};
use mixedreg::data::{Dataset, ModelSpec};
use mixedreg::families::{logistic, Family};
use mixedreg::fitter::{fit, FitControls};
use mixedreg::inference::{lrt, Hypothesis};
use mixedreg::latent::{update_w, LatentControls};
use mixedreg::moments::{limiting_bernoulli_gaussian_correlation, marginal_cov, marginal_mean};
use mixedreg::simgen::{
    fitting_constraints, gen_dataset, run_lrt_experiment, run_prediction_experiment, LrtKind, Method,
    SimDesign, Structure,
};
use mixedreg::worklik::{grad_sigma, h_n, BetaRestrictions};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let psi = [0.3, 0.2, 0.5, 0.1];
    let truth = dmatrix![
        1.0, 0.5, 0.2, -0.3;
        0.5, 0.8, 0.1, 0.0;
        0.2, 0.1, 0.6, 0.25;
        -0.3, 0.0, 0.25, 0.9
    ];
    let (spec, data) = gaussian_data(2024, &psi, &truth, 300, 2);
    let psi_diag = DMatrix::from_diagonal(&DVector::from_column_slice(&psi));
    let (beta_o, v_o) = gaussian_mle(&data, &[]);
    let sigma_o = &v_o - &psi_diag;
    if min_eigenvalue(&sigma_o).unwrap() <= 0.0 {
        return Err("oracle MLE is on the boundary; pick another instance".into());
    }
    let cspec = ConstraintSpec::unconstrained(4);
    let ctl = FitControls::default();
    let f = fit(&data, &spec, &cspec, &ctl).map_err(|e| e.to_string())?;
    let db = (&f.beta_hat - &beta_o).amax();
    let ds = (&f.sigma_hat - &sigma_o).amax();

    // coefficient restriction with Sigma free: the exact null MLE is FGLS on
    // the remaining columns
    let (beta_r, v_r) = gaussian_mle(&data, &[1]);
    let exact_beta = 2.0 * (gaussian_loglik(&data, &beta_o, &v_o) - gaussian_loglik(&data, &beta_r, &v_r));
    let hyp = Hypothesis::new(
        cspec.clone(),
        BetaRestrictions::new(vec![(1, 0.0)]).unwrap(),
        cspec.clone(),
    )
    .unwrap();
    let t_beta = lrt(&data, &spec, &hyp, &ctl).map_err(|e| e.to_string())?.t_n;

    // diagonal Sigma: responses decouple, so the exact null MLE is
    // equation-by-equation least squares
    let (n, p) = (data.n(), 2);
    let mut beta_d = DVector::zeros(8);
    let mut v_d = DMatrix::zeros(4, 4);
    for j in 0..4 {
        let x = DMatrix::from_fn(n, p, |i, k| data.x(i)[(j, j * p + k)]);
        let y = data.y().column(j).into_owned();
        let b = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
        let resid = &y - &x * &b;
        v_d[(j, j)] = resid.norm_squared() / n as f64;
        if v_d[(j, j)] <= psi[j] {
            return Err("diagonal null MLE is on the boundary".into());
        }
        beta_d.rows_mut(j * p, p).copy_from(&b);
    }
    let exact_diag = 2.0 * (gaussian_loglik(&data, &beta_o, &v_o) - gaussian_loglik(&data, &beta_d, &v_d));
    let t_diag = lrt(&data, &spec, &Hypothesis::diagonal_sigma(&cspec).unwrap(), &ctl)
        .map_err(|e| e.to_string())?
        .t_n;

    let elapsed = start.elapsed();
    let dt = (t_beta - exact_beta).abs().max((t_diag - exact_diag).abs());
    check(
        db < 1e-5 && ds < 1e-4 && dt < 1e-5 && within(elapsed, 10.0),
        format!(
            "|dbeta|inf={db:.2e} (<1e-5), |dSigma|inf={ds:.2e} (<1e-4), |T-2logLR|={dt:.2e} (<1e-5) \
             [T_beta={t_beta:.6}, T_diag={t_diag:.6}], {elapsed:.1?} (<10s)"
        ),
    )
}

fn criterion_2() -> Outcome {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let inst = random_instance(1000 + seed, mixed_families(4), 20, 2);
        let g = grad_sigma(&inst.beta, &inst.sigma, &inst.data, &inst.w, &inst.spec).unwrap();
        let eval = |s: &DMatrix<f64>| h_n(&inst.beta, s, &inst.data, &inst.w, &inst.spec).unwrap();
        for j in 0..4 {
            for k in 0..=j {
                let mut e = DMatrix::zeros(4, 4);
                e[(j, k)] += 1.0;
                e[(k, j)] += 1.0;
                if j == k {
                    e /= 2.0;
                }
                let fd = (eval(&(&inst.sigma + &e * h)) - eval(&(&inst.sigma - &e * h))) / (2.0 * h);
                let analytic = if j == k { g[(j, k)] } else { 2.0 * g[(j, k)] };
                worst = worst.max((fd - analytic).abs() / analytic.abs());
            }
        }
    }
    check(
        worst < 1e-5,
        format!("max entrywise rel. err {worst:.2e} over 20 instances (<1e-5)"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let s = dmatrix![1.0, 2.0; 2.0, 1.0];
    let mut notes = Vec::new();
    let mut ok = true;

    let unit = ConstraintSpec::unconstrained(2)
        .with_fixed(0, 0, 1.0)
        .unwrap()
        .with_fixed(1, 1, 1.0)
        .unwrap();
    // 1-D oracle: minimize 2 (b - 2)^2 over b in [-1, 1]
    let b_star = 2.0f64.clamp(-1.0, 1.0);
    let oracle_a = dmatrix![1.0, b_star; b_star, 1.0];

    let one = ConstraintSpec::unconstrained(2).with_fixed(0, 0, 1.0).unwrap();
    // grid oracle: minimize 2 (b - 2)^2 + (c - 1)^2 over c >= b^2, step 1e-3
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for ib in 0..=6000 {
        let b = -3.0 + ib as f64 * 1e-3;
        for ic in 0..=6000 {
            let c = -3.0 + ic as f64 * 1e-3;
            if c >= b * b {
                let v = 2.0 * (b - 2.0).powi(2) + (c - 1.0).powi(2);
                if v < best.0 {
                    best = (v, b, c);
                }
            }
        }
    }
    // the grid point is only accurate to the grid's feasibility rounding; when
    // it sits on the boundary the KKT conditions reduce the problem to
    // minimizing 2 (b - 2)^2 + (b^2 - 1)^2 along c = b^2, searched densely
    let on_boundary = best.2 - best.1 * best.1 < 1e-2;
    let oracle_b = if on_boundary {
        let phi = |b: f64| 2.0 * (b - 2.0).powi(2) + (b * b - 1.0).powi(2);
        let b = (0..=6_000_000)
            .map(|i| -3.0 + i as f64 * 1e-6)
            .min_by(|x, y| phi(*x).total_cmp(&phi(*y)))
            .unwrap();
        dmatrix![1.0, b; b, b * b]
    } else {
        dmatrix![1.0, best.1; best.1, best.2]
    };

    for (name, spec, oracle, fixed) in [
        ("unit diagonal", &unit, &oracle_a, vec![(0, 0, 1.0), (1, 1, 1.0)]),
        ("one fixed variance", &one, &oracle_b, vec![(0, 0, 1.0)]),
    ] {
        let p = spec.project(&s, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let again = spec.project(&p.matrix, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let exact = fixed.iter().all(|&(j, k, v)| p.matrix[(j, k)] == v);
        let eig = min_eigenvalue(&p.matrix).unwrap();
        let idem = (&again.matrix - &p.matrix).norm();
        let dist = (&p.matrix - oracle).norm();
        let case_ok = exact && eig >= spec.eigen_floor() - 1e-8 && idem <= 10.0 * DEFAULT_TOL && dist < 5e-3;
        ok &= case_ok;
        notes.push(format!(
            "{name}: exact={exact} mineig={eig:.1e} idem={idem:.1e} oracle dist={dist:.1e}"
        ));
    }
    let elapsed = start.elapsed();
    ok &= within(elapsed, 5.0);
    check(ok, format!("{}; {elapsed:.1?} (<5s)", notes.join("; ")))
}

fn criterion_4() -> Outcome {
    let ctl = LatentControls::default();
    let mut worst_grad: f64 = 0.0;
    let mut g = rng(77);
    for seed in 0..100 {
        let r = g.random_range(2..=6);
        let inst = random_instance(5000 + seed, mixed_families(r), 1, 2);
        let y = inst.data.y_row(0);
        let sol = update_w(&y, inst.data.x(0), &inst.beta, &inst.sigma, &inst.spec, &ctl)
            .map_err(|e| e.to_string())?;
        let eta = inst.data.x(0) * &inst.beta;
        let precision = (&inst.sigma + DMatrix::identity(r, r) * ctl.kappa)
            .try_inverse()
            .unwrap();
        // stationarity of -sum kernel + delta' P delta / 2 + tau |delta|^2, written out
        let delta = &sol.w - &eta;
        let mut grad = &precision * &delta + &delta * (2.0 * ctl.tau);
        for j in 0..r {
            let f = inst.spec.family(j);
            grad[j] -= (y[j] - f.mean(sol.w[j])) / f.psi;
        }
        worst_grad = worst_grad.max(grad.norm());
    }

    // all-Gaussian, tau = 0
    let ctl0 = LatentControls { tau: 0.0, ..ctl };
    let spec = ModelSpec::new(
        vec![
            Family::gaussian(0.3).unwrap(),
            Family::gaussian(0.7).unwrap(),
            Family::gaussian(0.1).unwrap(),
        ],
        3,
    )
    .unwrap();
    let sigma = dmatrix![1.0, 0.4, -0.2; 0.4, 0.9, 0.3; -0.2, 0.3, 0.5];
    let y = dvector![1.5, -0.7, 0.2];
    let eta = dvector![0.3, 0.1, -0.4];
    let sol = update_w(&y, &DMatrix::identity(3, 3), &eta, &sigma, &spec, &ctl0).unwrap();
    let p = (&sigma + DMatrix::identity(3, 3) * ctl0.kappa)
        .try_inverse()
        .unwrap();
    let dpsi = DMatrix::from_diagonal(&dvector![1.0 / 0.3, 1.0 / 0.7, 1.0 / 0.1]);
    let closed = (&dpsi + &p).try_inverse().unwrap() * (&dpsi * &y + &p * &eta);
    let gauss_err = (&sol.w - closed).amax();

    // Bernoulli, regularized variance 1, y = 1, X beta = 0: w + logistic(w) = 1
    let spec = ModelSpec::new(vec![Family::bernoulli()], 1).unwrap();
    let sol = update_w(
        &dvector![1.0],
        &dmatrix![1.0],
        &dvector![0.0],
        &dmatrix![1.0 - ctl0.kappa],
        &spec,
        &ctl0,
    )
    .unwrap();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid + logistic(mid) - 1.0 > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let bern_err = (sol.w[0] - root).abs();
    check(
        worst_grad < 1e-8 && gauss_err < 1e-8 && bern_err < 1e-6 && (root - 0.4013).abs() < 1e-3,
        format!(
            "max grad norm {worst_grad:.1e} over 100 instances (<1e-8); Gaussian closed form err {gauss_err:.1e} (<1e-8); \
             Bernoulli w={:.8} vs bisection {root:.8}, err {bern_err:.1e} (<1e-6)",
            sol.w[0]
        ),
    )
}

/// Sample means and covariances of `y` drawn from the model, with their
/// Monte-Carlo standard errors.
fn monte_carlo(
    spec: &ModelSpec,
    eta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let r = spec.r();
    let chol = sigma.clone().cholesky().unwrap().l();
    let mut g = rng(seed);
    let mut ys = Vec::with_capacity(draws);
    for _ in 0..draws {
        let z = DVector::from_fn(r, |_, _| normal(&mut g));
        let w = eta + &chol * z;
        ys.push(DVector::from_fn(r, |j, _| {
            spec.family(j).sample(w[j], &mut g).unwrap()
        }));
    }
    let nf = draws as f64;
    let mean = ys.iter().fold(DVector::zeros(r), |a, y| a + y) / nf;
    let mut cov = DMatrix::zeros(r, r);
    let mut sq = DMatrix::zeros(r, r);
    for y in &ys {
        let d = y - &mean;
        let outer = &d * d.transpose();
        sq += outer.component_mul(&outer);
        cov += outer;
    }
    cov /= nf;
    let cov_se = (sq / nf - cov.component_mul(&cov)).map(|v| (v.max(0.0) / nf).sqrt());
    let mean_se = DVector::from_fn(r, |j, _| (cov[(j, j)] / nf).sqrt());
    (mean, cov, mean_se, cov_se)
}

fn criterion_5() -> Outcome {
    let draws = 1_000_000;
    let mut ok = true;
    let mut worst_z: f64 = 0.0;

    let spec = ModelSpec::new(
        vec![
            Family::gaussian(0.3).unwrap(),
            Family::bernoulli(),
            Family::poisson(),
        ],
        3,
    )
    .unwrap();
    let eta = dvector![0.5, -0.3, 0.8];
    let sigma = dmatrix![0.6, 0.3, 0.2; 0.3, 1.0, -0.25; 0.2, -0.25, 0.4];
    let x = DMatrix::identity(3, 3);
    let m = marginal_mean(&eta, &sigma, &x, &spec).unwrap();
    let c = marginal_cov(&eta, &sigma, &x, &spec).unwrap();
    let (mm, mc, mse, cse) = monte_carlo(&spec, &eta, &sigma, draws, 11);
    for j in 0..3 {
        worst_z = worst_z.max((m[j] - mm[j]).abs() / mse[j]);
        for k in 0..3 {
            worst_z = worst_z.max((c[(j, k)] - mc[(j, k)]).abs() / cse[(j, k)]);
        }
    }
    ok &= worst_z < 3.0;

    // two Gaussian and two Poisson responses with the closed forms
    let spec2 = ModelSpec::new(
        vec![
            Family::gaussian(0.01).unwrap(),
            Family::gaussian(0.2).unwrap(),
            Family::poisson(),
            Family::poisson(),
        ],
        4,
    )
    .unwrap();
    let eta2 = dvector![1.0, -0.5, 0.7, 0.2];
    let sigma2 = dmatrix![
        0.5, 0.1, 0.2, 0.0;
        0.1, 0.4, 0.0, 0.1;
        0.2, 0.0, 0.3, 0.15;
        0.0, 0.1, 0.15, 0.25
    ];
    let x4 = DMatrix::identity(4, 4);
    let c2 = marginal_cov(&eta2, &sigma2, &x4, &spec2).unwrap();
    let var1 = 0.01 + 0.5;
    let cov13 = sigma2[(2, 0)] * (eta2[2] + sigma2[(2, 2)] / 2.0).exp();
    let cov34 =
        (eta2[2] + eta2[3] + (sigma2[(2, 2)] + sigma2[(3, 3)]) / 2.0).exp() * (sigma2[(3, 2)].exp() - 1.0);
    let closed_err = ((c2[(0, 0)] - var1).abs() / var1)
        .max((c2[(0, 2)] - cov13).abs() / cov13)
        .max((c2[(2, 3)] - cov34).abs() / cov34);
    ok &= closed_err < 1e-12;
    let (_, mc2, _, cse2) = monte_carlo(&spec2, &eta2, &sigma2, draws, 12);
    let z2 = [(0, 0), (0, 2), (2, 3)]
        .iter()
        .map(|&(j, k)| (c2[(j, k)] - mc2[(j, k)]).abs() / cse2[(j, k)])
        .fold(0.0f64, f64::max);
    ok &= z2 < 3.0;
    check(
        ok,
        format!(
            "mixed r=3: max |model - MC| / SE = {worst_z:.2} (<3); closed forms rel. err {closed_err:.1e}; \
             closed forms vs MC max z = {z2:.2} (<3)"
        ),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let bound = (2.0 / std::f64::consts::PI).sqrt();
    let mut max: f64 = f64::NEG_INFINITY;
    for psi in [1e-1, 1e-2, 1e-4, 1e-8] {
        for s22 in [1.0, 4.0, 16.0, 100.0, 400.0, 1e4] {
            let c = limiting_bernoulli_gaussian_correlation(psi, 1.0, s22).map_err(|e| e.to_string())?;
            max = max.max(c);
        }
    }
    let elapsed = start.elapsed();
    check(
        max <= bound + 1e-3 && max >= 0.75 && within(elapsed, 30.0),
        format!(
            "max correlation {max:.5} vs sqrt(2/pi) = {bound:.5} (<= +1e-3, >= 0.75), {elapsed:.1?} (<30s)"
        ),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let design = SimDesign::standard(200, 5, Structure::Ar, 0.9, 20_240_607);
    let table =
        run_prediction_experiment(&design, 50, 2000, &FitControls::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let better = table.full_better_count();
    let full = table.mean_overall(Method::Full);
    let diag = table.mean_overall(Method::Diagonal);
    check(
        better >= 45 && full >= 1.0 && diag >= 1.0 && table.failures.is_empty() && within(elapsed, 1200.0),
        format!(
            "full better in {better}/50 (>=45); mean ratios full {full:.4}, diagonal {diag:.4} (>=1); \
             {} failed reps; {elapsed:.0?} (<20min)",
            table.failures.len()
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let ctl = FitControls::default();
    let size_design = SimDesign::standard(400, 5, Structure::Ar, 0.0, 31_337);
    let size =
        run_lrt_experiment(&size_design, 200, LrtKind::SigmaDiag, 0.0, &ctl).map_err(|e| e.to_string())?;
    let power_design = SimDesign::standard(200, 5, Structure::Ar, 0.4, 42_424);
    let power =
        run_lrt_experiment(&power_design, 200, LrtKind::SigmaDiag, 0.0, &ctl).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (s, pw) = (size.rejection_rate(), power.rejection_rate());
    let failures = size.failures.len() + power.failures.len();
    check(
        (0.02..=0.12).contains(&s) && pw >= 0.9 && failures == 0 && within(elapsed, 1800.0),
        format!(
            "size {s:.3} +/- {:.3} (in [0.02, 0.12]), power {pw:.3} (>=0.9), {failures} failed reps, {elapsed:.0?} (<30min)",
            size.mc_standard_error()
        ),
    )
}

fn criterion_9() -> Outcome {
    let ctl = FitControls::default();
    let mut fits = 0;
    let mut exact = true;
    for (k, structure) in [Structure::Ar, Structure::Cs, Structure::Block]
        .into_iter()
        .enumerate()
    {
        let design = SimDesign::standard(150, 3, structure, 0.5, 900 + k as u64);
        let spec = design.model_spec().unwrap();
        let sim = gen_dataset(&design).unwrap();
        for value in [1.0, 0.5] {
            let cspec = spec.identifiability_constraints(value).unwrap();
            let f = fit(&sim.data, &spec, &cspec, &ctl).map_err(|e| e.to_string())?;
            fits += 1;
            exact &= spec
                .bernoulli_indices()
                .iter()
                .all(|&j| f.sigma_hat[(j, j)] == value);
        }
        let cspec = fitting_constraints(&spec).unwrap();
        let t = lrt(
            &sim.data,
            &spec,
            &Hypothesis::diagonal_sigma(&cspec).unwrap(),
            &ctl,
        )
        .map_err(|e| e.to_string())?;
        fits += 2;
        for s in [&t.null_fit.sigma, &t.alt_fit.sigma] {
            exact &= spec.bernoulli_indices().iter().all(|&j| s[j][j] == 1.0);
        }
    }
    let design = SimDesign::standard(100, 2, Structure::Ar, 0.5, 5);
    let spec = design.model_spec().unwrap();
    let sim = gen_dataset(&design).unwrap();
    let unconstrained = ConstraintSpec::unconstrained(spec.r());
    let rejected_fit = fit(&sim.data, &spec, &unconstrained, &ctl).is_err();
    let partial = unconstrained
        .clone()
        .with_fixed(3, 3, 1.0)
        .unwrap()
        .with_fixed(4, 4, 1.0)
        .unwrap();
    let rejected_partial = fit(&sim.data, &spec, &partial, &ctl).is_err();
    check(
        exact && rejected_fit && rejected_partial,
        format!(
            "{fits} fits with Bernoulli diagonals bit-equal: {exact}; unconstrained spec rejected: {rejected_fit}; \
             spec missing one Bernoulli diagonal rejected: {rejected_partial}"
        ),
    )
}

fn criterion_10() -> Outcome {
    let families = vec![
        Family::gaussian(1e-2).unwrap(),
        Family::gaussian(1e-2).unwrap(),
        Family::quasi_poisson(1e-1).unwrap(),
        Family::quasi_poisson(1e-1).unwrap(),
    ];
    let design = SimDesign {
        n: 333,
        p: 5,
        structure: Structure::Ar,
        rho: 0.5,
        seed: 333,
        intercepts: vec![2.0; 4],
        families,
        shared_predictors: true,
        row_effect: None,
    };
    let spec = design.model_spec().unwrap();
    let sim = gen_dataset(&design).unwrap();
    let data: &Dataset = &sim.data;
    let cspec = ConstraintSpec::unconstrained(4);
    let ctl = FitControls::default();
    let start = Instant::now();
    let f = fit(data, &spec, &cspec, &ctl).map_err(|e| e.to_string())?;
    let fit_time = start.elapsed();
    let start = Instant::now();
    let t =
        lrt(data, &spec, &Hypothesis::diagonal_sigma(&cspec).unwrap(), &ctl).map_err(|e| e.to_string())?;
    let lrt_time = start.elapsed();
    check(
        f.converged && within(fit_time, 30.0) && within(lrt_time, 60.0),
        format!(
            "q={}: fit converged={} in {fit_time:.1?} (<30s, {} outer iterations); diagonal LRT T={:.2} df={} in {lrt_time:.1?} (<60s)",
            spec.q(),
            f.converged,
            f.outer_iters,
            t.t_n,
            t.df
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("Gaussian exactness", criterion_1),
        ("gradient fidelity", criterion_2),
        ("projection correctness", criterion_3),
        ("latent solver", criterion_4),
        ("moment oracle", criterion_5),
        ("limiting correlation bound", criterion_6),
        ("prediction benefit", criterion_7),
        ("LRT size and power", criterion_8),
        ("identifiability constraint", criterion_9),
        ("fertility-scale smoke", criterion_10),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !only.is_empty() && !only.contains(&number) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {number:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {number:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
