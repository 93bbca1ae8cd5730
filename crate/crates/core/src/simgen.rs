//! Simulated data and the prediction and testing experiments run on them.
//!
//! Every observation draws from its own ChaCha stream keyed by its index, and
//! every replication gets its own seed, so results do not depend on how work
//! is scheduled across threads.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSpec;
use crate::data::{Dataset, ModelSpec};
use crate::error::{Error, Result};
use crate::families::{Family, FamilyKind};
use crate::fitter::{fit, FitControls, FitStart};
use crate::inference::{chisq_sf, lrt_statistic};
use crate::moments::predict_with;
use crate::worklik::BetaRestrictions;

const COEF_STREAM: u64 = u64::MAX;
const TEST_SET_SALT: u64 = 0x7465_7374_5f73_6574;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Structure {
    /// `rho^|j-k|`
    Ar,
    /// `rho` off the diagonal
    Cs,
    /// `rho` within the residue classes of the index mod 3, zero across them
    Block,
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AR" => Ok(Structure::Ar),
            "CS" => Ok(Structure::Cs),
            "BLOCK" => Ok(Structure::Block),
            _ => Err(Error::Design(format!(
                "unknown structure {s:?}; use AR, CS or BLOCK"
            ))),
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Ar => "AR",
            Structure::Cs => "CS",
            Structure::Block => "BLOCK",
        })
    }
}

const BLOCK_STRIDE: usize = 3;

/// `0.5 * S` with `S` the unit-diagonal correlation of the given structure.
pub fn gen_sigma(structure: Structure, rho: f64, r: usize) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Design(format!("rho must lie in [0, 1), got {rho}")));
    }
    if r == 0 {
        return Err(Error::Design("r must be positive".into()));
    }
    let tilde = DMatrix::from_fn(r, r, |j, k| {
        if j == k {
            return 1.0;
        }
        match structure {
            Structure::Ar => rho.powi(j.abs_diff(k) as i32),
            Structure::Cs => rho,
            Structure::Block if j % BLOCK_STRIDE == k % BLOCK_STRIDE => rho,
            Structure::Block => 0.0,
        }
    });
    let sigma = tilde * 0.5;
    let min = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
    if min < -1e-12 {
        return Err(Error::Design(format!(
            "{structure} structure with rho = {rho} is not positive semidefinite (min eigenvalue {min:e})"
        )));
    }
    Ok(sigma)
}

/// A simulation design. Coefficients for response `j` are an intercept
/// followed by `p - 1` slopes on `U[-1, 1]` predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDesign {
    pub n: usize,
    pub p: usize,
    pub structure: Structure,
    pub rho: f64,
    pub seed: u64,
    pub families: Vec<Family>,
    pub intercepts: Vec<f64>,
    /// All responses share one predictor vector per observation.
    pub shared_predictors: bool,
    /// Replace the first slope of every response by `U[-g/100, g/100]`.
    pub row_effect: Option<f64>,
}

impl SimDesign {
    /// Nine responses: three Gaussian (`psi = 0.01`, intercept 2), three
    /// Bernoulli (intercept 0), three Poisson (intercept 2).
    pub fn standard(n: usize, p: usize, structure: Structure, rho: f64, seed: u64) -> Self {
        let gaussian = Family::gaussian(0.01).expect("positive dispersion");
        let mut families = vec![gaussian; 3];
        families.extend([Family::bernoulli(); 3]);
        families.extend([Family::poisson(); 3]);
        let intercepts = families
            .iter()
            .map(|f| if f.kind == FamilyKind::Bernoulli { 0.0 } else { 2.0 })
            .collect();
        SimDesign {
            n,
            p,
            structure,
            rho,
            seed,
            families,
            intercepts,
            shared_predictors: false,
            row_effect: None,
        }
    }

    pub fn r(&self) -> usize {
        self.families.len()
    }

    pub fn q(&self) -> usize {
        self.r() * self.p
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::Design("n and p must be positive".into()));
        }
        if self.families.is_empty() || self.intercepts.len() != self.families.len() {
            return Err(Error::Design(
                "need one intercept per response and at least one response".into(),
            ));
        }
        if self.row_effect.is_some() && self.p < 2 {
            return Err(Error::Design("a row effect needs p >= 2".into()));
        }
        if let Some(g) = self.row_effect {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::Design(format!("effect size must be >= 0, got {g}")));
            }
        }
        gen_sigma(self.structure, self.rho, self.r())?;
        Ok(())
    }

    /// The fitted model: the design's families with `q = r p`.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.families.clone(), self.q())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of replication `rep` under a master seed.
pub fn replication_seed(master: u64, rep: usize) -> u64 {
    splitmix64(master.wrapping_add(rep as u64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub beta: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Draws the true coefficients; `Sigma` follows from the structure.
pub fn gen_truth(design: &SimDesign) -> Result<Truth> {
    design.validate()?;
    let (r, p) = (design.r(), design.p);
    let mut rng = stream(design.seed, COEF_STREAM);
    let mut beta = DVector::zeros(r * p);
    for j in 0..r {
        beta[j * p] = design.intercepts[j];
        for k in 1..p {
            beta[j * p + k] = rng.random_range(-0.5..=0.5);
        }
    }
    if let Some(g) = design.row_effect {
        let half = g * 1e-2;
        for j in 0..r {
            beta[j * p + 1] = if half > 0.0 {
                rng.random_range(-half..=half)
            } else {
                0.0
            };
        }
    }
    Ok(Truth {
        beta,
        sigma: gen_sigma(design.structure, design.rho, r)?,
    })
}

#[derive(Debug, Clone)]
pub struct SimData {
    pub data: Dataset,
    /// `n x r` latent draws.
    pub latent: DMatrix<f64>,
    pub truth: Truth,
}

/// Simulates `n` observations from `truth` using streams under `seed`.
pub fn gen_observations(
    design: &SimDesign,
    truth: &Truth,
    n: usize,
    seed: u64,
) -> Result<(Dataset, DMatrix<f64>)> {
    let (r, p) = (design.r(), design.p);
    let eig = SymmetricEigen::new(truth.sigma.clone());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let slopes_per_obs = if design.shared_predictors {
        p - 1
    } else {
        r * (p - 1)
    };

    let mut preds = DMatrix::zeros(n, slopes_per_obs);
    let mut y = DMatrix::zeros(n, r);
    let mut latent = DMatrix::zeros(n, r);
    for i in 0..n {
        let mut rng = stream(seed, i as u64);
        for k in 0..slopes_per_obs {
            preds[(i, k)] = rng.random_range(-1.0..=1.0);
        }
        let z = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut w = &root * z;
        for j in 0..r {
            let mut eta = truth.beta[j * p];
            for k in 1..p {
                let x = if design.shared_predictors {
                    preds[(i, k - 1)]
                } else {
                    preds[(i, j * (p - 1) + k - 1)]
                };
                eta += x * truth.beta[j * p + k];
            }
            w[j] += eta;
            y[(i, j)] = design.families[j]
                .sample(w[j], &mut rng)
                .map_err(|e| e.context(format!("observation {}, response {}", i + 1, j + 1)))?;
        }
        latent.row_mut(i).copy_from(&w.transpose());
    }

    let data = if design.shared_predictors {
        let full = DMatrix::from_fn(n, p, |i, k| if k == 0 { 1.0 } else { preds[(i, k - 1)] });
        Dataset::from_shared_predictors(y, &full)?
    } else {
        let blocks: Vec<DMatrix<f64>> = (0..r)
            .map(|j| {
                DMatrix::from_fn(n, p, |i, k| {
                    if k == 0 {
                        1.0
                    } else {
                        preds[(i, j * (p - 1) + k - 1)]
                    }
                })
            })
            .collect();
        Dataset::from_per_response(y, &blocks)?
    };
    Ok((data, latent))
}

/// Truth and a training sample of size `design.n`.
pub fn gen_dataset(design: &SimDesign) -> Result<SimData> {
    let truth = gen_truth(design)?;
    let (data, latent) = gen_observations(design, &truth, design.n, design.seed)?;
    Ok(SimData { data, latent, truth })
}

/// Constraints used when fitting simulated data: Bernoulli variances fixed
/// at 1, whatever the generating value.
pub fn fitting_constraints(spec: &ModelSpec) -> Result<ConstraintSpec> {
    spec.identifiability_constraints(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Oracle,
    Full,
    Diagonal,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Oracle => "oracle",
            Method::Full => "full",
            Method::Diagonal => "diagonal",
        })
    }
}

/// Relative squared prediction errors of one method in one replication:
/// the method's sum of squared errors over the oracle's, overall and over
/// the responses of each type. NaN for types absent from the design.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionRow {
    pub rep: usize,
    pub method: Method,
    pub overall: f64,
    pub gaussian: f64,
    pub bernoulli: f64,
    pub poisson: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionTable {
    pub rows: Vec<PredictionRow>,
    /// Replications skipped because a fit failed, with the error.
    pub failures: Vec<(usize, String)>,
}

impl PredictionTable {
    pub fn mean_overall(&self, method: Method) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.overall)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Replications where the full model's overall ratio is strictly below
    /// the diagonal model's.
    pub fn full_better_count(&self) -> usize {
        let mut count = 0;
        for full in self.rows.iter().filter(|r| r.method == Method::Full) {
            if let Some(diag) = self
                .rows
                .iter()
                .find(|r| r.method == Method::Diagonal && r.rep == full.rep)
            {
                if full.overall < diag.overall {
                    count += 1;
                }
            }
        }
        count
    }

    pub fn replications(&self) -> usize {
        self.rows.iter().filter(|r| r.method == Method::Oracle).count()
    }
}

/// Per-type sums of squared errors: overall, Gaussian, Bernoulli, Poisson.
fn squared_errors(y: &DMatrix<f64>, pred: &[DVector<f64>], spec: &ModelSpec) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (i, p) in pred.iter().enumerate() {
        for j in 0..spec.r() {
            let e = (y[(i, j)] - p[j]).powi(2);
            out[0] += e;
            out[match spec.family(j).kind {
                FamilyKind::Gaussian => 1,
                FamilyKind::Bernoulli => 2,
                FamilyKind::Poisson => 3,
            }] += e;
        }
    }
    out
}

fn prediction_replication(
    design: &SimDesign,
    rep: usize,
    n_test: usize,
    ctl: &FitControls,
) -> Result<Vec<PredictionRow>> {
    let rep_design = SimDesign {
        seed: replication_seed(design.seed, rep),
        ..design.clone()
    };
    let spec = rep_design.model_spec()?;
    let train = gen_dataset(&rep_design)?;
    let (test, _) = gen_observations(
        &rep_design,
        &train.truth,
        n_test,
        splitmix64(rep_design.seed ^ TEST_SET_SALT),
    )?;
    let full_c = fitting_constraints(&spec)?;
    let diag_c = full_c.clone().with_all_offdiagonal_zero()?;
    let full = fit(&train.data, &spec, &full_c, ctl).map_err(|e| e.context("full model"))?;
    let diag = fit(&train.data, &spec, &diag_c, ctl).map_err(|e| e.context("diagonal model"))?;

    let x_test = test.designs();
    let oracle_pred = predict_with(&train.truth.beta, &train.truth.sigma, x_test, &spec)?;
    let oracle = squared_errors(test.y(), &oracle_pred, &spec);
    let row = |method, beta: &DVector<f64>, sigma: &DMatrix<f64>, converged| -> Result<PredictionRow> {
        let pred = predict_with(beta, sigma, x_test, &spec)?;
        let sse = squared_errors(test.y(), &pred, &spec);
        let ratio = |k: usize| {
            if oracle[k] > 0.0 {
                sse[k] / oracle[k]
            } else {
                f64::NAN
            }
        };
        Ok(PredictionRow {
            rep,
            method,
            overall: ratio(0),
            gaussian: ratio(1),
            bernoulli: ratio(2),
            poisson: ratio(3),
            converged,
        })
    };
    Ok(vec![
        row(Method::Oracle, &train.truth.beta, &train.truth.sigma, true)?,
        row(Method::Full, &full.beta_hat, &full.sigma_hat, full.converged)?,
        row(Method::Diagonal, &diag.beta_hat, &diag.sigma_hat, diag.converged)?,
    ])
}

/// Fits the full and diagonal-`Sigma` models to `reps` simulated training
/// sets and scores their predicted means on independent test sets.
pub fn run_prediction_experiment(
    design: &SimDesign,
    reps: usize,
    n_test: usize,
    ctl: &FitControls,
) -> Result<PredictionTable> {
    design.validate()?;
    if reps == 0 || n_test == 0 {
        return Err(Error::Design("reps and n_test must be positive".into()));
    }
    let results: Vec<Result<Vec<PredictionRow>>> = (0..reps)
        .into_par_iter()
        .map(|rep| prediction_replication(design, rep, n_test, ctl))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (rep, res) in results.into_iter().enumerate() {
        match res {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push((rep, e.to_string())),
        }
    }
    Ok(PredictionTable { rows, failures })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LrtKind {
    /// `Sigma` diagonal.
    #[serde(rename = "SIGMA-DIAG")]
    SigmaDiag,
    /// First slope zero for every response (shared predictors).
    #[serde(rename = "BETA-ROW")]
    BetaRow,
}

impl fmt::Display for LrtKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrtKind::SigmaDiag => "SIGMA-DIAG",
            LrtKind::BetaRow => "BETA-ROW",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LrtRow {
    pub rep: usize,
    pub t_n: f64,
    pub df: usize,
    pub p_value: f64,
    pub reject: bool,
    pub null_converged: bool,
    pub alt_converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LrtTable {
    pub kind: LrtKind,
    pub level: f64,
    pub rows: Vec<LrtRow>,
    pub failures: Vec<(usize, String)>,
}

impl LrtTable {
    pub fn rejection_rate(&self) -> f64 {
        let k = self.rows.iter().filter(|r| r.reject).count();
        k as f64 / self.rows.len() as f64
    }

    /// Binomial standard error of the rejection rate.
    pub fn mc_standard_error(&self) -> f64 {
        let p = self.rejection_rate();
        (p * (1.0 - p) / self.rows.len() as f64).sqrt()
    }
}

pub const LRT_LEVEL: f64 = 0.05;

fn lrt_replication(design: &SimDesign, rep: usize, kind: LrtKind, ctl: &FitControls) -> Result<LrtRow> {
    let rep_design = SimDesign {
        seed: replication_seed(design.seed, rep),
        ..design.clone()
    };
    let spec = rep_design.model_spec()?;
    let sim = gen_dataset(&rep_design)?;
    let alt = fitting_constraints(&spec)?;
    let (null, restrictions, df) = match kind {
        LrtKind::SigmaDiag => {
            let r = spec.r();
            (
                alt.clone().with_all_offdiagonal_zero()?,
                BetaRestrictions::none(),
                r * (r - 1) / 2,
            )
        }
        LrtKind::BetaRow => {
            let p = rep_design.p;
            let entries = (0..spec.r()).map(|j| (j * p + 1, 0.0)).collect();
            (alt.clone(), BetaRestrictions::new(entries)?, spec.r())
        }
    };
    let parts = lrt_statistic(
        &sim.data,
        &spec,
        &null,
        &restrictions,
        &alt,
        ctl,
        &FitStart::default(),
    )?;
    let p_value = chisq_sf(parts.t_n.max(0.0), df)?;
    Ok(LrtRow {
        rep,
        t_n: parts.t_n,
        df,
        p_value,
        reject: p_value < LRT_LEVEL,
        null_converged: parts.null.converged,
        alt_converged: parts.alt.converged,
    })
}

/// Rejection frequency of the approximate likelihood-ratio test at level
/// 0.05. For [`LrtKind::BetaRow`] the design must use shared predictors and
/// `gamma_effect` sets the size of the tested slopes.
pub fn run_lrt_experiment(
    design: &SimDesign,
    reps: usize,
    kind: LrtKind,
    gamma_effect: f64,
    ctl: &FitControls,
) -> Result<LrtTable> {
    let mut design = design.clone();
    match kind {
        LrtKind::SigmaDiag => {
            if design.r() < 2 {
                return Err(Error::Design("a diagonal-Sigma test needs r >= 2".into()));
            }
        }
        LrtKind::BetaRow => {
            if !design.shared_predictors {
                return Err(Error::Design(
                    "the coefficient-row test needs shared predictors".into(),
                ));
            }
            design.row_effect = Some(gamma_effect);
        }
    }
    design.validate()?;
    if reps == 0 {
        return Err(Error::Design("reps must be positive".into()));
    }
    let results: Vec<Result<LrtRow>> = (0..reps)
        .into_par_iter()
        .map(|rep| lrt_replication(&design, rep, kind, ctl))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (rep, res) in results.into_iter().enumerate() {
        match res {
            Ok(r) => rows.push(r),
            Err(e) => failures.push((rep, e.to_string())),
        }
    }
    Ok(LrtTable {
        kind,
        level: LRT_LEVEL,
        rows,
        failures,
    })
}
