//! Python bindings. Matrices cross the boundary as lists of rows; matrix
//! indices are 1-based, as in the JSON formats.

use mixedreg::constraints::ConstraintSpec;
use mixedreg::data::Dataset;
use mixedreg::families::{Family, FamilyKind};
use mixedreg::fitter::{fit as fit_model, FitControls};
use mixedreg::inference::{lrt, profile_ci as profile, FitSummary};
use mixedreg::io::{self, Layout, Model};
use mixedreg::moments::predict_with;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: mixedreg::error::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("{what}: rows differ in length")));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn family(name: &str, psi: f64) -> PyResult<Family> {
    let kind = match name.to_ascii_lowercase().as_str() {
        "gaussian" => FamilyKind::Gaussian,
        "poisson" | "quasi_poisson" => FamilyKind::Poisson,
        "bernoulli" => FamilyKind::Bernoulli,
        _ => return Err(PyValueError::new_err(format!("unknown family {name:?}"))),
    };
    Family::new(kind, psi).map_err(err)
}

/// `p` is either one column count shared by every response or one count per
/// response; `None` means every column of `x` is shared.
fn model(families: &[(String, f64)], p: Option<&Bound<'_, PyAny>>, x_cols: usize) -> PyResult<Model> {
    let families = families
        .iter()
        .map(|(name, psi)| family(name, *psi))
        .collect::<PyResult<Vec<_>>>()?;
    let layout = match p {
        None => Layout::Shared { p: x_cols },
        Some(p) => match p.extract::<usize>() {
            Ok(p) => Layout::Shared { p },
            Err(_) => Layout::PerResponse { p: p.extract()? },
        },
    };
    Model::new(families, layout).map_err(err)
}

fn dataset(model: &Model, y: &[Vec<f64>], x: &[Vec<f64>]) -> PyResult<Dataset> {
    let y = matrix(y, "y")?;
    let designs = model.layout.designs(model.r(), &matrix(x, "x")?).map_err(err)?;
    Dataset::new(y, designs).map_err(err)
}

fn constraints(model: &Model, json: Option<&str>) -> PyResult<ConstraintSpec> {
    match json {
        Some(text) => io::parse_constraints(text, model.r()).map_err(err),
        None => model.spec.identifiability_constraints(1.0).map_err(err),
    }
}

fn controls(max_outer: Option<usize>, eps: Option<f64>) -> FitControls {
    let mut ctl = FitControls::default();
    if let Some(m) = max_outer {
        ctl.max_outer = m;
    }
    if let Some(e) = eps {
        ctl.eps_beta = e;
        ctl.eps_sigma = e;
    }
    ctl
}

fn summary<'py>(py: Python<'py>, s: &FitSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("beta", &s.beta)?;
    d.set_item("sigma", &s.sigma)?;
    d.set_item("h", s.h)?;
    d.set_item("iterations", s.iterations)?;
    d.set_item("converged", s.converged)?;
    Ok(d)
}

/// Fits the model. `families` is a list of `(name, psi)` pairs, `y` is
/// `n x r`, `x` holds the predictor columns. Without `constraints` (JSON
/// text) Bernoulli variances are fixed at one.
#[pyfunction]
#[pyo3(signature = (y, x, families, p=None, constraints=None, max_outer=None, eps=None))]
#[allow(clippy::too_many_arguments)]
fn fit<'py>(
    py: Python<'py>,
    y: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    families: Vec<(String, f64)>,
    p: Option<&Bound<'py, PyAny>>,
    constraints: Option<&str>,
    max_outer: Option<usize>,
    eps: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let model = model(&families, p, x.first().map_or(0, Vec::len))?;
    let data = dataset(&model, &y, &x)?;
    let cspec = self::constraints(&model, constraints)?;
    let ctl = controls(max_outer, eps);
    let result = py
        .detach(|| fit_model(&data, &model.spec, &cspec, &ctl))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("beta", result.beta_hat.as_slice())?;
    d.set_item("sigma", rows(&result.sigma_hat))?;
    d.set_item("h_final", result.h_final)?;
    d.set_item("iterations", result.outer_iters)?;
    d.set_item("converged", result.converged)?;
    d.set_item("latent_warnings", result.latent_warnings)?;
    Ok(d)
}

/// Likelihood-ratio test of the hypothesis given as JSON text.
#[pyfunction]
#[pyo3(signature = (y, x, families, hypothesis, p=None, max_outer=None, eps=None))]
#[allow(clippy::too_many_arguments)]
fn test<'py>(
    py: Python<'py>,
    y: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    families: Vec<(String, f64)>,
    hypothesis: &str,
    p: Option<&Bound<'py, PyAny>>,
    max_outer: Option<usize>,
    eps: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let model = model(&families, p, x.first().map_or(0, Vec::len))?;
    let data = dataset(&model, &y, &x)?;
    let hyp = io::parse_hypothesis(hypothesis, model.r(), model.spec.q()).map_err(err)?;
    let ctl = controls(max_outer, eps);
    let t = py.detach(|| lrt(&data, &model.spec, &hyp, &ctl)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("t_n", t.t_n)?;
    d.set_item("df", t.df)?;
    d.set_item("p_value", t.p_value)?;
    d.set_item("null_fit", summary(py, &t.null_fit)?)?;
    d.set_item("alt_fit", summary(py, &t.alt_fit)?)?;
    d.set_item("warnings", &t.warnings)?;
    Ok(d)
}

/// Profile-likelihood interval for `Sigma[row, col]` (1-based). Returns
/// `(lo, estimate, hi)`; an end is `None` when the search hit its bound.
#[pyfunction]
#[pyo3(signature = (y, x, families, row, col, level=0.95, p=None, constraints=None))]
#[allow(clippy::too_many_arguments)]
fn profile_ci<'py>(
    py: Python<'py>,
    y: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    families: Vec<(String, f64)>,
    row: usize,
    col: usize,
    level: f64,
    p: Option<&Bound<'py, PyAny>>,
    constraints: Option<&str>,
) -> PyResult<(Option<f64>, f64, Option<f64>)> {
    let model = model(&families, p, x.first().map_or(0, Vec::len))?;
    let r = model.r();
    if row == 0 || col == 0 || row > r || col > r {
        return Err(PyValueError::new_err(format!(
            "element ({row}, {col}) is outside a {r} x {r} matrix"
        )));
    }
    let data = dataset(&model, &y, &x)?;
    let cspec = self::constraints(&model, constraints)?;
    let ctl = FitControls::default();
    let ci = py
        .detach(|| profile(&data, &model.spec, &cspec, (row - 1, col - 1), level, &ctl))
        .map_err(err)?;
    Ok((ci.lo, ci.estimate, ci.hi))
}

/// Predicted marginal means at new predictor rows `x`.
#[pyfunction]
#[pyo3(signature = (beta, sigma, x, families, p=None))]
fn predict(
    beta: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    families: Vec<(String, f64)>,
    p: Option<&Bound<'_, PyAny>>,
) -> PyResult<Vec<Vec<f64>>> {
    let model = model(&families, p, x.first().map_or(0, Vec::len))?;
    let designs = model.layout.designs(model.r(), &matrix(&x, "x")?).map_err(err)?;
    let means = predict_with(
        &DVector::from_vec(beta),
        &matrix(&sigma, "sigma")?,
        &designs,
        &model.spec,
    )
    .map_err(err)?;
    Ok(means.iter().map(|m| m.iter().copied().collect()).collect())
}

#[pymodule]
fn mixedreg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(test, m)?)?;
    m.add_function(wrap_pyfunction!(profile_ci, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    Ok(())
}
