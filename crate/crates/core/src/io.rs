//! File formats: model, constraint and hypothesis JSON in, fit/test/interval
//! JSON out, wide data CSV in, prediction and simulation tables out.
//!
//! Every JSON document carries `"version": 1` and unknown fields are errors.
//! Matrix and coefficient indices in JSON are 1-based.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSpec, ConstraintSpecJson, Position};
use crate::data::{Dataset, ModelSpec};
use crate::error::{Error, Result};
use crate::families::Family;
use crate::fitter::FitResult;
use crate::inference::{row_major, Hypothesis, ProfileInterval, TestResult};
use crate::simgen::{LrtTable, PredictionTable};
use crate::worklik::BetaRestrictions;

pub const SCHEMA_VERSION: u32 = 1;

/// How the predictor columns of the data CSV map to design matrices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    /// `p` predictor columns shared by every response; `q = r p` and the
    /// coefficients of response `j` are `j p + 1 ..= (j + 1) p`.
    Shared { p: usize },
    /// Response `j` has its own `p[j]` columns, blocks in response order.
    PerResponse { p: Vec<usize> },
}

impl Layout {
    pub fn predictor_columns(&self) -> usize {
        match self {
            Layout::Shared { p } => *p,
            Layout::PerResponse { p } => p.iter().sum(),
        }
    }

    pub fn q(&self, r: usize) -> usize {
        match self {
            Layout::Shared { p } => r * p,
            Layout::PerResponse { p } => p.iter().sum(),
        }
    }

    /// Design matrices for the rows of `predictors` (`n x predictor_columns`).
    pub fn designs(&self, r: usize, predictors: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let blocks = self.blocks(r, predictors)?;
        let q = self.q(r);
        Ok((0..predictors.nrows())
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
            .collect())
    }

    fn blocks(&self, r: usize, predictors: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        if predictors.ncols() != self.predictor_columns() {
            return Err(Error::Dimension(format!(
                "layout expects {} predictor columns, got {}",
                self.predictor_columns(),
                predictors.ncols()
            )));
        }
        match self {
            Layout::Shared { .. } => Ok(vec![predictors.clone(); r]),
            Layout::PerResponse { p } => {
                let mut start = 0;
                Ok(p.iter()
                    .map(|&pj| {
                        let b = predictors.columns(start, pj).into_owned();
                        start += pj;
                        b
                    })
                    .collect())
            }
        }
    }

    fn validate(&self, r: usize) -> Result<()> {
        match self {
            Layout::Shared { p: 0 } => Err(Error::Spec("layout needs at least one predictor".into())),
            Layout::Shared { .. } => Ok(()),
            Layout::PerResponse { p } => {
                if p.len() != r {
                    return Err(Error::Spec(format!(
                        "per-response layout lists {} blocks for {r} responses",
                        p.len()
                    )));
                }
                if p.contains(&0) {
                    return Err(Error::Spec("every response needs at least one predictor".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    families: Vec<Family>,
    layout: Layout,
}

/// A model JSON document: response families and data layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layout: Layout,
}

impl Model {
    pub fn new(families: Vec<Family>, layout: Layout) -> Result<Self> {
        layout.validate(families.len())?;
        let q = layout.q(families.len());
        Ok(Model {
            spec: ModelSpec::new(families, q)?,
            layout,
        })
    }

    pub fn r(&self) -> usize {
        self.spec.r()
    }

    pub fn to_json(&self) -> Result<String> {
        to_json(&ModelFile {
            version: SCHEMA_VERSION,
            families: self.spec.families().to_vec(),
            layout: self.layout.clone(),
        })
    }
}

fn check_version(found: u32, what: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "{what} has schema version {found}, this build reads version {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

fn from_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::from(e).context(what.to_string()))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))
}

pub fn parse_model(text: &str) -> Result<Model> {
    let file: ModelFile = from_json(text, "model")?;
    check_version(file.version, "model")?;
    Model::new(file.families, file.layout)
}

pub fn read_model(path: &Path) -> Result<Model> {
    parse_model(&read_text(path)?).map_err(|e| e.context(path.display().to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintsFile {
    version: u32,
    #[serde(default)]
    fixed: Vec<(usize, usize, f64)>,
    #[serde(default)]
    zeros: Vec<(usize, usize)>,
    #[serde(default)]
    ties: Vec<Vec<(usize, usize)>>,
    #[serde(default)]
    eigen_floor: f64,
}

pub fn parse_constraints(text: &str, r: usize) -> Result<ConstraintSpec> {
    let f: ConstraintsFile = from_json(text, "constraints")?;
    check_version(f.version, "constraints")?;
    ConstraintSpecJson {
        fixed: f.fixed,
        zeros: f.zeros,
        ties: f.ties,
        eigen_floor: f.eigen_floor,
    }
    .into_spec(r)
}

pub fn read_constraints(path: &Path, r: usize) -> Result<ConstraintSpec> {
    parse_constraints(&read_text(path)?, r).map_err(|e| e.context(path.display().to_string()))
}

pub fn constraints_to_json(spec: &ConstraintSpec) -> Result<String> {
    let j = ConstraintSpecJson::from(spec);
    to_json(&ConstraintsFile {
        version: SCHEMA_VERSION,
        fixed: j.fixed,
        zeros: j.zeros,
        ties: j.ties,
        eigen_floor: j.eigen_floor,
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct NullJson {
    #[serde(default)]
    fixed: Vec<(usize, usize, f64)>,
    #[serde(default)]
    zeros: Vec<(usize, usize)>,
    #[serde(default)]
    ties: Vec<Vec<(usize, usize)>>,
    #[serde(default)]
    eigen_floor: f64,
    /// `[index, value]` pairs, index 1-based into `beta`.
    #[serde(default)]
    beta_restrictions: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct HypothesisFile {
    version: u32,
    null: NullJson,
    alt: ConstraintSpecJson,
}

pub fn parse_hypothesis(text: &str, r: usize, q: usize) -> Result<Hypothesis> {
    let f: HypothesisFile = from_json(text, "hypothesis")?;
    check_version(f.version, "hypothesis")?;
    let null = ConstraintSpecJson {
        fixed: f.null.fixed,
        zeros: f.null.zeros,
        ties: f.null.ties,
        eigen_floor: f.null.eigen_floor,
    }
    .into_spec(r)
    .map_err(|e| e.context("null"))?;
    let alt = f.alt.into_spec(r).map_err(|e| e.context("alt"))?;
    let entries = f
        .null
        .beta_restrictions
        .into_iter()
        .map(|(i, v)| {
            if i == 0 || i > q {
                return Err(Error::Spec(format!(
                    "beta restriction index {i} is outside 1..={q}"
                )));
            }
            Ok((i - 1, v))
        })
        .collect::<Result<Vec<_>>>()?;
    Hypothesis::new(null, BetaRestrictions::new(entries)?, alt)
}

pub fn read_hypothesis(path: &Path, r: usize, q: usize) -> Result<Hypothesis> {
    parse_hypothesis(&read_text(path)?, r, q).map_err(|e| e.context(path.display().to_string()))
}

/// Serialized fit. `sigma` is a list of rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub version: u32,
    pub beta: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub h_final: f64,
    pub iterations: usize,
    pub converged: bool,
    pub latent_warnings: usize,
}

impl FitFile {
    pub fn from_fit(fit: &FitResult) -> Self {
        FitFile {
            version: SCHEMA_VERSION,
            beta: fit.beta_hat.iter().copied().collect(),
            sigma: row_major(&fit.sigma_hat),
            h_final: fit.h_final,
            iterations: fit.outer_iters,
            converged: fit.converged,
            latent_warnings: fit.latent_warnings,
        }
    }

    pub fn beta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    pub fn sigma(&self) -> Result<DMatrix<f64>> {
        rows_to_matrix(&self.sigma)
    }

    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    if r == 0 || rows.iter().any(|row| row.len() != r) {
        return Err(Error::Dimension(
            "sigma must be a non-empty square list of rows".into(),
        ));
    }
    Ok(DMatrix::from_fn(r, r, |j, k| rows[j][k]))
}

pub fn parse_fit(text: &str) -> Result<FitFile> {
    let f: FitFile = from_json(text, "fit")?;
    check_version(f.version, "fit")?;
    f.sigma()?;
    Ok(f)
}

pub fn read_fit(path: &Path) -> Result<FitFile> {
    parse_fit(&read_text(path)?).map_err(|e| e.context(path.display().to_string()))
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    version: u32,
    #[serde(flatten)]
    body: &'a T,
}

pub fn test_result_to_json(t: &TestResult) -> Result<String> {
    to_json(&Versioned {
        version: SCHEMA_VERSION,
        body: t,
    })
}

#[derive(Serialize)]
struct IntervalFile<'a> {
    version: u32,
    /// 1-based.
    element: (usize, usize),
    #[serde(flatten)]
    interval: &'a ProfileInterval,
}

pub fn interval_to_json(element: Position, interval: &ProfileInterval) -> Result<String> {
    to_json(&IntervalFile {
        version: SCHEMA_VERSION,
        element: (element.0 + 1, element.1 + 1),
        interval,
    })
}

/// Reads a wide CSV with a header row: `r` response columns (`y1..yr`)
/// followed by the layout's predictor columns. Column names are not checked,
/// only their number.
pub fn parse_data<R: Read>(reader: R, model: &Model) -> Result<Dataset> {
    let r = model.r();
    let table = parse_numeric_csv(reader, r + model.layout.predictor_columns())?;
    let y = table.columns(0, r).into_owned();
    let predictors = table.columns(r, table.ncols() - r).into_owned();
    let data = Dataset::new(y, model.layout.designs(r, &predictors)?)?;
    data.validate(&model.spec)?;
    Ok(data)
}

pub fn read_data(path: &Path, model: &Model) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    parse_data(file, model).map_err(|e| e.context(path.display().to_string()))
}

/// Reads predictor columns only (no responses), for prediction.
pub fn parse_predictors<R: Read>(reader: R, model: &Model) -> Result<Vec<DMatrix<f64>>> {
    let table = parse_numeric_csv(reader, model.layout.predictor_columns())?;
    model.layout.designs(model.r(), &table)
}

pub fn read_predictors(path: &Path, model: &Model) -> Result<Vec<DMatrix<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    parse_predictors(file, model).map_err(|e| e.context(path.display().to_string()))
}

fn parse_numeric_csv<R: Read>(reader: R, columns: usize) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Parse("CSV is empty".into()));
    }
    if headers.len() != columns {
        return Err(Error::Parse(format!(
            "CSV line 1: header has {} columns, expected {columns}",
            headers.len()
        )));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Parse(format!(
                    "CSV line {line} column {}: cannot read {field:?} as a number",
                    col + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "CSV line {line} column {}: value is not finite",
                    col + 1
                )));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse("CSV has no data rows".into()));
    }
    Ok(DMatrix::from_row_slice(rows, columns, &values))
}

/// Writes one row per observation with columns `mean_y1..mean_yr`.
pub fn write_predictions<W: Write>(writer: W, means: &[DVector<f64>], r: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record((1..=r).map(|j| format!("mean_y{j}")))?;
    for m in means {
        w.write_record(m.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `rep, method, overall, gaussian, bernoulli, poisson, converged`.
pub fn write_prediction_table<W: Write>(writer: W, table: &PredictionTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `rep, t_n, df, p_value, reject, null_converged, alt_converged`.
pub fn write_lrt_table<W: Write>(writer: W, table: &LrtTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
