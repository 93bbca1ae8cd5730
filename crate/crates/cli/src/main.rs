use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mixedreg::fitter::{fit, FitControls, SigmaMetric};
use mixedreg::inference::{lrt, profile_ci};
use mixedreg::io::{self as fmt, Model};
use mixedreg::latent::LatentControls;
use mixedreg::moments::predict_with;
use mixedreg::simgen::{run_lrt_experiment, run_prediction_experiment, LrtKind, SimDesign, Structure};

/// Regression for mixed continuous, count and binary responses through a
/// latent Gaussian linear model.
///
/// Exit status: 0 on success, 2 when a fit did not converge (results are
/// still written), 1 on error.
#[derive(Parser, Debug)]
#[command(name = "mixedreg", version)]
struct Cli {
    /// Worker threads for expansion-point updates and replications
    /// (default: all cores).
    #[arg(long, global = true, env = "MIXEDREG_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the model and write the estimates as JSON.
    Fit {
        #[command(flatten)]
        input: Input,
        /// Covariance constraints JSON (default: Bernoulli variances fixed at 1).
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
        #[command(flatten)]
        controls: Controls,
    },
    /// Approximate likelihood-ratio test of a nested hypothesis.
    Test {
        #[command(flatten)]
        input: Input,
        /// Hypothesis JSON with `null` and `alt` constraint sets.
        #[arg(long)]
        hypothesis: PathBuf,
        #[command(flatten)]
        output: Output,
        #[command(flatten)]
        controls: Controls,
    },
    /// Profile-likelihood confidence interval for one element of Sigma.
    Ci {
        #[command(flatten)]
        input: Input,
        /// Covariance constraints JSON (default: Bernoulli variances fixed at 1).
        #[arg(long)]
        constraints: Option<PathBuf>,
        /// 1-based element as ROW,COL, e.g. 4,3.
        #[arg(long, value_parser = parse_element)]
        element: (usize, usize),
        /// Confidence level.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[command(flatten)]
        output: Output,
        #[command(flatten)]
        controls: Controls,
    },
    /// Predicted marginal means at new predictor rows.
    Predict {
        /// Fit JSON written by `mixedreg fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Model JSON (families and predictor layout).
        #[arg(long)]
        model: PathBuf,
        /// CSV of predictor columns only, with a header row.
        #[arg(long)]
        predictors: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Run a simulation experiment and write one CSV row per replication.
    Simulate {
        /// Which experiment to run.
        #[arg(long, value_enum, default_value_t = Experiment::Predict)]
        experiment: Experiment,
        /// Latent correlation structure: AR, CS or BLOCK.
        #[arg(long, default_value = "AR")]
        structure: Structure,
        /// Correlation parameter of the structure.
        #[arg(long, default_value_t = 0.9)]
        rho: f64,
        /// Training observations per replication.
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Coefficients per response, intercept included.
        #[arg(long, default_value_t = 5)]
        p: usize,
        /// Replications.
        #[arg(long, default_value_t = 50)]
        reps: usize,
        /// Master seed; replication seeds are derived from it.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Effect size of the tested coefficients in lrt-beta (slopes drawn
        /// from U[-gamma/100, gamma/100]); 0 simulates the null.
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        /// Test observations per replication (predict only).
        #[arg(long, default_value_t = 2000)]
        n_test: usize,
        #[command(flatten)]
        output: Output,
        #[command(flatten)]
        controls: Controls,
    },
}

#[derive(Args, Debug)]
struct Input {
    /// Data CSV: header, response columns y1..yr, then predictor columns.
    #[arg(long)]
    data: PathBuf,
    /// Model JSON (families and predictor layout).
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct Output {
    /// Output file (default: standard output).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Experiment {
    /// Prediction error of the full and diagonal-Sigma models.
    Predict,
    /// Size or power of the diagonal-Sigma test.
    LrtSigma,
    /// Size or power of the test that the first slope row is zero.
    LrtBeta,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Metric {
    Fisher,
    Euclidean,
}

#[derive(Args, Debug)]
#[command(next_help_heading = "Solver controls")]
struct Controls {
    /// Outer tolerance on the squared change of beta.
    #[arg(long, default_value_t = FitControls::default().eps_beta)]
    eps_beta: f64,
    /// Outer tolerance on the squared Frobenius change of Sigma.
    #[arg(long, default_value_t = FitControls::default().eps_sigma)]
    eps_sigma: f64,
    /// Maximum outer iterations.
    #[arg(long, default_value_t = FitControls::default().max_outer)]
    max_outer: usize,
    /// Relative change in the working objective that ends an inner loop.
    #[arg(long, default_value_t = FitControls::default().inner_tol)]
    inner_tol: f64,
    /// Maximum inner (beta, Sigma) sweeps per outer iteration.
    #[arg(long, default_value_t = FitControls::default().max_inner)]
    max_inner: usize,
    /// Inertia weight of the Sigma steps, in (0, 1).
    #[arg(long, default_value_t = FitControls::default().gamma)]
    inertia: f64,
    /// Step-size shrink factor in the line search.
    #[arg(long, default_value_t = FitControls::default().ls_shrink)]
    ls_shrink: f64,
    /// Step-size growth factor after an accepted step.
    #[arg(long, default_value_t = FitControls::default().ls_grow)]
    ls_grow: f64,
    /// Initial Sigma step size.
    #[arg(long, default_value_t = FitControls::default().alpha_init)]
    alpha_init: f64,
    /// Maximum projected-gradient steps per Sigma update.
    #[arg(long, default_value_t = FitControls::default().max_prox)]
    max_prox: usize,
    /// Geometry of the Sigma steps.
    #[arg(long, value_enum, default_value_t = Metric::Fisher)]
    sigma_metric: Metric,
    /// Convergence tolerance of the projection onto the constraint set.
    #[arg(long, default_value_t = FitControls::default().projection_tol)]
    projection_tol: f64,
    /// Iteration cap of the projection.
    #[arg(long, default_value_t = FitControls::default().projection_max_iter)]
    projection_max_iter: usize,
    /// Ridge added to Sigma before inverting it in the expansion-point update.
    #[arg(long, default_value_t = LatentControls::default().kappa)]
    kappa: f64,
    /// Shrinkage of the expansion points towards the linear predictor.
    #[arg(long, default_value_t = LatentControls::default().tau)]
    tau: f64,
    /// Gradient-norm tolerance of the expansion-point solver.
    #[arg(long, default_value_t = LatentControls::default().grad_tol)]
    latent_tol: f64,
    /// Newton iterations per expansion point.
    #[arg(long, default_value_t = LatentControls::default().max_newton)]
    max_newton: usize,
    /// Initial trust-region radius of the expansion-point solver.
    #[arg(long, default_value_t = LatentControls::default().trust_init)]
    trust_init: f64,
    /// Largest trust-region radius.
    #[arg(long, default_value_t = LatentControls::default().trust_max)]
    trust_max: f64,
}

impl Controls {
    fn build(&self) -> Result<FitControls> {
        let ctl = FitControls {
            eps_beta: self.eps_beta,
            eps_sigma: self.eps_sigma,
            max_outer: self.max_outer,
            inner_tol: self.inner_tol,
            max_inner: self.max_inner,
            gamma: self.inertia,
            ls_shrink: self.ls_shrink,
            ls_grow: self.ls_grow,
            alpha_init: self.alpha_init,
            max_prox: self.max_prox,
            sigma_metric: match self.sigma_metric {
                Metric::Fisher => SigmaMetric::Fisher,
                Metric::Euclidean => SigmaMetric::Euclidean,
            },
            projection_tol: self.projection_tol,
            projection_max_iter: self.projection_max_iter,
            latent: LatentControls {
                kappa: self.kappa,
                tau: self.tau,
                grad_tol: self.latent_tol,
                max_newton: self.max_newton,
                trust_init: self.trust_init,
                trust_max: self.trust_max,
            },
        };
        ctl.validate()?;
        Ok(ctl)
    }
}

fn parse_element(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected ROW,COL")?;
    let parse = |t: &str| match t.trim().parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("{t:?} is not a 1-based index")),
    };
    Ok((parse(a)?, parse(b)?))
}

/// Whether everything converged.
type Status = bool;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Status> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("starting the thread pool")?;
    }
    match cli.command {
        Command::Fit {
            input,
            constraints,
            output,
            controls,
        } => {
            let ctl = controls.build()?;
            let (model, data) = load(&input)?;
            let cspec = load_constraints(constraints.as_deref(), &model)?;
            let result = fit(&data, &model.spec, &cspec, &ctl)?;
            let file = fmt::FitFile::from_fit(&result);
            emit(&output, |w| write_line(w, &file.to_json()?))?;
            if !result.converged {
                eprintln!(
                    "warning: no convergence after {} outer iterations",
                    result.outer_iters
                );
            }
            Ok(result.converged)
        }
        Command::Test {
            input,
            hypothesis,
            output,
            controls,
        } => {
            let ctl = controls.build()?;
            let (model, data) = load(&input)?;
            let hyp = fmt::read_hypothesis(&hypothesis, model.r(), model.spec.q())
                .with_context(|| format!("reading {}", hypothesis.display()))?;
            let result = lrt(&data, &model.spec, &hyp, &ctl)?;
            emit(&output, |w| write_line(w, &fmt::test_result_to_json(&result)?))?;
            for warning in &result.warnings {
                eprintln!("warning: {warning}");
            }
            Ok(result.null_fit.converged && result.alt_fit.converged)
        }
        Command::Ci {
            input,
            constraints,
            element,
            level,
            output,
            controls,
        } => {
            let ctl = controls.build()?;
            let (model, data) = load(&input)?;
            let r = model.r();
            if element.0 > r || element.1 > r {
                bail!(
                    "element ({}, {}) is outside a {r} x {r} matrix",
                    element.0,
                    element.1
                );
            }
            let cspec = load_constraints(constraints.as_deref(), &model)?;
            let position = (element.0 - 1, element.1 - 1);
            let interval = profile_ci(&data, &model.spec, &cspec, position, level, &ctl)?;
            emit(&output, |w| {
                write_line(w, &fmt::interval_to_json(position, &interval)?)
            })?;
            Ok(true)
        }
        Command::Predict {
            fit,
            model,
            predictors,
            output,
        } => {
            let model = read_model(&model)?;
            let fitted = fmt::read_fit(&fit).with_context(|| format!("reading {}", fit.display()))?;
            let rows = fmt::read_predictors(&predictors, &model)
                .with_context(|| format!("reading {}", predictors.display()))?;
            let means = predict_with(&fitted.beta(), &fitted.sigma()?, &rows, &model.spec)?;
            emit(&output, |w| Ok(fmt::write_predictions(w, &means, model.r())?))?;
            Ok(true)
        }
        Command::Simulate {
            experiment,
            structure,
            rho,
            n,
            p,
            reps,
            seed,
            gamma,
            n_test,
            output,
            controls,
        } => {
            let ctl = controls.build()?;
            let mut design = SimDesign::standard(n, p, structure, rho, seed);
            let (converged, failures) = match experiment {
                Experiment::Predict => {
                    let table = run_prediction_experiment(&design, reps, n_test, &ctl)?;
                    emit(&output, |w| Ok(fmt::write_prediction_table(w, &table)?))?;
                    (table.rows.iter().all(|r| r.converged), table.failures)
                }
                Experiment::LrtSigma | Experiment::LrtBeta => {
                    let kind = if let Experiment::LrtBeta = experiment {
                        design.shared_predictors = true;
                        LrtKind::BetaRow
                    } else {
                        LrtKind::SigmaDiag
                    };
                    let table = run_lrt_experiment(&design, reps, kind, gamma, &ctl)?;
                    emit(&output, |w| Ok(fmt::write_lrt_table(w, &table)?))?;
                    eprintln!(
                        "rejection rate at level {}: {:.4} (MC s.e. {:.4})",
                        table.level,
                        table.rejection_rate(),
                        table.mc_standard_error()
                    );
                    (
                        table.rows.iter().all(|r| r.null_converged && r.alt_converged),
                        table.failures,
                    )
                }
            };
            for (rep, message) in &failures {
                eprintln!("warning: replication {} failed: {message}", rep + 1);
            }
            Ok(converged && failures.is_empty())
        }
    }
}

fn read_model(path: &Path) -> Result<Model> {
    fmt::read_model(path).with_context(|| format!("reading {}", path.display()))
}

fn load(input: &Input) -> Result<(Model, mixedreg::data::Dataset)> {
    let model = read_model(&input.model)?;
    let data =
        fmt::read_data(&input.data, &model).with_context(|| format!("reading {}", input.data.display()))?;
    Ok((model, data))
}

fn load_constraints(path: Option<&Path>, model: &Model) -> Result<mixedreg::constraints::ConstraintSpec> {
    match path {
        Some(path) => {
            fmt::read_constraints(path, model.r()).with_context(|| format!("reading {}", path.display()))
        }
        None => Ok(model.spec.identifiability_constraints(1.0)?),
    }
}

fn write_line(w: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(w, "{text}")?;
    Ok(())
}

fn emit(output: &Output, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match &output.out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(file);
            body(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            body(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}
