//! Orchestration of a single run: model parsing, identifiability, fitting,
//! prediction and the spectral decompositions.

use neoclassical::{
    fit_reml, identifiability_report, mean_model_matrix, parse_cov, parse_mean,
    periodogram_anova_with, yates_transform, CovarianceModel, CovarianceTerm, Divisor, FactorExpr,
    FitConfig, FittedModel, KernelKind, NewUnit, SpectralMethod,
};

use crate::dataset::Dataset;
use crate::error::{CliError, ErrorKind};
use crate::report::{
    ContrastRecord, DataSummary, Diagnostics, EffectsRecord, FactorSummary, GridSpec, ModelEcho,
    PredictionRecord, RunReport,
};

/// A report together with the error that ended the run, if any. Some
/// failures (identifiability, non-convergence) still carry a report.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: Option<RunReport>,
    pub error: Option<CliError>,
}

impl RunOutcome {
    pub fn ok(report: RunReport) -> Self {
        Self {
            report: Some(report),
            error: None,
        }
    }

    pub fn failed(error: CliError) -> Self {
        Self {
            report: None,
            error: Some(error),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.error.as_ref().map_or(0, CliError::exit_code)
    }
}

impl From<Result<RunOutcome, CliError>> for RunOutcome {
    fn from(r: Result<RunOutcome, CliError>) -> Self {
        r.unwrap_or_else(RunOutcome::failed)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PredictionRequests {
    /// New-unit specs such as `A=a1,x=1.5` or `A=NEW`.
    pub units: Vec<String>,
    /// Pairs of new-unit specs.
    pub contrasts: Vec<(String, String)>,
    /// Block terms such as `A` or `A.B`.
    pub effects: Vec<String>,
    /// `x=start:stop:step`.
    pub grid: Option<String>,
    pub allow_unconverged: bool,
}

impl PredictionRequests {
    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
            && self.contrasts.is_empty()
            && self.effects.is_empty()
            && self.grid.is_none()
    }
}

pub fn data_summary(ds: &Dataset) -> Result<DataSummary, CliError> {
    let (response, _) = ds.response()?;
    let design = ds.design()?;
    Ok(DataSummary {
        n_units: ds.n_units(),
        response: response.to_string(),
        factors: design
            .factors()
            .iter()
            .map(|(name, f)| FactorSummary {
                name: name.clone(),
                levels: f.n_levels(),
            })
            .collect(),
        covariates: design.covariates().keys().cloned().collect(),
    })
}

struct Model {
    mean: neoclassical::MeanModel,
    cov: CovarianceModel,
    echo: ModelEcho,
}

fn build_model(ds: &Dataset, mean_text: &str, cov_text: &str) -> Result<Model, CliError> {
    let mean_ast = parse_mean(mean_text).map_err(|e| formula_error("mean", e))?;
    let cov_ast = parse_cov(cov_text).map_err(|e| formula_error("cov", e))?;
    let design = ds.design()?;
    let mean = mean_model_matrix(&mean_ast.terms, &design).map_err(model_error)?;
    let cov = CovarianceModel::build(&cov_ast.terms, &design).map_err(model_error)?;
    let echo = ModelEcho {
        mean: mean_ast.to_string(),
        cov: cov_ast.to_string(),
        mean_columns: mean.columns().iter().map(|c| c.to_string()).collect(),
        mean_rank: mean.rank(),
    };
    Ok(Model { mean, cov, echo })
}

fn formula_error(which: &str, e: neoclassical::FormulaError) -> CliError {
    CliError::new(ErrorKind::Formula, format!("{which} formula: {e}"))
}

/// Name-resolution failures while building matrices are model errors.
fn model_error(e: neoclassical::Error) -> CliError {
    let err = CliError::from(e);
    match err.kind {
        ErrorKind::Data => CliError::new(ErrorKind::Model, err.message),
        _ => err,
    }
}

pub fn run_identify(ds: &Dataset, mean_text: &str, cov_text: &str) -> RunOutcome {
    (|| {
        let model = build_model(ds, mean_text, cov_text)?;
        let mut report = RunReport::new("identify", data_summary(ds)?);
        report.model = Some(model.echo.clone());
        let ident = identifiability_report(&model.mean, &model.cov)?;
        let error = (!ident.all_identifiable).then(|| {
            CliError::new(
                ErrorKind::Identifiability,
                format!("not identifiable: {}", ident.summary()),
            )
        });
        report.identifiability = Some(ident);
        Ok(RunOutcome {
            report: Some(report),
            error,
        })
    })()
    .into()
}

pub fn run_fit(
    ds: &Dataset,
    mean_text: &str,
    cov_text: &str,
    config: &FitConfig,
    requests: &PredictionRequests,
    command: &str,
) -> RunOutcome {
    (|| {
        let model = build_model(ds, mean_text, cov_text)?;
        let mut report = RunReport::new(command, data_summary(ds)?);
        report.model = Some(model.echo.clone());
        let ident = identifiability_report(&model.mean, &model.cov)?;
        let all_identifiable = ident.all_identifiable;
        let summary = ident.summary();
        report.identifiability = Some(ident);
        if !all_identifiable {
            return Ok(RunOutcome {
                report: Some(report),
                error: Some(CliError::new(
                    ErrorKind::Identifiability,
                    format!("not identifiable: {summary}"),
                )),
            });
        }
        let design = ds.design()?;
        let (_, y) = ds.response()?;
        let fit = fit_reml(&design, &model.mean, &model.cov, y, config)?;
        let converged = fit.converged;
        for (k, flagged) in fit.boundary_flags.iter().enumerate() {
            if *flagged && k > 0 {
                report.warn(
                    "boundary",
                    format!("{} estimated at the boundary (0)", fit.terms[k]),
                );
            }
        }
        if fit.degenerate {
            report.warn(
                "degenerate",
                "identity component pinned at its positive floor",
            );
        }
        if !converged {
            report.warn(
                "not_converged",
                format!("REML did not converge after {} iterations", fit.iterations),
            );
        }
        report.fit = Some(fit.clone());
        let mut fitted = FittedModel::new(design, model.mean, model.cov, y.to_vec(), fit)?;
        fitted.allow_unconverged = requests.allow_unconverged;
        let not_converged = || {
            CliError::new(
                ErrorKind::NotConverged,
                "REML did not converge; report emitted with the last iterate",
            )
        };
        if !converged && !requests.allow_unconverged {
            return Ok(RunOutcome {
                report: Some(report),
                error: Some(not_converged()),
            });
        }
        if !converged && !requests.is_empty() {
            report.warn(
                "unconverged_predictions",
                "predictions use an unconverged fit",
            );
        }
        predict_into(&mut report, &fitted, requests)?;
        Ok(RunOutcome {
            error: (!converged).then(not_converged),
            report: Some(report),
        })
    })()
    .into()
}

fn predict_into(
    report: &mut RunReport,
    fitted: &FittedModel,
    req: &PredictionRequests,
) -> Result<(), CliError> {
    let design = fitted.design();
    let unit = |spec: &str| -> Result<NewUnit, CliError> { Ok(NewUnit::parse(spec, design)?) };
    for spec in &req.units {
        report.predictions.push(PredictionRecord {
            unit: spec.clone(),
            prediction: fitted.blup_point(&unit(spec)?)?,
        });
    }
    for (a, b) in &req.contrasts {
        report.contrasts.push(ContrastRecord {
            unit_a: a.clone(),
            unit_b: b.clone(),
            prediction: fitted.blup_contrast(&unit(a)?, &unit(b)?)?,
        });
    }
    for term in &req.effects {
        let expr = factor_expr(term)?;
        let effects = fitted.effect_predict(&expr)?;
        report.effects.push(EffectsRecord {
            term: format!("E({expr})"),
            centered: neoclassical::centered_effects(&effects),
            effects,
        });
    }
    if let Some(text) = &req.grid {
        let (spec, grid) = parse_grid(text)?;
        let kernels: Vec<KernelKind> = fitted
            .covariance()
            .terms()
            .iter()
            .filter_map(|t| match t {
                CovarianceTerm::Kernel(k, x) if *x == spec.covariate => Some(*k),
                _ => None,
            })
            .collect();
        let spline = kernels
            .contains(&KernelKind::Cubic)
            .then(|| fitted.spline_property_check(&spec.covariate, &grid))
            .transpose()?;
        let piecewise_linear = kernels
            .contains(&KernelKind::Brownian)
            .then(|| fitted.piecewise_linear_check(&spec.covariate, &grid))
            .transpose()?;
        if spline.is_none() && piecewise_linear.is_none() {
            return Err(CliError::new(
                ErrorKind::Model,
                format!("--grid needs an spl3({0}) or bm({0}) term", spec.covariate),
            ));
        }
        report.diagnostics = Some(Diagnostics {
            grid: spec,
            spline,
            piecewise_linear,
        });
    }
    Ok(())
}

fn factor_expr(term: &str) -> Result<FactorExpr, CliError> {
    let ast = parse_cov(&format!("E({})", term.trim())).map_err(|_| {
        CliError::new(
            ErrorKind::Usage,
            format!("`{term}` is not a factor or A.B cross"),
        )
    })?;
    match ast
        .terms
        .into_iter()
        .find(|t| *t != CovarianceTerm::Identity)
    {
        Some(CovarianceTerm::Block(e)) => Ok(e),
        _ => Err(CliError::new(
            ErrorKind::Usage,
            format!("`{term}` is not a factor or A.B cross"),
        )),
    }
}

/// `x=start:stop:step` into the grid spec and its points.
pub fn parse_grid(text: &str) -> Result<(GridSpec, Vec<f64>), CliError> {
    let usage = || {
        CliError::new(
            ErrorKind::Usage,
            format!("grid `{text}` is not name=start:stop:step"),
        )
    };
    let (name, range) = text.split_once('=').ok_or_else(usage)?;
    let parts: Vec<f64> = range
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage())?;
    let [start, stop, step] = parts[..] else {
        return Err(usage());
    };
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || step <= 0.0 || stop <= start
    {
        return Err(usage());
    }
    let intervals = ((stop - start) / step).round();
    if intervals > 1e7 {
        return Err(CliError::new(
            ErrorKind::Usage,
            "grid has more than 10^7 points",
        ));
    }
    let points = intervals as usize + 1;
    let grid: Vec<f64> = (0..points).map(|i| start + i as f64 * step).collect();
    Ok((
        GridSpec {
            covariate: name.trim().to_string(),
            start,
            stop,
            step,
            points,
        },
        grid,
    ))
}

pub fn run_spectrum(ds: &Dataset, method: SpectralMethod) -> RunOutcome {
    (|| {
        let mut report = RunReport::new("spectrum", data_summary(ds)?);
        let (_, y) = ds.response()?;
        report.spectrum = Some(periodogram_anova_with(y, method)?);
        Ok(RunOutcome::ok(report))
    })()
    .into()
}

pub fn run_yates(ds: &Dataset, divisor: Divisor) -> RunOutcome {
    (|| {
        let mut report = RunReport::new("yates", data_summary(ds)?);
        let (_, y) = ds.response()?;
        report.yates = Some(yates_transform(y, divisor)?);
        Ok(RunOutcome::ok(report))
    })()
    .into()
}
