use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use neoclassical::{Divisor, FitConfig, SpectralMethod};

use crate::dataset::{load_csv, Declarations};
use crate::error::{CliError, ErrorKind};
use crate::run::{run_fit, run_identify, run_spectrum, run_yates, PredictionRequests, RunOutcome};
use crate::text;

#[derive(Debug, Parser)]
#[command(
    name = "neoanova",
    version,
    about = "Factorial models linear in the mean and in the covariance"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Identifiability check, then REML fit and GLS coefficients.
    Fit(FitArgs),
    /// Identifiability report only.
    Identify(ModelArgs),
    /// Fit, then predictions for new units, contrasts, effects or curve diagnostics.
    Predict(PredictArgs),
    /// Fourier decomposition of the response's total sum of squares (rows in time order).
    Spectrum(SpectrumArgs),
    /// Yates' algorithm on a 2^n factorial response in standard order.
    Yates(YatesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file: comma separated, header row, no quoting.
    pub path: PathBuf,
    #[arg(long)]
    pub response: Option<String>,
    /// Columns read as factors (comma separated, repeatable).
    #[arg(long, value_delimiter = ',')]
    pub factors: Vec<String>,
    /// Columns read as covariates (comma separated, repeatable).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Reserved; no run uses random numbers.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Mean formula, e.g. "1 + A + x".
    #[arg(long)]
    pub mean: String,
    /// Covariance formula, e.g. "I + E(A) + spl3(x)".
    #[arg(long)]
    pub cov: String,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 200)]
    pub max_iterations: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    /// New unit, e.g. "A=a1,x=1.5" or "A=NEW" (repeatable).
    #[arg(long = "new")]
    pub new_units: Vec<String>,
    /// Two new units separated by ';', e.g. "A=a1;A=a2" (repeatable).
    #[arg(long)]
    pub contrast: Vec<String>,
    /// Block term whose level effects to predict, e.g. "A" (repeatable).
    #[arg(long)]
    pub effects: Vec<String>,
    /// Curve diagnostic grid "x=start:stop:step" for spl3/bm terms.
    #[arg(long)]
    pub grid: Option<String>,
    /// Predict even when REML did not converge.
    #[arg(long)]
    pub allow_unconverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Direct,
    Fft,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "direct")]
    pub method: Method,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DivisorArg {
    Totals,
    Effects,
}

#[derive(Debug, Args)]
pub struct YatesArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "totals")]
    pub divisor: DivisorArg,
}

/// What a process invocation writes and returns.
#[derive(Debug, Clone)]
pub struct Output {
    pub stdout: String,
    pub stderr: Option<String>,
    pub code: i32,
}

impl DataArgs {
    fn declarations(&self) -> Declarations {
        Declarations {
            response: self.response.clone(),
            factors: self.factors.clone(),
            covariates: self.covariates.clone(),
        }
    }
}

fn load(args: &DataArgs) -> Result<crate::dataset::Dataset, CliError> {
    load_csv(&args.path, &args.declarations())
}

fn fit_config(max_iterations: usize) -> Result<FitConfig, CliError> {
    let config = FitConfig {
        max_iterations,
        ..FitConfig::default()
    };
    config
        .validate()
        .map_err(|e| CliError::new(ErrorKind::Usage, e.to_string()))?;
    Ok(config)
}

fn split_contrast(spec: &str) -> Result<(String, String), CliError> {
    spec.split_once(';')
        .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
        .ok_or_else(|| {
            CliError::new(
                ErrorKind::Usage,
                format!("contrast `{spec}` needs two units separated by ';'"),
            )
        })
}

pub fn execute(cli: &Cli) -> Output {
    let (format, outcome) = match &cli.command {
        Command::Fit(a) => (
            a.model.data.format,
            fit_outcome(a, &PredictionRequests::default(), "fit"),
        ),
        Command::Identify(a) => (
            a.data.format,
            load(&a.data)
                .map(|ds| run_identify(&ds, &a.mean, &a.cov))
                .into(),
        ),
        Command::Predict(a) => (a.fit.model.data.format, predict_outcome(a)),
        Command::Spectrum(a) => (
            a.data.format,
            load(&a.data)
                .map(|ds| {
                    let m = match a.method {
                        Method::Direct => SpectralMethod::Direct,
                        Method::Fft => SpectralMethod::Fft,
                    };
                    run_spectrum(&ds, m)
                })
                .into(),
        ),
        Command::Yates(a) => (
            a.data.format,
            load(&a.data)
                .map(|ds| {
                    let d = match a.divisor {
                        DivisorArg::Totals => Divisor::Totals,
                        DivisorArg::Effects => Divisor::Effects,
                    };
                    run_yates(&ds, d)
                })
                .into(),
        ),
    };
    let stdout = match (&outcome.report, format) {
        (Some(r), Format::Json) => r.to_json(),
        (Some(r), Format::Text) => text::render(r),
        (None, _) => String::new(),
    };
    Output {
        stdout,
        stderr: outcome.error.as_ref().map(CliError::diagnostic_line),
        code: outcome.exit_code(),
    }
}

fn fit_outcome(a: &FitArgs, requests: &PredictionRequests, command: &str) -> RunOutcome {
    (|| {
        let ds = load(&a.model.data)?;
        let config = fit_config(a.max_iterations)?;
        Ok(run_fit(
            &ds,
            &a.model.mean,
            &a.model.cov,
            &config,
            requests,
            command,
        ))
    })()
    .into()
}

fn predict_outcome(a: &PredictArgs) -> RunOutcome {
    (|| {
        let requests = PredictionRequests {
            units: a.new_units.clone(),
            contrasts: a
                .contrast
                .iter()
                .map(|c| split_contrast(c))
                .collect::<Result<_, _>>()?,
            effects: a.effects.clone(),
            grid: a.grid.clone(),
            allow_unconverged: a.allow_unconverged,
        };
        if requests.is_empty() {
            return Err(CliError::new(
                ErrorKind::Usage,
                "predict needs at least one of --new, --contrast, --effects, --grid",
            ));
        }
        Ok(fit_outcome(&a.fit, &requests, "predict"))
    })()
    .into()
}

/// Parses arguments and runs; clap usage errors map to exit code 1.
pub fn run_from_args<I, T>(args: I) -> Output
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                Output {
                    stdout: e.to_string(),
                    stderr: None,
                    code: 0,
                }
            }
            _ => {
                let first = e.to_string();
                let line = first
                    .lines()
                    .next()
                    .unwrap_or("invalid arguments")
                    .trim_start_matches("error: ");
                Output {
                    stdout: String::new(),
                    stderr: Some(CliError::new(ErrorKind::Usage, line).diagnostic_line()),
                    code: 1,
                }
            }
        },
    }
}
