//! `extremile`: linear extremile regression from the command line.
//!
//! Subcommands:
//! - `extremile`: sample extremile of one numeric column.
//! - `fit`: supervised regression fit, optionally with standard errors.
//! - `fit-ssl`: semi-supervised fit using an unlabeled covariate pool.
//! - `ordinary`: kernel-weighted least-squares baseline.
//! - `simulate`: seeded Monte Carlo replication harness.
//!
//! Exit codes: 0 success; 2 unreadable or malformed input data; 3 numerical
//! failure (collinear design, non-convergence, no kernel mass); 4 schema
//! mismatch between files; 5 invalid flags or configuration.

// `!(x > 0.0)`-style guards intentionally reject NaN along with the
// out-of-range values; the `partial_cmp` rewrite clippy suggests hides that.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod io;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use extremile::ExtremileError;

#[derive(Parser, Debug)]
#[command(name = "extremile", version, about = "Linear extremile regression")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Sample extremile of one numeric CSV column.
    Extremile(ExtremileArgs),
    /// Fit the regression model on labeled data.
    Fit(FitArgs),
    /// Fit with semi-supervised weights from an unlabeled covariate pool.
    FitSsl(FitSslArgs),
    /// Kernel-weighted ordinary estimator.
    Ordinary(OrdinaryArgs),
    /// Run a seeded simulation study from a JSON config.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct ExtremileArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    input: std::path::PathBuf,
    /// Column to use; defaults to the only column.
    #[arg(long)]
    column: Option<String>,
    /// Comma-separated extremile orders in (0, 1).
    #[arg(long, value_delimiter = ',', required = true)]
    taus: Vec<f64>,
    /// Write the JSON result here instead of stdout (adds a manifest).
    #[arg(long)]
    output: Option<std::path::PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct FitCommonArgs {
    /// Input CSV with a header row; non-response columns are covariates.
    #[arg(long)]
    input: std::path::PathBuf,
    /// Response column; defaults to the last column.
    #[arg(long)]
    response: Option<String>,
    /// Comma-separated extremile orders in (0, 1).
    #[arg(long, value_delimiter = ',', required = true)]
    taus: Vec<f64>,
    /// Quantile basis: poly:K, cubic, asymmetric-logistic, normal-rayleigh.
    #[arg(long, default_value = "cubic")]
    basis: String,
    /// Integration rule: gl:N or uniform:N.
    #[arg(long, default_value = "gl:99")]
    grid: String,
    /// Do not prepend an intercept column.
    #[arg(long)]
    no_intercept: bool,
    /// Also compute sandwich standard errors.
    #[arg(long)]
    se: bool,
    /// Gradient tolerance for convergence.
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    /// Iteration cap per smoothing stage.
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Write the JSON result here instead of stdout (adds a manifest).
    #[arg(long)]
    output: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: FitCommonArgs,
}

#[derive(Args, Debug)]
struct FitSslArgs {
    #[command(flatten)]
    common: FitCommonArgs,
    /// Unlabeled covariate pool CSV; headers must match the labeled
    /// covariate columns exactly.
    #[arg(long)]
    unlabeled: std::path::PathBuf,
    /// Feature map for the projection weights.
    #[arg(long, default_value = "interactions")]
    zmap: String,
}

#[derive(Args, Debug)]
struct OrdinaryArgs {
    /// Input CSV with a header row; non-response columns are covariates.
    #[arg(long)]
    input: std::path::PathBuf,
    /// Response column; defaults to the last column.
    #[arg(long)]
    response: Option<String>,
    /// Extremile order in (0, 1).
    #[arg(long)]
    tau: f64,
    /// Kernel: gaussian or epanechnikov.
    #[arg(long, default_value = "gaussian")]
    kernel: String,
    /// Comma-separated bandwidths per covariate, or "auto".
    #[arg(long, default_value = "auto")]
    bandwidths: String,
    /// Exclude each observation from its own CDF estimate.
    #[arg(long)]
    leave_one_out: bool,
    /// Do not prepend an intercept column.
    #[arg(long)]
    no_intercept: bool,
    /// Write the JSON result here instead of stdout (adds a manifest).
    #[arg(long)]
    output: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Simulation config JSON (see the library's SimConfig).
    #[arg(long)]
    config: std::path::PathBuf,
    /// Directory for summary.json, reps.csv, table.txt, manifest.json.
    #[arg(long, default_value = ".")]
    output_dir: std::path::PathBuf,
    /// Print the text tables to stdout as well.
    #[arg(long)]
    text: bool,
}

/// A classified failure: message plus exit code.
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(2, message.into())
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self::new(3, message.into())
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(4, message.into())
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(5, message.into())
    }
}

impl From<ExtremileError> for CliError {
    fn from(e: ExtremileError) -> Self {
        let code = match &e {
            ExtremileError::NonFinite(_) => 2,
            ExtremileError::Singular(_) | ExtremileError::NonConvergence { .. } => 3,
            ExtremileError::Dimension(_) => 4,
            ExtremileError::Domain(_) | ExtremileError::Empty(_) => 5,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not failures.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(5);
        }
    };

    if let Err(e) = configure_threads() {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }

    let result = match cli.cmd {
        Cmd::Extremile(args) => commands::cmd_extremile(args),
        Cmd::Fit(args) => commands::cmd_fit(args),
        Cmd::FitSsl(args) => commands::cmd_fit_ssl(args),
        Cmd::Ordinary(args) => commands::cmd_ordinary(args),
        Cmd::Simulate(args) => commands::cmd_simulate(args),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

/// Honor EXTREMILE_THREADS for the rayon pool used by `simulate`.
fn configure_threads() -> Result<(), CliError> {
    if let Ok(raw) = std::env::var("EXTREMILE_THREADS") {
        let threads: usize = raw
            .parse()
            .map_err(|_| CliError::config(format!("EXTREMILE_THREADS must be a positive integer, got '{raw}'")))?;
        if threads == 0 {
            return Err(CliError::config("EXTREMILE_THREADS must be at least 1".to_string()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot configure {threads} threads: {e}")))?;
    }
    Ok(())
}
