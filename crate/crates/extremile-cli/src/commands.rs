//! The five subcommand handlers.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::Serialize;

use extremile::{
    fit_covariances, fit_ordinary, fit_semisupervised, fit_supervised, sample_extremile,
    BasisSpec, CdfEstimate, ExtremileFit, GridSpec, Kernel, LabeledData, OrdinaryOptions,
    SimConfig, UnlabeledData, ZMap, SCHEMA_VERSION,
};

use crate::io::{emit_json, hex_digest, read_numeric_csv, ManifestClock, ManifestInput, NumericTable};
use crate::{CliError, ExtremileArgs, FitArgs, FitCommonArgs, FitSslArgs, OrdinaryArgs, SimulateArgs};

fn parse_basis(text: &str) -> Result<BasisSpec, CliError> {
    match text {
        "cubic" => Ok(BasisSpec::Polynomial { degree: 3 }),
        "asymmetric-logistic" => Ok(BasisSpec::AsymmetricLogistic),
        "normal-rayleigh" => Ok(BasisSpec::NormalRayleigh),
        other => {
            if let Some(deg) = other.strip_prefix("poly:") {
                let degree: usize = deg
                    .parse()
                    .map_err(|_| CliError::config(format!("invalid polynomial degree '{deg}'")))?;
                return Ok(BasisSpec::Polynomial { degree });
            }
            Err(CliError::config(format!(
                "unknown basis '{other}'; use poly:K, cubic, asymmetric-logistic, or normal-rayleigh"
            )))
        }
    }
}

fn parse_grid(text: &str) -> Result<GridSpec, CliError> {
    let (kind, count) = text
        .split_once(':')
        .ok_or_else(|| CliError::config(format!("invalid grid '{text}'; use gl:N or uniform:N")))?;
    let n: usize = count
        .parse()
        .map_err(|_| CliError::config(format!("invalid grid size '{count}'")))?;
    if n == 0 {
        return Err(CliError::config("grid size must be at least 1".to_string()));
    }
    match kind {
        "gl" => Ok(GridSpec::GaussLegendre(n)),
        "uniform" => Ok(GridSpec::Uniform(n)),
        other => Err(CliError::config(format!("unknown grid kind '{other}'; use gl or uniform"))),
    }
}

fn parse_zmap(text: &str) -> Result<ZMap, CliError> {
    match text {
        "constant" => Ok(ZMap::Constant),
        "linear" => Ok(ZMap::Linear),
        "interactions" => Ok(ZMap::Interactions),
        other => Err(CliError::config(format!(
            "unknown feature map '{other}'; use constant, linear, or interactions"
        ))),
    }
}

fn parse_kernel(text: &str) -> Result<Kernel, CliError> {
    match text {
        "gaussian" => Ok(Kernel::Gaussian),
        "epanechnikov" => Ok(Kernel::Epanechnikov),
        other => Err(CliError::config(format!(
            "unknown kernel '{other}'; use gaussian or epanechnikov"
        ))),
    }
}

/// Design matrix, response, coefficient names, covariate names.
type BuiltDesign = (Array2<f64>, Array1<f64>, Vec<String>, Vec<String>);

fn build_design(
    table: &NumericTable,
    response: Option<&str>,
    no_intercept: bool,
) -> Result<BuiltDesign, CliError> {
    if table.n_rows() == 0 {
        return Err(CliError::input(format!("{}: no data rows", table.path.display())));
    }
    let response_idx = match response {
        Some(name) => table.column_index(name)?,
        None => table.names.len() - 1,
    };
    let covariate_idx: Vec<usize> = (0..table.names.len()).filter(|&j| j != response_idx).collect();
    if covariate_idx.is_empty() {
        return Err(CliError::input(format!(
            "{}: no covariate columns besides the response",
            table.path.display()
        )));
    }
    let n = table.n_rows();
    let intercept = usize::from(!no_intercept);
    let mut x = Array2::ones((n, intercept + covariate_idx.len()));
    for (jj, &j) in covariate_idx.iter().enumerate() {
        for i in 0..n {
            x[[i, intercept + jj]] = table.columns[j][i];
        }
    }
    let y = Array1::from_vec(table.columns[response_idx].clone());
    let covariate_names: Vec<String> = covariate_idx.iter().map(|&j| table.names[j].clone()).collect();
    let mut names = Vec::new();
    if !no_intercept {
        names.push("(intercept)".to_string());
    }
    names.extend(covariate_names.iter().cloned());
    Ok((x, y, names, covariate_names))
}

/// A collinear design names its columns so the user can find the culprit.
fn enrich_design_error(e: CliError, names: &[String]) -> CliError {
    if e.code == 3 && e.message.contains("collinear") {
        CliError::new(3, format!("{}; design columns: {}", e.message, names.join(", ")))
    } else {
        e
    }
}

#[derive(Serialize)]
struct ExtremileOut {
    schema_version: u32,
    column: String,
    n: usize,
    estimates: Vec<ExtremilePoint>,
}

#[derive(Serialize)]
struct ExtremilePoint {
    tau: f64,
    extremile: f64,
}

pub fn cmd_extremile(args: ExtremileArgs) -> Result<(), CliError> {
    let clock = ManifestClock::start();
    let table = read_numeric_csv(&args.input)?;
    let column = match &args.column {
        Some(name) => table.column_index(name)?,
        None => {
            if table.names.len() == 1 {
                0
            } else {
                return Err(CliError::config(format!(
                    "{} has {} columns; pick one with --column",
                    args.input.display(),
                    table.names.len()
                )));
            }
        }
    };
    if table.n_rows() == 0 {
        return Err(CliError::input(format!("{}: no data rows", args.input.display())));
    }
    let mut estimates = Vec::new();
    for &tau in &args.taus {
        let value = sample_extremile(&table.columns[column], tau).map_err(CliError::from)?;
        estimates.push(ExtremilePoint { tau, extremile: value });
    }
    let out = ExtremileOut {
        schema_version: SCHEMA_VERSION,
        column: table.names[column].clone(),
        n: table.n_rows(),
        estimates,
    };
    let inputs = vec![ManifestInput::of(&table)];
    emit_json(&out, args.output.as_deref(), &clock, inputs, None)
}

#[derive(Serialize)]
struct FitOut {
    schema_version: u32,
    mode: String,
    names: Vec<String>,
    basis: String,
    grid: GridSpec,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_unlabeled: Option<usize>,
    estimates: Vec<FitPoint>,
    diagnostics: DiagnosticsOut,
    weights: WeightsOut,
}

#[derive(Serialize)]
struct FitPoint {
    tau: f64,
    beta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    se: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct DiagnosticsOut {
    iterations: usize,
    grad_norm: f64,
    kappa_final: f64,
    negative_weight_count: usize,
    nonconvex: bool,
    monotonicity_violation_fraction: f64,
}

#[derive(Serialize)]
struct WeightsOut {
    sum: f64,
    min: f64,
    max: f64,
    negative_count: usize,
}

fn fit_output(
    fit: &ExtremileFit,
    names: Vec<String>,
    n: usize,
    n_unlabeled: Option<usize>,
    ses: Option<Vec<Vec<f64>>>,
) -> FitOut {
    let estimates = fit
        .taus
        .iter()
        .enumerate()
        .map(|(k, &tau)| FitPoint {
            tau,
            beta: fit.betas.row(k).to_vec(),
            se: ses.as_ref().map(|s| s[k].clone()),
        })
        .collect();
    let weights = &fit.weights;
    FitOut {
        schema_version: SCHEMA_VERSION,
        mode: match fit.mode {
            extremile::FitMode::Supervised => "supervised".to_string(),
            extremile::FitMode::SemiSupervised => "semi-supervised".to_string(),
        },
        names,
        basis: fit.basis.name(),
        grid: fit.grid,
        n,
        n_unlabeled,
        estimates,
        diagnostics: DiagnosticsOut {
            iterations: fit.diagnostics.iterations,
            grad_norm: fit.diagnostics.grad_norm,
            kappa_final: fit.diagnostics.kappa_final,
            negative_weight_count: fit.diagnostics.negative_weight_count,
            nonconvex: fit.diagnostics.nonconvex,
            monotonicity_violation_fraction: fit.diagnostics.monotonicity.violation_fraction,
        },
        weights: WeightsOut {
            sum: weights.sum(),
            min: weights.iter().copied().fold(f64::INFINITY, f64::min),
            max: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            negative_count: weights.iter().filter(|&&w| w < 0.0).count(),
        },
    }
}

fn fit_options_from(common: &FitCommonArgs) -> Result<(BasisSpec, extremile::FitOptions), CliError> {
    let basis = parse_basis(&common.basis)?;
    let grid = parse_grid(&common.grid)?;
    if !(common.grad_tol > 0.0) {
        return Err(CliError::config("grad-tol must be positive".to_string()));
    }
    if common.max_iter == 0 {
        return Err(CliError::config("max-iter must be at least 1".to_string()));
    }
    let opts = extremile::FitOptions {
        grid,
        grad_tol: common.grad_tol,
        max_iter: common.max_iter,
        ..extremile::FitOptions::default()
    };
    Ok((basis, opts))
}

pub fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let clock = ManifestClock::start();
    let common = args.common;
    let table = read_numeric_csv(&common.input)?;
    let (x, y, names, _) = build_design(&table, common.response.as_deref(), common.no_intercept)?;
    let n = x.nrows();
    let data = LabeledData::new(x, y).map_err(CliError::from)?;
    let (basis, opts) = fit_options_from(&common)?;
    let fit = fit_supervised(&data, &basis, &common.taus, &opts)
        .map_err(CliError::from)
        .map_err(|e| enrich_design_error(e, &names))?;
    let ses = if common.se {
        let covs = fit_covariances(&fit, &data, None).map_err(CliError::from)?;
        Some(covs.iter().map(|c| c.se.to_vec()).collect())
    } else {
        None
    };
    let out = fit_output(&fit, names, n, None, ses);
    let inputs = vec![ManifestInput::of(&table)];
    emit_json(&out, common.output.as_deref(), &clock, inputs, None)
}

pub fn cmd_fit_ssl(args: FitSslArgs) -> Result<(), CliError> {
    let clock = ManifestClock::start();
    let common = args.common;
    let table = read_numeric_csv(&common.input)?;
    let (x, y, names, covariate_names) =
        build_design(&table, common.response.as_deref(), common.no_intercept)?;
    let n = x.nrows();
    let data = LabeledData::new(x, y).map_err(CliError::from)?;

    let pool_table = read_numeric_csv(&args.unlabeled)?;
    if pool_table.names != covariate_names {
        return Err(CliError::schema(format!(
            "{}: unlabeled columns [{}] do not match the labeled covariates [{}]",
            args.unlabeled.display(),
            pool_table.names.join(", "),
            covariate_names.join(", ")
        )));
    }
    let pool_n = pool_table.n_rows();
    let intercept = usize::from(!common.no_intercept);
    let mut pool_x = Array2::ones((pool_n, intercept + covariate_names.len()));
    for jj in 0..covariate_names.len() {
        for i in 0..pool_n {
            pool_x[[i, intercept + jj]] = pool_table.columns[jj][i];
        }
    }
    let pool = UnlabeledData::new(pool_x).map_err(CliError::from)?;

    let zmap = parse_zmap(&args.zmap)?;
    let (basis, opts) = fit_options_from(&common)?;
    let fit = fit_semisupervised(&data, &pool, &zmap, &basis, &common.taus, &opts)
        .map_err(CliError::from)
        .map_err(|e| enrich_design_error(e, &names))?;
    let ses = if common.se {
        let covs = fit_covariances(&fit, &data, Some((&pool, &zmap))).map_err(CliError::from)?;
        Some(covs.iter().map(|c| c.se.to_vec()).collect())
    } else {
        None
    };
    let out = fit_output(&fit, names, n, Some(pool_n), ses);
    let inputs = vec![ManifestInput::of(&table), ManifestInput::of(&pool_table)];
    emit_json(&out, common.output.as_deref(), &clock, inputs, None)
}

#[derive(Serialize)]
struct OrdinaryOut {
    schema_version: u32,
    names: Vec<String>,
    tau: f64,
    beta: Vec<f64>,
    kernel: Kernel,
    bandwidths: Vec<f64>,
    leave_one_out: bool,
    weight_min: f64,
    weight_max: f64,
}

pub fn cmd_ordinary(args: OrdinaryArgs) -> Result<(), CliError> {
    let clock = ManifestClock::start();
    let table = read_numeric_csv(&args.input)?;
    let (x, y, names, _) = build_design(&table, args.response.as_deref(), args.no_intercept)?;
    let data = LabeledData::new(x, y).map_err(CliError::from)?;
    if data.n() < 10 {
        eprintln!(
            "warning: only {} observations; the kernel CDF estimate will be unstable",
            data.n()
        );
    }
    let kernel = parse_kernel(&args.kernel)?;
    let bandwidths = if args.bandwidths == "auto" {
        None
    } else {
        let parsed: Result<Vec<f64>, _> = args.bandwidths.split(',').map(str::parse::<f64>).collect();
        let values = parsed.map_err(|_| {
            CliError::config(format!("invalid bandwidth list '{}'", args.bandwidths))
        })?;
        if values.iter().any(|&h| !(h > 0.0)) {
            return Err(CliError::config("bandwidths must be positive".to_string()));
        }
        Some(values)
    };
    let opts = OrdinaryOptions {
        bandwidths,
        kernel,
        leave_one_out: args.leave_one_out,
        cdf: CdfEstimate::NadarayaWatson,
    };
    let fit = fit_ordinary(&data, args.tau, &opts)
        .map_err(CliError::from)
        .map_err(|e| enrich_design_error(e, &names))?;
    let out = OrdinaryOut {
        schema_version: SCHEMA_VERSION,
        names,
        tau: args.tau,
        beta: fit.beta.to_vec(),
        kernel,
        bandwidths: fit.bandwidths.clone(),
        leave_one_out: args.leave_one_out,
        weight_min: fit.weights.iter().copied().fold(f64::INFINITY, f64::min),
        weight_max: fit.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let inputs = vec![ManifestInput::of(&table)];
    emit_json(&out, args.output.as_deref(), &clock, inputs, None)
}

pub fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let clock = ManifestClock::start();
    let raw = std::fs::read(&args.config)
        .map_err(|e| CliError::input(format!("{}: {e}", args.config.display())))?;
    let config: SimConfig = serde_json::from_slice(&raw)
        .map_err(|e| CliError::config(format!("{}: {e}", args.config.display())))?;
    let summary = extremile::run_replications(&config).map_err(CliError::from)?;

    std::fs::create_dir_all(&args.output_dir)
        .map_err(|e| CliError::input(format!("{}: {e}", args.output_dir.display())))?;
    let summary_path = args.output_dir.join("summary.json");
    let reps_path = args.output_dir.join("reps.csv");
    let table_path = args.output_dir.join("table.txt");
    let manifest_path = args.output_dir.join("manifest.json");

    let summary_text = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::new(1, format!("cannot serialize summary: {e}")))?;
    std::fs::write(&summary_path, summary_text.as_bytes())
        .map_err(|e| CliError::input(format!("{}: {e}", summary_path.display())))?;

    write_reps_csv(&reps_path, &summary)?;

    let tables = summary.render_tables();
    std::fs::write(&table_path, tables.as_bytes())
        .map_err(|e| CliError::input(format!("{}: {e}", table_path.display())))?;
    if args.text {
        print!("{tables}");
    }

    let manifest = clock.manifest(
        vec![ManifestInput {
            path: args.config.display().to_string(),
            sha256: hex_digest(&raw),
            bytes: raw.len(),
        }],
        vec![
            summary_path.display().to_string(),
            reps_path.display().to_string(),
            table_path.display().to_string(),
        ],
        Some(config.base_seed),
    );
    let manifest_text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::new(1, format!("cannot serialize manifest: {e}")))?;
    std::fs::write(&manifest_path, manifest_text.as_bytes())
        .map_err(|e| CliError::input(format!("{}: {e}", manifest_path.display())))?;
    Ok(())
}

fn write_reps_csv(path: &Path, summary: &extremile::SimSummary) -> Result<(), CliError> {
    let p = summary
        .records
        .iter()
        .map(|r| r.estimate.len())
        .max()
        .unwrap_or(0);
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let mut header = vec![
        "rep".to_string(),
        "tau".to_string(),
        "method".to_string(),
        "n_unlabeled".to_string(),
        "tae".to_string(),
    ];
    for j in 0..p {
        header.push(format!("b{j}"));
    }
    writer
        .write_record(&header)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    for rec in &summary.records {
        let mut row = vec![
            rec.rep.to_string(),
            format!("{}", rec.tau),
            rec.method.label().to_string(),
            rec.n_unlabeled.to_string(),
            rec.tae.map(|v| format!("{v}")).unwrap_or_default(),
        ];
        for j in 0..p {
            row.push(rec.estimate.get(j).map(|v| format!("{v}")).unwrap_or_default());
        }
        writer
            .write_record(&row)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(())
}
