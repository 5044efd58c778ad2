//! CSV ingestion, JSON output, and the run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// A parsed numeric CSV: header names and column-major data.
pub struct NumericTable {
    pub path: PathBuf,
    pub names: Vec<String>,
    /// `columns[j][i]` is row `i` of column `j`.
    pub columns: Vec<Vec<f64>>,
    pub sha256: String,
    pub bytes: usize,
}

impl NumericTable {
    pub fn n_rows(&self) -> usize {
        self.columns.first().map(Vec::len).unwrap_or(0)
    }

    pub fn column_index(&self, name: &str) -> Result<usize, CliError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                CliError::input(format!(
                    "{}: no column named '{}'; available: {}",
                    self.path.display(),
                    name,
                    self.names.join(", ")
                ))
            })
    }
}

/// Read a CSV file that must have a header row and numeric body. Decimal
/// separator is '.', field separator is ','. Parse failures name the line
/// and column.
pub fn read_numeric_csv(path: &Path) -> Result<NumericTable, CliError> {
    let raw = std::fs::read(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let sha256 = hex_digest(&raw);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(raw.as_slice());
    let headers = reader
        .headers()
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
        .clone();
    if headers.is_empty() {
        return Err(CliError::input(format!("{}: empty header row", path.display())));
    }
    let names: Vec<String> = headers.iter().map(str::to_string).collect();
    for (j, name) in names.iter().enumerate() {
        if name.is_empty() {
            return Err(CliError::input(format!(
                "{}: header field {} is empty",
                path.display(),
                j + 1
            )));
        }
        if names[..j].contains(name) {
            return Err(CliError::input(format!(
                "{}: duplicate column name '{name}'",
                path.display()
            )));
        }
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for record in reader.records() {
        let record = record.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let line = record
            .position()
            .map(|p| p.line().to_string())
            .unwrap_or_else(|| "?".to_string());
        if record.len() != names.len() {
            return Err(CliError::input(format!(
                "{}: line {line}: expected {} fields, found {}",
                path.display(),
                names.len(),
                record.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| {
                CliError::input(format!(
                    "{}: line {line}: column '{}': cannot parse '{field}' as a number",
                    path.display(),
                    names[j]
                ))
            })?;
            if !value.is_finite() {
                return Err(CliError::input(format!(
                    "{}: line {line}: column '{}': non-finite value '{field}'",
                    path.display(),
                    names[j]
                )));
            }
            columns[j].push(value);
        }
    }
    Ok(NumericTable {
        path: path.to_path_buf(),
        names,
        columns,
        sha256,
        bytes: raw.len(),
    })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sidecar describing how an output was produced.
#[derive(Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub command: Vec<String>,
    pub inputs: Vec<ManifestInput>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
    pub threads: usize,
    pub started_unix_seconds: u64,
    pub elapsed_seconds: f64,
}

#[derive(Serialize)]
pub struct ManifestInput {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

impl ManifestInput {
    pub fn of(table: &NumericTable) -> Self {
        Self {
            path: table.path.display().to_string(),
            sha256: table.sha256.clone(),
            bytes: table.bytes,
        }
    }
}

pub struct ManifestClock {
    start: std::time::Instant,
    started_unix_seconds: u64,
}

impl ManifestClock {
    pub fn start() -> Self {
        Self {
            start: std::time::Instant::now(),
            started_unix_seconds: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn manifest(
        &self,
        inputs: Vec<ManifestInput>,
        outputs: Vec<String>,
        base_seed: Option<u64>,
    ) -> RunManifest {
        RunManifest {
            schema_version: extremile::SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().collect(),
            inputs,
            outputs,
            base_seed,
            threads: rayon::current_num_threads(),
            started_unix_seconds: self.started_unix_seconds,
            elapsed_seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

/// Print JSON to stdout, or write it to `output` plus a manifest sidecar
/// `<output>.manifest.json`.
pub fn emit_json<T: Serialize>(
    value: &T,
    output: Option<&Path>,
    clock: &ManifestClock,
    inputs: Vec<ManifestInput>,
    base_seed: Option<u64>,
) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::new(1, format!("cannot serialize result: {e}")))?;
    match output {
        None => {
            println!("{text}");
        }
        Some(path) => {
            std::fs::write(path, text.as_bytes())
                .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            let manifest = clock.manifest(inputs, vec![path.display().to_string()], base_seed);
            let manifest_path = manifest_path_for(path);
            let manifest_text = serde_json::to_string_pretty(&manifest)
                .map_err(|e| CliError::new(1, format!("cannot serialize manifest: {e}")))?;
            std::fs::write(&manifest_path, manifest_text.as_bytes())
                .map_err(|e| CliError::input(format!("{}: {e}", manifest_path.display())))?;
        }
    }
    Ok(())
}

pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}
