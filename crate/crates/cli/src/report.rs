use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;

pub const REPORT_VERSION: &str = "report-v1";

/// Wraps `body` with the schema version, command, seed and config hash and
/// writes it to `path` or `<reports>/<command>.json`.
pub fn write(
    cfg: &RunConfig,
    command: &str,
    path: Option<&Path>,
    body: Value,
) -> Result<Value, CliError> {
    let report = json!({
        "version": REPORT_VERSION,
        "command": command,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "result": body,
    });
    let path: PathBuf = path.map_or_else(
        || cfg.reports_dir().join(format!("{command}.json")),
        Path::to_path_buf,
    );
    write_text(
        &path,
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    Ok(report)
}

/// Writes `text`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir.display().to_string()))?;
    }
    std::fs::write(path, text).map_err(CliError::io(path.display().to_string()))
}
