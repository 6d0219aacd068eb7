use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

/// `# key=value` lines recording the command and its full configuration.
pub fn header<C: Serialize>(command: &str, config: &C) -> CliResult<Vec<String>> {
    let value = toml::Value::try_from(config).map_err(|e| CliError::Config(e.to_string()))?;
    let mut lines = vec![format!("# command={command}")];
    if let toml::Value::Table(table) = value {
        for (key, v) in table {
            let text = match v {
                toml::Value::String(s) => s,
                other => other.to_string(),
            };
            lines.push(format!("# {key}={text}"));
        }
    }
    Ok(lines)
}

pub fn prepare_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_csv(path: &Path, header: &[String], columns: &[&str], rows: &[Vec<String>]) -> CliResult<PathBuf> {
    let mut file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    for line in header {
        writeln!(file, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(columns).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        writer.write_record(row).map_err(|e| CliError::io(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> CliResult<PathBuf> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Full-precision rendering that round-trips through `str::parse`.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}
