use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde_json::{Map, Number, Value};
use sipm_core::io::CsvTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

fn cell(s: &str) -> Value {
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    match s.parse::<f64>() {
        Ok(x) => Number::from_f64(x).map_or(Value::Null, Value::Number),
        Err(_) => Value::String(s.to_string()),
    }
}

/// Rows as an array of objects keyed by column name; numeric cells become numbers.
pub fn table_json(t: &CsvTable) -> Value {
    Value::Array(
        t.rows
            .iter()
            .map(|row| {
                let obj: Map<String, Value> = t
                    .header
                    .iter()
                    .zip(row)
                    .map(|(h, v)| (h.clone(), cell(v)))
                    .collect();
                Value::Object(obj)
            })
            .collect(),
    )
}

pub fn render_table(t: &CsvTable, format: Format) -> Result<String> {
    Ok(match format {
        Format::Csv => t.to_csv(),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&table_json(t))?;
            s.push('\n');
            s
        }
    })
}

/// Write `{stem}.csv` or `{stem}.json` into `dir`.
pub fn write_table(dir: &Path, stem: &str, t: &CsvTable, format: Format) -> Result<PathBuf> {
    let path = dir.join(format!("{stem}.{}", format.extension()));
    fs::write(&path, render_table(t, format)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

/// Exit code and one-line JSON diagnostic for a failed command.
pub fn error_report(err: &anyhow::Error) -> (i32, String) {
    let core = err
        .chain()
        .find_map(|e| e.downcast_ref::<sipm_core::Error>());
    let message = format!("{err:#}");
    let (code, kind, key) = match core {
        Some(sipm_core::Error::Config { key, .. }) => (2, "config", Some(key.clone())),
        Some(e) => (1, core_kind(e), None),
        None => (1, "runtime", None),
    };
    let mut obj = Map::new();
    obj.insert("error".into(), Value::String(kind.into()));
    if let Some(k) = key {
        obj.insert("key".into(), Value::String(k));
    }
    obj.insert("message".into(), Value::String(message));
    obj.insert("exit_code".into(), Value::Number(code.into()));
    (code, Value::Object(obj).to_string())
}

fn core_kind(e: &sipm_core::Error) -> &'static str {
    use sipm_core::Error::*;
    match e {
        Domain(_) => "domain",
        Size { .. } => "size",
        Fit(_) => "fit",
        Estimation(_) => "estimation",
        Classification(_) => "classification",
        Config { .. } => "config",
        Format(_) => "format",
        Io(_) => "io",
    }
}
