//! Simulation configuration tree and its TOML representation.
//!
//! Every section and field is optional in a file; missing values take the
//! defaults below. Unknown keys are rejected. [`load_config`] also reports
//! which leaf keys were filled from defaults so they can be recorded with
//! the results.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analog::{ChainConfig, TemplateConfig};
use crate::device::{ApdConfig, SipmConfig};
use crate::discriminate::DiscriminatorConfig;
use crate::source::SourceConfig;
use crate::stats::{EfficiencyModel, DEFAULT_N_MAX};
use crate::{Error, Result};

/// Keys whose value is a table or array treated as a single value.
const OPAQUE_KEYS: &[&str] = &["device.dark_table", "stats.efficiency"];
/// Keys absent from the serialized defaults because they default to "unset".
const OPTIONAL_KEYS: &[&str] = &["device.temperature_c", "discriminator.gain_mv"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    /// Truncation of distributions.
    pub n_max: usize,
    /// Renormalize truncated cross-talk distributions to unit mass.
    pub renormalize: bool,
    /// Efficiency model used by the high-rate pulsed predictions.
    pub efficiency: EfficiencyModel,
    /// Low-rate efficiency used by the constant model and the power meter.
    pub eta_low_rate: f64,
    /// Resolving time of the counting chain, s.
    pub tau_res: f64,
    /// Optical wavelength, m.
    pub wavelength: f64,
    /// Count-rate ceiling for the constant-efficiency fit, Hz.
    pub rate_cutoff: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            n_max: DEFAULT_N_MAX,
            renormalize: false,
            efficiency: EfficiencyModel::pulsed_default(),
            eta_low_rate: crate::stats::LOW_RATE_ETA,
            tau_res: 2.13e-9,
            wavelength: 532e-9,
            rate_cutoff: crate::stats::fit::DEFAULT_RATE_CUTOFF,
        }
    }
}

impl StatsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::config("stats.n_max", "must be >= 1"));
        }
        self.efficiency
            .validate()
            .map_err(|e| Error::config("stats.efficiency", e.to_string()))?;
        if !(self.eta_low_rate > 0.0 && self.eta_low_rate <= 1.0) {
            return Err(Error::config("stats.eta_low_rate", "must be in (0, 1]"));
        }
        if !(self.tau_res >= 0.0) {
            return Err(Error::config("stats.tau_res", "must be >= 0"));
        }
        if !(self.wavelength > 0.0) {
            return Err(Error::config("stats.wavelength", "must be > 0"));
        }
        if !(self.rate_cutoff > 0.0) {
            return Err(Error::config("stats.rate_cutoff", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Master seed; every random stage derives its own seed from it.
    pub seed: u64,
    pub source: SourceConfig,
    pub device: SipmConfig,
    pub apd: ApdConfig,
    pub template: TemplateConfig,
    pub chain: ChainConfig,
    pub discriminator: DiscriminatorConfig,
    pub stats: StatsConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            source: SourceConfig::default(),
            device: SipmConfig::default(),
            apd: ApdConfig::default(),
            template: TemplateConfig::default(),
            chain: ChainConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::config(
                "seed",
                format!(
                    "{} exceeds the largest TOML integer {}",
                    self.seed,
                    i64::MAX
                ),
            ));
        }
        self.source.validate()?;
        self.device.validate()?;
        self.apd.validate()?;
        self.chain.validate()?;
        self.discriminator.validate()?;
        self.stats.validate()?;
        let t = &self.template;
        if !(t.tau_rise > 0.0 && t.tau_fall > t.tau_rise) {
            return Err(Error::config(
                "template.tau_rise, template.tau_fall",
                "need 0 < tau_rise < tau_fall",
            ));
        }
        if !(t.peak_mv > 0.0) {
            return Err(Error::config("template.peak_mv", "must be > 0"));
        }
        Ok(())
    }

    /// Canonical TOML text.
    pub fn to_toml(&self) -> Result<String> {
        self.validate()?;
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Every leaf key of the schema, dotted.
    pub fn schema_keys() -> BTreeSet<String> {
        let value = toml::Table::try_from(SimConfig::default()).expect("defaults serialize");
        let mut keys = BTreeSet::new();
        leaf_keys(&value, "", &mut keys);
        keys.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
        keys
    }
}

fn leaf_keys(table: &toml::Table, prefix: &str, out: &mut BTreeSet<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) if !OPAQUE_KEYS.contains(&path.as_str()) => {
                leaf_keys(t, &path, out)
            }
            _ => {
                out.insert(path);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: SimConfig,
    /// Leaf keys not present in the file, sorted.
    pub defaulted: Vec<String>,
}

pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        Error::config(key_at(text, e.span()), e.message().to_string())
    })?;
    let schema = SimConfig::schema_keys();
    let mut present = BTreeSet::new();
    leaf_keys(&raw, "", &mut present);
    // a known section given as a scalar, or an unknown key anywhere
    if let Some(bad) = present.iter().find(|k| !schema.contains(*k)) {
        let is_section = schema.iter().any(|s| s.starts_with(&format!("{bad}.")));
        let message = if is_section {
            "expected a table"
        } else {
            "unknown key"
        };
        return Err(Error::config(bad.clone(), message));
    }
    let config: SimConfig = toml::from_str(text)
        .map_err(|e| Error::config(key_at(text, e.span()), e.message().to_string()))?;
    config.validate()?;
    let defaulted = schema
        .into_iter()
        .filter(|k| !present.contains(k))
        .collect();
    Ok(LoadedConfig { config, defaulted })
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn save_config(cfg: &SimConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_toml()?)?;
    Ok(())
}

/// Dotted key at a byte offset of a TOML document, with its line number.
fn key_at(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    let Some(span) = span else {
        return "<document>".into();
    };
    let start = span.start.min(text.len());
    let line_no = text[..start].matches('\n').count() + 1;
    let section = text[..start].lines().rev().find_map(|l| {
        let l = l.trim();
        (l.starts_with('[') && l.ends_with(']'))
            .then(|| l.trim_matches(['[', ']']).trim().to_string())
    });
    let line = text[start..].lines().next().unwrap_or("");
    let line_start = text[..start].rfind('\n').map_or(0, |i| i + 1);
    let full_line = &text[line_start..start + line.len()];
    let key = full_line.split_once('=').map(|(k, _)| k.trim().to_string());
    match (section, key) {
        (Some(s), Some(k)) => format!("{s}.{k} (line {line_no})"),
        (None, Some(k)) => format!("{k} (line {line_no})"),
        (Some(s), None) => format!("{s} (line {line_no})"),
        (None, None) => format!("line {line_no}"),
    }
}
