//! Run configuration: one TOML file with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    /// Directory of grayscale PNG/PGM magnitude images.
    #[default]
    Images,
    /// Directory of fully sampled `.ksp` grids.
    Kspace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub kind: DataKind,
    pub dir: PathBuf,
    #[serde(default = "default_fraction")]
    pub split_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_fraction() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory.
    pub output: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses `text`, applies `key=value` overrides (dotted keys, TOML values;
    /// bare words are taken as strings) and validates the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text, overrides)?;
        // Relative paths are taken from the config file's directory.
        let base = path.parent().unwrap_or(Path::new(""));
        if config.output.is_relative() {
            config.output = base.join(&config.output);
        }
        if config.data.dir.is_relative() {
            config.data.dir = base.join(&config.data.dir);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.data.split_fraction) {
            return Err(Error::Config(format!(
                "data.split_fraction {} outside [0, 1]",
                self.data.split_fraction
            )));
        }
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("nonempty");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
output = "runs/a"
[data]
dir = "data"
[train]
epochs = 3
[train.mask]
pattern = "radial"
nominal_rate = 0.3
height = 32
width = 32
[train.network]
levels = 2
base_filters = 8
"#;

    #[test]
    fn parses_with_defaults_and_overrides() {
        let c = RunConfig::parse(BASE, &["train.lr0=0.002".into(), "train.mask.pattern=spiral".into()]).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr0, 0.002);
        assert_eq!(c.train.mask.pattern, crate::masks::Pattern::Spiral);
        assert_eq!(c.train.critic_steps, 5);
        assert_eq!(c.data.split_fraction, 0.8);
        let again = RunConfig::parse(&c.to_toml(), &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(&format!("{BASE}\nbogus = 1\n"), &[]).is_err());
        assert!(RunConfig::parse(BASE, &["train.nope=1".into()]).is_err());
        assert!(RunConfig::parse(BASE, &["train.epochs".into()]).is_err());
        assert!(RunConfig::parse(BASE, &["train.epochs=0".into()]).is_err());
    }
}
