//! Run configuration: a TOML file, `--set key=value` overrides, then the
//! `--seed` and `--out` flags, in increasing precedence.

use std::path::{Path, PathBuf};

use clgt::explainer::ExplainerConfig;
use clgt::graphgen::{LevelThresholds, ScopeConfig};
use clgt::ingest::DEFAULT_WEEKS;
use clgt::model::ClgtConfig;
use clgt::pipeline::DataPaths;
use clgt::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub model: ClgtConfig,
    pub train: TrainConfig,
    pub explain: ExplainOptions,
    pub evaluate: EvaluateOptions,
}

/// Input CSVs default to `<data_dir>/{commits,issues,grades,roster}.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub commits: Option<PathBuf>,
    pub issues: Option<PathBuf>,
    pub grades: Option<PathBuf>,
    pub roster: Option<PathBuf>,
    pub out: PathBuf,
    /// Defaults to `<out>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            commits: None,
            issues: None,
            grades: None,
            roster: None,
            out: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

impl PathsConfig {
    pub fn data(&self) -> DataPaths {
        let d = DataPaths::in_dir(&self.data_dir);
        DataPaths {
            commits: self.commits.clone().unwrap_or(d.commits),
            issues: self.issues.clone().unwrap_or(d.issues),
            grades: self.grades.clone().unwrap_or(d.grades),
            roster: self.roster.clone().unwrap_or(d.roster),
        }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.json"))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.out);
        for p in [&mut self.commits, &mut self.issues, &mut self.grades, &mut self.roster, &mut self.checkpoint]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub weeks: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { weeks: DEFAULT_WEEKS }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    #[serde(flatten)]
    pub scope: ScopeConfig,
    /// Fixed level cut points; computed from the data when absent.
    pub thresholds: Option<LevelThresholds>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainOptions {
    /// Week whose graph is explained; the last week when absent.
    pub week: Option<u32>,
    #[serde(flatten)]
    pub explainer: ExplainerConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    #[default]
    All,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateOptions {
    pub split: SplitChoice,
}

/// Command-line layers applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Relative paths in the file and in `--set` values are taken relative
    /// to the file's directory; `--out` relative to the working directory.
    pub fn load(file: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
        let (mut table, base) = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::invalid(format!("config {}: {e}", path.display())))?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e| CliError::parse(format!("config {}: {e}", path.display())))?;
                (table, path.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for set in &overrides.sets {
            apply_set(&mut table, set)?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::parse(format!("config: {}", e.message())))?;
        config.paths.resolve(&base);
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = &overrides.out {
            config.paths.out = out.clone();
        }
        config.train.seed = config.seed;
        config.explain.explainer.seed = config.seed;
        Ok(config)
    }

    /// Checks that do not need the data files.
    pub fn validate(&self) -> CliResult<()> {
        if self.data.weeks == 0 {
            return Err(CliError::invalid("data.weeks must be at least 1"));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.explain.explainer.validate()?;
        if let Some(t) = &self.graph.thresholds {
            t.validate()?;
        }
        if let Some(w) = self.explain.week {
            if w == 0 || w > self.data.weeks {
                return Err(CliError::invalid(format!("explain.week {w} outside 1..={}", self.data.weeks)));
            }
        }
        Ok(())
    }

    pub fn validate_inputs(&self) -> CliResult<DataPaths> {
        let paths = self.paths.data();
        for p in paths.all() {
            if !p.is_file() {
                return Err(CliError::invalid(format!("input file not found: {}", p.display())));
            }
        }
        Ok(paths)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_json()).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is read as a TOML literal and falls back to a
/// plain string.
pub fn apply_set(table: &mut toml::Table, set: &str) -> CliResult<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::parse(format!("--set `{set}`: expected key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::parse(format!("--set `{set}`: empty key segment")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::parse(format!("--set `{set}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_parses_literals_and_falls_back_to_strings() {
        let mut t = toml::Table::new();
        apply_set(&mut t, "train.max_epochs=12").unwrap();
        apply_set(&mut t, "paths.out=runs/a").unwrap();
        apply_set(&mut t, "graph.thresholds={addition=[0.1,0.2],deletion=[0.1,0.2],issue=[0.3,0.4]}").unwrap();
        let c: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(c.train.max_epochs, 12);
        assert_eq!(c.paths.out, PathBuf::from("runs/a"));
        assert_eq!(c.graph.thresholds.unwrap().issue, (0.3, 0.4));
    }

    #[test]
    fn set_rejects_malformed_keys() {
        let mut t = toml::Table::new();
        assert!(apply_set(&mut t, "no_equals").is_err());
        assert!(apply_set(&mut t, "a..b=1").is_err());
        apply_set(&mut t, "seed=1").unwrap();
        assert!(apply_set(&mut t, "seed.x=1").is_err());
    }

    #[test]
    fn toml_round_trip_and_stable_hash() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.model.layers = 3;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn seed_flag_propagates() {
        let o = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        let c = RunConfig::load(None, &o).unwrap();
        assert_eq!((c.seed, c.train.seed, c.explain.explainer.seed), (9, 9, 9));
    }
}
