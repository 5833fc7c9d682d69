//! Run configuration: TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sormamba::data::{load_csv, synthetic_series, RawSeries, SplitFamily, SyntheticSpec};
use sormamba::model::ModelConfig;
use sormamba::train::TrainConfig;

use crate::CliError;

pub const OUTPUT_ENV: &str = "SORMAMBA_OUTPUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: Source,
    pub path: Option<PathBuf>,
    pub has_timestamp: bool,
    pub family: SplitFamily,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            path: None,
            has_timestamp: true,
            family: SplitFamily::Ratio712,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub permutations: usize,
    pub permutation_seed: u64,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub max_windows: Option<usize>,
    pub timing_steps: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            permutations: 5,
            permutation_seed: 0,
            rates: vec![0.0, 0.25, 0.5, 0.75],
            seeds: vec![0],
            max_windows: None,
            timing_steps: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub output_dir: PathBuf,
    /// One model per horizon; the model's own horizon when empty.
    pub horizons: Vec<usize>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            output_dir: PathBuf::from("runs"),
            horizons: Vec::new(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Short keys accepted by `--set`.
fn expand_alias(key: &str) -> &str {
    match key {
        "lambda" => "model.lambda",
        "seed" => "train.seed",
        "lr" => "train.lr",
        "epochs" => "train.epochs",
        other => other,
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {assignment:?} is not key=value")))?;
    let key = expand_alias(key.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override {key:?}: {p:?} is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid config: {}", e.message())))?;
        cfg.model.validate().map_err(CliError::from_setup)?;
        cfg.train.validate().map_err(CliError::from_setup)?;
        Ok(cfg)
    }

    pub fn horizons(&self) -> Vec<usize> {
        if self.horizons.is_empty() {
            vec![self.model.horizon]
        } else {
            self.horizons.clone()
        }
    }

    pub fn model_for(&self, horizon: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            horizon,
            channels,
            ..self.model.clone()
        }
    }

    /// Directory receiving every file of this run.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.name),
            None => self.output_dir.join(&self.name),
        }
    }

    pub fn load_series(&self) -> Result<RawSeries, CliError> {
        match self.data.source {
            Source::Synthetic => synthetic_series(&self.data.synthetic).map_err(CliError::from_setup),
            Source::Csv => {
                let path = self
                    .data
                    .path
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("data.path is required for csv sources".into()))?;
                if !path.exists() {
                    return Err(CliError::Usage(format!("dataset {} does not exist", path.display())));
                }
                load_csv(path, self.data.has_timestamp).map_err(CliError::from_setup)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
