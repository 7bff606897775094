//! Run configuration: built-in defaults, then an optional TOML file, then
//! `--set key=value` overrides, then `--seed`.

use std::path::{Path, PathBuf};

use ideolens::corpus::SyntheticConfig;
use ideolens::model::ModelConfig;
use ideolens::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Val,
    #[default]
    Test,
    /// Every record of the corpus, unsplit.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    /// Corpus for pretraining; `corpus` when absent.
    pub pretrain_corpus: Option<PathBuf>,
    pub blocklist: Option<PathBuf>,
    /// Replaces record labels with the binned score of the source's politician.
    pub politicians: Option<PathBuf>,
    /// Coarsens labels to 3 or 2 classes before use.
    pub n_classes: Option<usize>,
    /// Train and validation shares of story clusters; the rest is test.
    pub split: [f64; 2],
    pub split_seed: u64,
    /// Subsample every class down to the rarest one before splitting.
    pub balance: bool,
    /// Share of the training split kept for supervised training.
    pub label_fraction: f64,
    pub eval_split: EvalSplit,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            pretrain_corpus: None,
            blocklist: None,
            politicians: None,
            n_classes: None,
            split: [0.6, 0.2],
            split_seed: 0,
            balance: false,
            label_fraction: 1.0,
            eval_split: EvalSplit::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub annotations: Option<PathBuf>,
    /// Second annotator's labels for the same records, for agreement.
    pub second_annotations: Option<PathBuf>,
    pub figures: Vec<String>,
    pub decimals: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { annotations: None, second_annotations: None, figures: Vec::new(), decimals: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// metrics.json files, one table row each.
    pub inputs: Vec<PathBuf>,
    pub decimals: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { inputs: Vec::new(), decimals: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides `train.seed` and `synthetic.seed`.
    pub seed: Option<u64>,
    /// Starting weights for pretrain and finetune.
    pub init_checkpoint: Option<PathBuf>,
    /// Model scored by evaluate.
    pub checkpoint: Option<PathBuf>,
    /// Output directory; not part of the config hash.
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub analysis: AnalysisConfig,
    pub report: ReportConfig,
}

const TOP_LEVEL: [&str; 10] = ["seed", "init_checkpoint", "checkpoint", "out", "data", "model", "train", "synthetic", "analysis", "report"];

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("{key}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Resolves the layered configuration. A bare override key that is not a
    /// top-level field belongs to `section`.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>, section: &str) -> CliResult<Self> {
        let defaults = toml::Value::try_from(RunConfig::default()).map_err(config_err)?;
        let mut tree = match defaults {
            toml::Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let overlay: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, overlay);
        }
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {item:?}")))?;
            let key = key.trim();
            let key = if key.contains('.') || TOP_LEVEL.contains(&key) { key.to_string() } else { format!("{section}.{key}") };
            set_path(&mut tree, &key, parse_value(raw.trim()))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(tree).try_into().map_err(config_err)?;
        if seed.is_some() {
            cfg.seed = seed;
        }
        if let Some(s) = cfg.seed {
            cfg.train.seed = s;
            cfg.synthetic.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let [train, val] = self.data.split;
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 + 1e-12 {
            return Err(CliError::Config(format!("data.split {:?} must be two shares in [0, 1] summing to at most 1", self.data.split)));
        }
        if !(self.data.label_fraction > 0.0 && self.data.label_fraction <= 1.0) {
            return Err(CliError::Config(format!("data.label_fraction {} must be in (0, 1]", self.data.label_fraction)));
        }
        if let Some(n) = self.data.n_classes {
            ideolens::corpus::LabelScheme::for_classes(n)?;
        }
        for path in self.input_paths() {
            if !path.exists() {
                return Err(CliError::Core(ideolens::Error::InvalidInput(format!("{} does not exist", path.display()))));
            }
        }
        self.model.validate()?;
        self.model.scheme()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        Ok(())
    }

    fn input_paths(&self) -> Vec<&Path> {
        let d = &self.data;
        let a = &self.analysis;
        [
            &d.corpus,
            &d.pretrain_corpus,
            &d.blocklist,
            &d.politicians,
            &self.init_checkpoint,
            &self.checkpoint,
            &a.annotations,
            &a.second_annotations,
        ]
        .into_iter()
        .flatten()
        .map(PathBuf::as_path)
        .chain(self.report.inputs.iter().map(PathBuf::as_path))
        .collect()
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Hex SHA-256 of the resolved configuration without `out`.
    pub fn hash(&self) -> CliResult<String> {
        let mut c = self.clone();
        c.out = None;
        let digest = Sha256::digest(serde_json::to_vec(&c).map_err(config_err)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
