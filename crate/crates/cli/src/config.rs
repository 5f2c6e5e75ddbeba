//! The run configuration: one JSON document shared by every subcommand.
//!
//! Precedence is file, then `--set key=value` overrides, then dedicated
//! flags. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use lava_core::harness::HarnessConfig;
use lava_core::llm::LlmClientConfig;
use lava_core::synth::SiteSpec;
use lava_core::{AgeGroup, PrevalenceVector};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_age")]
    pub age_group: AgeGroup,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub llm: LlmClientConfig,
    /// Transcript of recorded responses used instead of the HTTP endpoint.
    #[serde(default)]
    pub llm_replay: Option<PathBuf>,
    /// JSON prompt template replacing the built-in one.
    #[serde(default)]
    pub prompt_template: Option<PathBuf>,
    #[serde(default)]
    pub harness: HarnessConfig,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

/// Input locations. Unset paths default to files inside the output
/// directory, so `synth` followed by `evaluate` needs no paths at all.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub records: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub predictions: Vec<PathBuf>,
    pub embed_model: Option<PathBuf>,
}

/// Synthetic cohort settings; the seed is the top-level one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub sites: Vec<SiteSpec>,
    #[serde(default = "default_symptoms")]
    pub symptom_count: usize,
    #[serde(default)]
    pub base_symptom_profile: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub site_flip_rate: f64,
    #[serde(default)]
    pub missing_rate: f64,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    /// Accuracy of an optional ranked oracle predictor written alongside
    /// the cohort.
    #[serde(default)]
    pub oracle_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    /// Ranked predictions to calibrate; defaults to `<out>/llm.jsonl`.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    #[serde(default = "yes")]
    pub stratify: bool,
    #[serde(default)]
    pub target: Option<PrevalenceVector>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection { predictions: None, stratify: true, target: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { grid_step: default_grid_step() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Adds LLM predictions obtained through the response cache (and the
    /// endpoint for any miss).
    #[serde(default)]
    pub use_llm: bool,
    #[serde(default)]
    pub title: Option<String>,
}

fn default_age() -> AgeGroup {
    AgeGroup::Adult
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_symptoms() -> usize {
    20
}

fn default_dim() -> usize {
    16
}

fn default_separation() -> f64 {
    3.0
}

fn default_grid_step() -> f64 {
    lava_core::models::DEFAULT_GRID_STEP
}

fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn records_path(&self) -> PathBuf {
        self.data.records.clone().unwrap_or_else(|| self.out.join("records.csv"))
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.data.embeddings.clone().unwrap_or_else(|| self.out.join("embeddings.csv"))
    }

    pub fn embed_model_path(&self) -> PathBuf {
        self.data.embed_model.clone().unwrap_or_else(|| self.out.join("embed_model.json"))
    }

    /// Relative cache directories live under the output directory.
    pub fn cache_dir(&self) -> PathBuf {
        if self.llm.cache_dir.is_absolute() {
            self.llm.cache_dir.clone()
        } else {
            self.out.join(&self.llm.cache_dir)
        }
    }
}

/// Sets `path` (dot-separated) in a JSON object tree. The value is parsed
/// as JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => return Err(CliError::Config(format!("override {key:?}: {} is not an object", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("parts is nonempty")
}

pub fn load(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig, CliError> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    if let Some(s) = seed {
        apply_override(&mut root, &format!("seed={s}"))?;
    }
    if let Some(o) = out {
        root["out"] = Value::String(o.to_string_lossy().into_owned());
    }
    let mut config: RunConfig = serde_json::from_value(root).map_err(|e| CliError::Config(format!("config: {e}")))?;
    config.harness.seed = config.seed;
    config.harness.logreg.seed = config.seed;
    Ok(config)
}
