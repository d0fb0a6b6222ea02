//! Run configuration: one TOML document per run, with every section and
//! field optional.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file (or the
//! config recorded in a `--manifest`), `--set key.path=value` overrides,
//! then dedicated flags such as `--seed` or `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lift_core::evalbench::pipeline::{config_hash, Manifest, PipelineConfig};
use lift_core::evalbench::{BenchConfig, EvalConfig, EvalMode};
use lift_core::lift::LiftConfig;
use lift_core::model::ModelConfig;
use lift_core::pretrain::PretrainConfig;
use lift_core::sft::SftConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// Test documents; the QA set holds every fact's recall question.
    #[default]
    Test,
    /// Fine-tuning documents with synthesized QA pairs.
    Sft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub kind: CorpusKind,
    pub n_docs: usize,
    pub qa_per_doc: usize,
    pub n_facts: usize,
    pub doc_len: usize,
    /// Span length for synthesized pairs; `None` uses half the window.
    pub qa_span: Option<usize>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            kind: CorpusKind::Test,
            n_docs: 1,
            qa_per_doc: 16,
            n_facts: 12,
            doc_len: 2048,
            qa_span: None,
        }
    }
}

/// Choices that shape results but are not file locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JobSection {
    pub mode: EvalMode,
    pub doc_index: usize,
    pub middle_only: bool,
    /// Pretrain a freshly initialised model before use.
    pub pretrain: bool,
}

impl Default for JobSection {
    fn default() -> Self {
        JobSection {
            mode: EvalMode::Icl,
            doc_index: 0,
            middle_only: false,
            pretrain: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub modes: Vec<EvalMode>,
    pub test_docs: usize,
    pub doc_len: usize,
    pub n_facts: usize,
    pub reorder_events: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let d = PipelineConfig::default();
        PipelineSection {
            modes: d.modes,
            test_docs: d.test_docs,
            doc_len: d.doc_len,
            n_facts: d.n_facts,
            reorder_events: d.reorder_events,
        }
    }
}

/// File locations. Not part of the config hash, so moving outputs does not
/// change what the artifacts record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub doc: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub ckpt_in: Option<PathBuf>,
    pub sft_ckpt: Option<PathBuf>,
    pub ckpt_out: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub manifest_out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub lift: LiftConfig,
    pub sft: SftConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub corpus: CorpusSection,
    pub pipeline: PipelineSection,
    pub job: JobSection,
    pub io: IoSection,
}

impl RunConfig {
    /// Hash of everything except file locations.
    pub fn hash(&self) -> Result<String> {
        let bare = RunConfig {
            io: IoSection::default(),
            ..self.clone()
        };
        Ok(config_hash(&bare)?)
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            model: self.model,
            pretrain: self.job.pretrain.then(|| self.pretrain.clone()),
            sft: self.sft.clone(),
            eval: self.eval.clone(),
            modes: self.pipeline.modes.clone(),
            test_docs: self.pipeline.test_docs,
            doc_len: self.pipeline.doc_len,
            n_facts: self.pipeline.n_facts,
            middle_only: self.job.middle_only,
            reorder_events: self.pipeline.reorder_events,
        }
    }
}

/// A configuration problem detected by the command line layer.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn read_toml(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn set_path(root: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("--set expects key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_error(format!("--set {key}: {part} is not a section")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Builds the effective configuration. Returns the manifest it came from,
/// if any.
pub fn load(config: Option<&Path>, manifest: Option<&Path>, sets: &[String]) -> Result<(RunConfig, Option<Manifest>)> {
    let (base, m) = match (config, manifest) {
        (Some(_), Some(_)) => return Err(config_error("--config and --manifest are mutually exclusive")),
        (Some(p), None) => (read_toml(p)?, None),
        (None, Some(p)) => {
            let m = Manifest::load(p)?;
            let c: RunConfig = m.config_as()?;
            (c, Some(m))
        }
        (None, None) => (RunConfig::default(), None),
    };
    if sets.is_empty() {
        return Ok((base, m));
    }
    let mut v = serde_json::to_value(&base)?;
    for s in sets {
        set_path(&mut v, s)?;
    }
    let c = serde_json::from_value(v).map_err(|e| config_error(format!("invalid --set override: {e}")))?;
    Ok((c, m))
}
