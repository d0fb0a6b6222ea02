//! End-to-end evaluation runs and their manifests.
//!
//! A run writes its artifacts into one directory:
//!
//! | file            | content                                              |
//! |-----------------|------------------------------------------------------|
//! | `manifest.json` | config snapshot, root seed, input and output hashes   |
//! | `base.ckpt`     | base model (after optional pretraining)              |
//! | `sft.ckpt`      | fine-tuned model, only when an SFT mode is requested |
//! | `reports.jsonl` | one QA evaluation report per (document, mode)        |
//! | `reorder.jsonl` | one timeline report per (document, mode)             |
//! | `summary.csv`   | one aggregate row per (document, mode)               |
//! | `plot_data.csv` | `mode,x,y` with x the document and y exact match     |
//! | `timings.json`  | wall-clock seconds; not part of the reproducible set |
//!
//! Every file except the timings carries the config hash, and rerunning from
//! the manifest reproduces every hashed file byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{eval_reorder, run_eval, EvalConfig, EvalMode, EvalReport, ModelKind, ReorderReport};
use crate::model::{checkpoint, Model, ModelConfig};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::sft::{sft_train, SftConfig};
use crate::synth::{self, QASet, Third};
use crate::{seed, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Architecture; its `seed` field is replaced by one derived from the root.
    pub model: ModelConfig,
    pub pretrain: Option<PretrainConfig>,
    pub sft: SftConfig,
    pub eval: EvalConfig,
    pub modes: Vec<EvalMode>,
    pub test_docs: usize,
    pub doc_len: usize,
    pub n_facts: usize,
    /// Ask only about facts in the middle third of each document.
    pub middle_only: bool,
    /// Events per timeline document; 0 skips the reorder task.
    pub reorder_events: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            model: ModelConfig::toy(),
            pretrain: None,
            sft: SftConfig::default(),
            eval: EvalConfig::default(),
            modes: EvalMode::ALL.to_vec(),
            test_docs: 1,
            doc_len: 2048,
            n_facts: 12,
            middle_only: false,
            reorder_events: 0,
        }
    }
}

/// Provenance record of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to content hash; timing files are not listed.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<Self> {
        let value = serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Manifest {
            command: command.to_string(),
            config_hash: config_hash(config)?,
            config: value,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn config_as<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Config(format!("manifest config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_file(path, (text + "\n").as_bytes())
    }

    /// Writes an output and records its hash.
    pub fn write_output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        write_file(&dir.join(name), bytes)?;
        self.outputs.insert(name.to_string(), seed::content_hash(bytes));
        Ok(())
    }
}

/// Hash of the canonical JSON encoding of a configuration.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Format(e.to_string()))?;
    Ok(seed::content_hash(&json))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Hash of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(seed::content_hash(&bytes))
}

#[derive(Serialize)]
struct Tagged<'a, R> {
    config_hash: &'a str,
    doc: usize,
    #[serde(flatten)]
    report: &'a R,
}

fn jsonl<R: Serialize>(hash: &str, rows: &[(usize, R)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (doc, report) in rows {
        let line = serde_json::to_string(&Tagged { config_hash: hash, doc: *doc, report })
            .map_err(|e| Error::Format(e.to_string()))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

fn checkpoint_bytes(model: &Model<f32>, hash: &str, role: &str) -> Result<Vec<u8>> {
    let meta = BTreeMap::from([
        ("meta.config_hash".to_string(), hash.to_string()),
        ("meta.role".to_string(), role.to_string()),
    ]);
    checkpoint::to_bytes(model, &meta)
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub manifest: Manifest,
    pub reports: Vec<(usize, EvalReport)>,
    pub reorder: Vec<(usize, ReorderReport)>,
}

impl PipelineOutput {
    /// Mean exact match per mode over all documents.
    pub fn mean_exact_match(&self, mode: EvalMode) -> Option<f64> {
        let v: Vec<f64> = self
            .reports
            .iter()
            .filter(|(_, r)| r.mode == mode)
            .map(|(_, r)| r.aggregates.exact_match)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn validate(config: &PipelineConfig) -> Result<()> {
    if config.modes.is_empty() {
        return Err(Error::Config("modes must name at least one evaluation mode".into()));
    }
    if config.test_docs == 0 {
        return Err(Error::Config("test_docs must be at least 1".into()));
    }
    config.model.validate()
}

/// Runs every requested mode on every test document and writes the
/// artifacts listed in the module docs into `out_dir`.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<PipelineOutput> {
    validate(config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let root = config.seed;
    let mut manifest = Manifest::new("pipeline", config, root)?;
    let hash = manifest.config_hash.clone();
    let mut timings = BTreeMap::new();
    let t0 = std::time::Instant::now();

    let mc = config.model.with_seed(seed::derive(root, "model-seed", 0));
    let mut base = Model::<f32>::new(mc)?;
    if let Some(pc) = &config.pretrain {
        let pc = PretrainConfig {
            seed: seed::derive(root, "pretrain", 0),
            ..pc.clone()
        };
        base = pretrain(&base, &pc)?.0;
    }
    manifest.write_output(out_dir, "base.ckpt", &checkpoint_bytes(&base, &hash, "base")?)?;
    timings.insert("base", t0.elapsed().as_secs_f64());

    let needs_sft = config.modes.iter().any(|m| m.required_model() == ModelKind::Sft);
    let sft = if needs_sft {
        let t = std::time::Instant::now();
        let sc = &config.sft;
        let span = config.eval.aux_span.unwrap_or(mc.context_window / 2);
        let corpus_seed = seed::derive(root, "sft-corpus", 0);
        let corpus = synth::gen_sft_corpus(sc.n_docs, sc.qa_per_doc, sc.n_facts, sc.doc_len, span, corpus_seed)?;
        let pairs: Vec<_> = corpus.iter().map(|e| (e.doc.tokens(), e.qas.clone())).collect();
        let corpus_text: String = corpus.iter().map(|e| e.doc.text.as_str()).collect();
        manifest
            .inputs
            .insert("sft_corpus".into(), seed::content_hash(corpus_text.as_bytes()));
        let sc = SftConfig {
            seed: seed::derive(root, "sft", 0),
            lift: crate::lift::LiftConfig {
                seed: seed::derive(root, "sft-lift", 0),
                ..sc.lift.clone()
            },
            ..sc.clone()
        };
        let (model, _) = sft_train(&base, &pairs, &sc)?;
        manifest.write_output(out_dir, "sft.ckpt", &checkpoint_bytes(&model, &hash, "sft")?)?;
        timings.insert("sft", t.elapsed().as_secs_f64());
        Some(model)
    } else {
        None
    };

    let mut reports = Vec::new();
    let mut reorder = Vec::new();
    let t = std::time::Instant::now();
    for i in 0..config.test_docs {
        let doc = synth::gen_fact_doc(config.n_facts, config.doc_len, synth::test_doc_seed(root, i as u64))?;
        manifest
            .inputs
            .insert(format!("test_doc_{i}"), seed::content_hash(doc.text.as_bytes()));
        let mut qas = doc.fact_qas();
        if config.middle_only {
            let len = doc.len();
            qas = QASet::new(
                qas.pairs
                    .into_iter()
                    .filter(|p| synth::third_of(&p.source_span, len) == Some(Third::Middle))
                    .collect(),
            );
        }
        let mut ec = config.eval.clone();
        ec.lift.seed = seed::derive(root, "eval-lift", i as u64);
        let events = (config.reorder_events > 0)
            .then(|| synth::gen_event_doc(config.reorder_events, config.doc_len, seed::derive(root, "event-doc", i as u64)))
            .transpose()?;
        for &mode in &config.modes {
            let (model, kind) = match mode.required_model() {
                ModelKind::Base => (&base, ModelKind::Base),
                ModelKind::Sft => (sft.as_ref().expect("trained above"), ModelKind::Sft),
            };
            reports.push((i, run_eval(model, kind, &doc, &qas, mode, &ec)?));
            if let Some(ev) = &events {
                reorder.push((i, eval_reorder(model, kind, ev, mode, &ec)?));
            }
        }
    }
    timings.insert("evaluation", t.elapsed().as_secs_f64());

    manifest.write_output(out_dir, "reports.jsonl", &jsonl(&hash, &reports)?)?;
    if !reorder.is_empty() {
        manifest.write_output(out_dir, "reorder.jsonl", &jsonl(&hash, &reorder)?)?;
    }
    manifest.write_output(out_dir, "summary.csv", summary_csv(&hash, &reports).as_bytes())?;
    manifest.write_output(out_dir, "plot_data.csv", plot_csv(&hash, &reports).as_bytes())?;
    let timing_json = serde_json::json!({ "config_hash": hash, "seconds": timings });
    write_file(&out_dir.join("timings.json"), format!("{timing_json}\n").as_bytes())?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(PipelineOutput {
        manifest,
        reports,
        reorder,
    })
}

/// Reruns the pipeline recorded in `manifest_path`, writing to `out_dir`.
pub fn rerun_from_manifest(manifest_path: &Path, out_dir: &Path) -> Result<PipelineOutput> {
    let m = Manifest::load(manifest_path)?;
    if m.command != "pipeline" {
        return Err(Error::Config(format!("manifest records a {:?} run, not a pipeline", m.command)));
    }
    let config: PipelineConfig = m.config_as()?;
    let out = run_pipeline(&config, out_dir)?;
    if out.manifest.config_hash != m.config_hash {
        return Err(Error::Format("manifest config hash does not match its config".into()));
    }
    Ok(out)
}

pub fn summary_csv(hash: &str, reports: &[(usize, EvalReport)]) -> String {
    let mut s = String::from("config_hash,doc,mode,questions,exact_match,token_f1,middle_recall,edge_recall\n");
    for (doc, r) in reports {
        let a = &r.aggregates;
        let _ = writeln!(
            s,
            "{hash},{doc},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.mode, a.questions, a.exact_match, a.token_f1, a.middle_recall, a.edge_recall
        );
    }
    s
}

pub fn plot_csv(hash: &str, reports: &[(usize, EvalReport)]) -> String {
    let mut s = format!("# config_hash={hash}\nmode,x,y\n");
    for (doc, r) in reports {
        let _ = writeln!(s, "{},{doc},{:.6}", r.mode, r.aggregates.exact_match);
    }
    s
}
