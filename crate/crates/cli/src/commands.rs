use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lift_core::evalbench::pipeline::{self, file_hash, write_file, Manifest};
use lift_core::evalbench::{self as eb, EvalReport, ModelKind, TimingRecord};
use lift_core::lift::{lift_adapt, TrainReport};
use lift_core::model::{checkpoint, Model};
use lift_core::pretrain::pretrain;
use lift_core::sft::sft_train;
use lift_core::synth::{self, io as sio, CorpusEntry, QASet, Third};
use serde::Serialize;

use crate::config::{config_error, CorpusKind, RunConfig};

/// A command's effective configuration plus the manifest being built.
pub struct Run {
    pub config: RunConfig,
    pub hash: String,
    pub manifest: Manifest,
}

impl Run {
    pub fn new(command: &str, config: RunConfig) -> Result<Self> {
        let hash = config.hash()?;
        let mut manifest = Manifest::new(command, &config, config.seed)?;
        manifest.config_hash = hash.clone();
        Ok(Run { config, hash, manifest })
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        self.manifest.inputs.insert(format!("{name}:{}", path.display()), h);
        Ok(())
    }

    fn output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        write_file(path, bytes)?;
        self.manifest
            .outputs
            .insert(path.display().to_string(), lift_core::seed::content_hash(bytes));
        Ok(())
    }

    /// Writes the manifest beside `primary` unless a location was given.
    fn finish(self, primary: &Path) -> Result<PathBuf> {
        let path = self.config.io.manifest_out.clone().unwrap_or_else(|| {
            let mut s = primary.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        });
        self.manifest.save(&path)?;
        Ok(path)
    }
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| config_error(format!("missing required path: pass {flag}")))
}

#[derive(Serialize)]
struct Tagged<'a, R: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a R,
}

fn tagged_line<R: Serialize>(hash: &str, body: &R) -> Result<String> {
    Ok(serde_json::to_string(&Tagged { config_hash: hash, body })? + "\n")
}

fn ckpt_bytes(model: &Model<f32>, hash: &str, role: &str) -> Result<Vec<u8>> {
    let meta = BTreeMap::from([
        ("meta.config_hash".to_string(), hash.to_string()),
        ("meta.role".to_string(), role.to_string()),
    ]);
    Ok(checkpoint::to_bytes(model, &meta)?)
}

/// Loads `path` or builds (and optionally pretrains) a fresh model.
fn base_model(run: &mut Run, path: Option<PathBuf>) -> Result<Model<f32>> {
    if let Some(p) = path {
        run.input("checkpoint", &p)?;
        return Ok(checkpoint::load(&p)?.model);
    }
    let m = Model::new(run.config.model)?;
    if run.config.job.pretrain {
        return Ok(pretrain(&m, &run.config.pretrain)?.0);
    }
    Ok(m)
}

fn read_doc(run: &mut Run) -> Result<CorpusEntry> {
    let path = need(&run.config.io.doc, "--doc")?.clone();
    run.input("doc", &path)?;
    let mut entries = sio::read_corpus(&path)?;
    let i = run.config.job.doc_index;
    if i >= entries.len() {
        return Err(config_error(format!(
            "doc_index {i} out of range: {} holds {} documents",
            path.display(),
            entries.len()
        )));
    }
    Ok(entries.swap_remove(i))
}

fn held_out(entry: &CorpusEntry, middle_only: bool) -> QASet {
    let qas = entry.doc.fact_qas();
    if !middle_only {
        return qas;
    }
    let len = entry.doc.len();
    QASet::new(
        qas.pairs
            .into_iter()
            .filter(|p| synth::third_of(&p.source_span, len) == Some(Third::Middle))
            .collect(),
    )
}

pub fn corpus(mut run: Run) -> Result<PathBuf> {
    let out = need(&run.config.io.out, "--out")?.clone();
    let c = run.config.corpus.clone();
    let span = c.qa_span.unwrap_or(run.config.model.context_window / 2);
    let entries = match c.kind {
        CorpusKind::Sft => synth::gen_sft_corpus(c.n_docs, c.qa_per_doc, c.n_facts, c.doc_len, span, run.config.seed)?,
        CorpusKind::Test => (0..c.n_docs as u64)
            .map(|i| {
                let doc = synth::gen_fact_doc(c.n_facts, c.doc_len, synth::test_doc_seed(run.config.seed, i))?;
                let qas = doc.fact_qas();
                Ok(CorpusEntry { doc, qas })
            })
            .collect::<lift_core::Result<Vec<_>>>()?,
    };
    let text = sio::corpus_to_jsonl(&entries, &run.hash)?;
    run.output(&out, text.as_bytes())?;
    run.finish(&out)
}

fn train_outputs(mut run: Run, model: &Model<f32>, report: &TrainReport, role: &str) -> Result<PathBuf> {
    let ckpt = need(&run.config.io.ckpt_out, "--ckpt-out")?.clone();
    let bytes = ckpt_bytes(model, &run.hash, role)?;
    run.output(&ckpt, &bytes)?;
    if let Some(r) = run.config.io.out.clone() {
        let line = tagged_line(&run.hash, report)?;
        run.output(&r, line.as_bytes())?;
    }
    run.finish(&ckpt)
}

pub fn lift(mut run: Run) -> Result<PathBuf> {
    let entry = read_doc(&mut run)?;
    let ckpt = run.config.io.ckpt_in.clone();
    let base = base_model(&mut run, ckpt)?;
    let lc = run.config.lift.clone();
    let aux = if lc.use_auxiliary && lc.gamma > 0.0 {
        let ec = eb::EvalConfig {
            lift: lc.clone(),
            ..run.config.eval.clone()
        };
        eb::auxiliary_qas(&entry.doc, &held_out(&entry, false), &ec, base.context_window())
    } else {
        QASet::empty()
    };
    let (model, report) = lift_adapt(&base, &entry.doc.tokens(), &aux, &lc)?;
    train_outputs(run, &model, &report, "lift")
}

pub fn sft(mut run: Run) -> Result<PathBuf> {
    let path = need(&run.config.io.corpus, "--corpus")?.clone();
    run.input("corpus", &path)?;
    let entries = sio::read_corpus(&path)?;
    let pairs: Vec<_> = entries.iter().map(|e| (e.doc.tokens(), e.qas.clone())).collect();
    let ckpt = run.config.io.ckpt_in.clone();
    let base = base_model(&mut run, ckpt)?;
    let (model, report) = sft_train(&base, &pairs, &run.config.sft)?;
    train_outputs(run, &model, &report, "sft")
}

pub fn eval(mut run: Run) -> Result<PathBuf> {
    let out = need(&run.config.io.out, "--out")?.clone();
    let mode = run.config.job.mode;
    let (path, kind) = match mode.required_model() {
        ModelKind::Sft => {
            let p = run.config.io.sft_ckpt.clone().ok_or_else(|| {
                config_error(format!("mode {mode} requires an SFT checkpoint: pass --sft-ckpt"))
            })?;
            (Some(p), ModelKind::Sft)
        }
        ModelKind::Base => (run.config.io.ckpt_in.clone(), ModelKind::Base),
    };
    let entry = read_doc(&mut run)?;
    let model = base_model(&mut run, path)?;
    let qas = held_out(&entry, run.config.job.middle_only);
    let report = eb::run_eval(&model, kind, &entry.doc, &qas, mode, &run.config.eval)?;
    let line = tagged_line(&run.hash, &report)?;
    run.output(&out, line.as_bytes())?;
    let mut csv = summary_header();
    summary_row(&mut csv, &run.hash, &report);
    run.output(&with_suffix(&out, ".csv"), csv.as_bytes())?;
    run.finish(&out)
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn summary_header() -> String {
    "config_hash,mode,questions,exact_match,token_f1,middle_recall,edge_recall\n".to_string()
}

fn summary_row(s: &mut String, hash: &str, r: &EvalReport) {
    let a = &r.aggregates;
    let _ = writeln!(
        s,
        "{hash},{},{},{:.6},{:.6},{:.6},{:.6}",
        r.mode, a.questions, a.exact_match, a.token_f1, a.middle_recall, a.edge_recall
    );
}

pub fn bench(run: Run) -> Result<PathBuf> {
    let dir = need(&run.config.io.out_dir, "--out-dir")?.clone();
    let records = eb::bench_time(&run.config.bench)?;
    let mut lines = String::new();
    let mut csv = String::from("config_hash,input_length,mode,wall_time_s,peak_memory_bytes,oom\n");
    let mut plot = format!("# config_hash={}\nmode,x,y\n", run.hash);
    for r in &records {
        lines.push_str(&tagged_line(&run.hash, r)?);
        let t = r.wall_time_s.map(|t| format!("{t:.6}")).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{t},{},{}", run.hash, r.input_length, r.mode.as_str(), r.peak_memory_bytes, r.oom);
        if let Some(t) = r.wall_time_s {
            let _ = writeln!(plot, "{},{},{t:.6}", r.mode.as_str(), r.input_length);
        }
    }
    // Timing values vary run to run; they are written but not hashed.
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join("timings.jsonl"), lines.as_bytes())?;
    write_file(&dir.join("summary.csv"), csv.as_bytes())?;
    write_file(&dir.join("plot_data.csv"), plot.as_bytes())?;
    let fit = fit_summary(&records);
    let fit_text = tagged_line(&run.hash, &fit)?;
    write_file(&dir.join("fit.json"), fit_text.as_bytes())?;
    run.finish(&dir.join("bench"))
}

#[derive(Serialize)]
struct FitSummary {
    fit: Option<eb::ScalingFit>,
    error: Option<String>,
}

fn fit_summary(records: &[TimingRecord]) -> FitSummary {
    match eb::fit_scaling(records) {
        Ok(f) => FitSummary { fit: Some(f), error: None },
        Err(e) => FitSummary {
            fit: None,
            error: Some(e.to_string()),
        },
    }
}

/// Summarises evaluation report lines, as written by `eval` or `pipeline`,
/// into one CSV row each.
pub fn report(mut run: Run) -> Result<PathBuf> {
    let input = need(&run.config.io.input, "--input")?.clone();
    let out = need(&run.config.io.out, "--out")?.clone();
    run.input("reports", &input)?;
    let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
    let mut csv = summary_header();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: EvalReport = serde_json::from_str(&strip_tags(line)?)
            .with_context(|| format!("{}:{}: not an evaluation report", input.display(), i + 1))?;
        summary_row(&mut csv, &run.hash, &r);
    }
    run.output(&out, csv.as_bytes())?;
    run.finish(&out)
}

/// Drops the provenance fields added when a report line was written.
fn strip_tags(line: &str) -> Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(line)?;
    if let Some(o) = v.as_object_mut() {
        o.remove("config_hash");
        o.remove("doc");
    }
    Ok(v.to_string())
}

pub fn run_pipeline(run: Run, from_manifest: Option<&Path>) -> Result<PathBuf> {
    let dir = need(&run.config.io.out_dir, "--out-dir")?.clone();
    let out = match from_manifest {
        Some(m) => pipeline::rerun_from_manifest(m, &dir)?,
        None => pipeline::run_pipeline(&run.config.pipeline_config(), &dir)?,
    };
    for mode in &run.config.pipeline.modes {
        if let Some(em) = out.mean_exact_match(*mode) {
            eprintln!("{mode}: mean exact match {em:.3}");
        }
    }
    Ok(dir.join("manifest.json"))
}
