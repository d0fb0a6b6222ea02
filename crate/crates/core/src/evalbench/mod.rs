//! Evaluation modes, task metrics and the efficiency harness.
//!
//! Every run works on a copy of the model it is given; adapted parameters
//! never leak back to the caller.

pub mod metrics;
pub mod pipeline;
pub mod timing;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::lift::{lift_adapt, LiftConfig, TrainReport};
use crate::model::{checkpoint, decode_lossy, encode_str, Model, TokenSeq};
use crate::numcore::Real;
use crate::segmenter::{self, SegmentationPlan};
use crate::synth::{self, EventDoc, FactDoc, QASet, Third};
use crate::{seed, Error, Result};

pub use metrics::{exact_match, extract_answer, normalize, pairwise_order_score, parse_order, token_f1};
pub use timing::{bench_time, fit_mode, fit_scaling, BenchConfig, ModeFit, ScalingFit, TimingMode, TimingRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalMode {
    #[serde(rename = "ICL")]
    Icl,
    #[serde(rename = "LIFT_only")]
    LiftOnly,
    #[serde(rename = "LIFT+ICL")]
    LiftIcl,
    #[serde(rename = "LIFT+AT+ICL")]
    LiftAtIcl,
    #[serde(rename = "SFT+ICL")]
    SftIcl,
    #[serde(rename = "SFT+LIFT+ICL")]
    SftLiftIcl,
    #[serde(rename = "SFT+LIFT+AT+ICL")]
    SftLiftAtIcl,
}

impl EvalMode {
    pub const ALL: [EvalMode; 7] = [
        EvalMode::Icl,
        EvalMode::LiftOnly,
        EvalMode::LiftIcl,
        EvalMode::LiftAtIcl,
        EvalMode::SftIcl,
        EvalMode::SftLiftIcl,
        EvalMode::SftLiftAtIcl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Icl => "ICL",
            EvalMode::LiftOnly => "LIFT_only",
            EvalMode::LiftIcl => "LIFT+ICL",
            EvalMode::LiftAtIcl => "LIFT+AT+ICL",
            EvalMode::SftIcl => "SFT+ICL",
            EvalMode::SftLiftIcl => "SFT+LIFT+ICL",
            EvalMode::SftLiftAtIcl => "SFT+LIFT+AT+ICL",
        }
    }

    pub fn adapts(self) -> bool {
        !matches!(self, EvalMode::Icl | EvalMode::SftIcl)
    }

    pub fn uses_icl(self) -> bool {
        self != EvalMode::LiftOnly
    }

    pub fn uses_auxiliary(self) -> bool {
        matches!(self, EvalMode::LiftAtIcl | EvalMode::SftLiftAtIcl)
    }

    pub fn required_model(self) -> ModelKind {
        if self.as_str().starts_with("SFT") {
            ModelKind::Sft
        } else {
            ModelKind::Base
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown evaluation mode {s:?}")))
    }
}

/// Provenance of the model handed to an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Base,
    Sft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Adaptation settings for the LIFT modes; also holds the ICL budget,
    /// head fraction and answer reserve.
    pub lift: LiftConfig,
    pub max_new_tokens: usize,
    /// Byte length of the spans auxiliary QA pairs are drawn from; `None`
    /// uses half the context window.
    pub aux_span: Option<usize>,
    pub reorder_max_new: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lift: LiftConfig::default(),
            max_new_tokens: 8,
            aux_span: None,
            reorder_max_new: 160,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub id: usize,
    pub question: String,
    pub gold: String,
    pub prediction: String,
    pub exact_match: bool,
    pub token_f1: f64,
    /// Third of the document the answer comes from.
    pub third: Option<Third>,
    pub prompt_len: usize,
    pub gold_in_prompt: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub questions: usize,
    pub exact_match: f64,
    pub token_f1: f64,
    pub middle_questions: usize,
    /// Exact-match rate on facts from the middle third.
    pub middle_recall: f64,
    pub edge_questions: usize,
    /// Exact-match rate on facts from the first and last thirds.
    pub edge_recall: f64,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> (usize, f64) {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n, if n == 0 { 0.0 } else { s / n as f64 })
}

impl Aggregates {
    pub fn from_records(records: &[QARecord]) -> Self {
        let em = |r: &QARecord| f64::from(u8::from(r.exact_match));
        let (questions, exact_match) = mean_of(records.iter().map(em));
        let (_, token_f1) = mean_of(records.iter().map(|r| r.token_f1));
        let (middle_questions, middle_recall) =
            mean_of(records.iter().filter(|r| r.third == Some(Third::Middle)).map(em));
        let (edge_questions, edge_recall) = mean_of(
            records
                .iter()
                .filter(|r| matches!(r.third, Some(Third::Head | Third::Tail)))
                .map(em),
        );
        Aggregates {
            questions,
            exact_match,
            token_f1,
            middle_questions,
            middle_recall,
            edge_questions,
            edge_recall,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub model_kind: ModelKind,
    pub model_hash: String,
    pub doc_hash: String,
    pub lift_seed: u64,
    pub aux_qa_pairs: usize,
    pub train: Option<TrainReport>,
    pub records: Vec<QARecord>,
    pub aggregates: Aggregates,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// SHA-256 of a model's checkpoint encoding without metadata.
pub fn model_hash<T: Real>(model: &Model<T>) -> Result<String> {
    let bytes = checkpoint::to_bytes(&model.cast::<f32>(), &Default::default())?;
    Ok(seed::content_hash(&bytes))
}

fn check_kind(mode: EvalMode, kind: ModelKind) -> Result<()> {
    let need = mode.required_model();
    if need != kind {
        let what = match need {
            ModelKind::Sft => "a fine-tuned (SFT) checkpoint",
            ModelKind::Base => "a base checkpoint, not a fine-tuned one",
        };
        return Err(Error::Config(format!("mode {mode} requires {what}")));
    }
    Ok(())
}

/// Auxiliary pairs for the AT modes. Any pair asking a held-out question is
/// dropped so training and evaluation never share a question.
pub fn auxiliary_qas(doc: &FactDoc, held_out: &QASet, config: &EvalConfig, window: usize) -> QASet {
    let span = config.aux_span.unwrap_or(window / 2);
    let seed = seed::derive(config.lift.seed, "aux-qa", 0);
    let banned: HashSet<&str> = held_out.pairs.iter().map(|p| p.question.as_str()).collect();
    let all = synth::synth_qa_from_segments(doc, 4 * config.lift.m.max(1), span, seed);
    let mut seen = HashSet::new();
    let pairs = all
        .pairs
        .into_iter()
        .filter(|p| !banned.contains(p.question.as_str()))
        .filter(|p| seen.insert((p.question.clone(), p.lead.clone())))
        .take(config.lift.m)
        .collect();
    QASet::new(pairs)
}

struct Prepared<T: Real> {
    model: Option<Model<T>>,
    train: Option<TrainReport>,
    aux_pairs: usize,
}

fn prepare<T: Real>(model: &Model<T>, doc: &FactDoc, held_out: &QASet, mode: EvalMode, config: &EvalConfig) -> Result<Prepared<T>> {
    if !mode.adapts() {
        return Ok(Prepared { model: None, train: None, aux_pairs: 0 });
    }
    let aux = if mode.uses_auxiliary() {
        auxiliary_qas(doc, held_out, config, model.context_window())
    } else {
        QASet::empty()
    };
    let (adapted, report) = lift_adapt(model, &doc.tokens(), &aux, &config.lift)?;
    Ok(Prepared {
        model: Some(adapted),
        train: Some(report),
        aux_pairs: aux.len(),
    })
}

/// Truncated document, a newline, then `tail`; `tail` alone for bare modes.
fn assemble(doc: &TokenSeq, tail: &TokenSeq, icl: bool, window: usize, config: &LiftConfig) -> Result<TokenSeq> {
    if !icl {
        return Ok(tail.clone());
    }
    let budget = match config.icl_budget {
        Some(b) => b,
        None => segmenter::icl_budget(window, tail.len() + 1, config.answer_reserve)?,
    };
    let mut prompt = segmenter::truncate_icl(doc, budget, config.head_fraction)?;
    prompt.extend(&encode_str("\n"));
    prompt.extend(tail);
    if prompt.len() > window {
        return Err(Error::Config(format!(
            "prompt of {} tokens exceeds the {window}-token window",
            prompt.len()
        )));
    }
    Ok(prompt)
}

/// Answers every question in `qas` under `mode` and scores the answers.
pub fn run_eval<T: Real>(
    model: &Model<T>,
    kind: ModelKind,
    doc: &FactDoc,
    qas: &QASet,
    mode: EvalMode,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let t0 = Instant::now();
    check_kind(mode, kind)?;
    let model_hash = model_hash(model)?;
    let prepared = prepare(model, doc, qas, mode, config)?;
    let m = prepared.model.as_ref().unwrap_or(model);
    let tokens = doc.tokens();
    let window = m.context_window();
    let mut records = Vec::with_capacity(qas.len());
    for (id, qa) in qas.pairs.iter().enumerate() {
        let prompt = assemble(&tokens, &qa.prompt(), mode.uses_icl(), window, &config.lift)?;
        let raw = decode_lossy(&m.generate(&prompt, config.max_new_tokens)?);
        let prediction = extract_answer(&raw).to_string();
        records.push(QARecord {
            id,
            question: qa.question.clone(),
            gold: qa.answer.clone(),
            exact_match: exact_match(&prediction, &qa.answer),
            token_f1: token_f1(&prediction, &qa.answer),
            prediction,
            third: synth::third_of(&qa.source_span, doc.len()),
            prompt_len: prompt.len(),
            gold_in_prompt: decode_lossy(&prompt).contains(&qa.answer),
        });
    }
    Ok(EvalReport {
        mode,
        model_kind: kind,
        model_hash,
        doc_hash: seed::content_hash(doc.text.as_bytes()),
        lift_seed: config.lift.seed,
        aux_qa_pairs: prepared.aux_pairs,
        train: prepared.train,
        aggregates: Aggregates::from_records(&records),
        records,
        wall_time: t0.elapsed(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecitationConfig {
    /// Continuation tokens scored after each boundary, `g`.
    pub gen_len: usize,
    /// Conditioning length; `None` takes `min(W - g, seg_len - stride)`
    /// from the plan.
    pub context: Option<usize>,
}

impl Default for RecitationConfig {
    fn default() -> Self {
        RecitationConfig { gen_len: 32, context: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryNll {
    pub boundary: usize,
    pub context: usize,
    pub scored: usize,
    pub nll: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecitationReport {
    pub boundaries: Vec<BoundaryNll>,
    /// Mean over boundaries; `None` when nothing was scored.
    pub mean_nll: Option<f64>,
}

/// `count` boundaries spread evenly over `all`, in order.
fn spread(all: &[usize], count: usize) -> Vec<usize> {
    if count >= all.len() {
        return all.to_vec();
    }
    (0..count).map(|i| all[(2 * i + 1) * all.len() / (2 * count)]).collect()
}

/// Continuation NLL across segment boundaries: for each chosen interior
/// boundary the model reads the tokens just before it and is scored on the
/// `g` tokens after it.
pub fn eval_recitation<T: Real>(
    model: &Model<T>,
    tokens: &TokenSeq,
    plan: &SegmentationPlan,
    boundary_count: usize,
    config: &RecitationConfig,
) -> Result<RecitationReport> {
    if boundary_count == 0 {
        return Ok(RecitationReport::default());
    }
    if plan.input_len != tokens.len() {
        return Err(Error::InvalidInput(format!(
            "plan covers {} tokens but the document has {}",
            plan.input_len,
            tokens.len()
        )));
    }
    let w = model.context_window();
    let g = config.gen_len;
    if g == 0 || g >= w {
        return Err(Error::Config(format!("gen_len {g} must lie in [1, {w})")));
    }
    let context = config
        .context
        .unwrap_or_else(|| (w - g).min(plan.seg_len.saturating_sub(plan.stride)))
        .min(w - g);
    if context == 0 {
        return Err(Error::Config("recitation needs a non-empty context".into()));
    }
    let mut out = Vec::new();
    for b in spread(&plan.interior_boundaries(), boundary_count) {
        let ctx = context.min(b);
        let scored = g.min(tokens.len() - b);
        if ctx == 0 || scored == 0 {
            continue;
        }
        let seq = tokens.slice(b - ctx..b + scored);
        let nll = model.scored_nll(&seq, ctx)?.f64();
        out.push(BoundaryNll {
            boundary: b,
            context: ctx,
            scored,
            nll,
        });
    }
    let mean_nll = (!out.is_empty()).then(|| out.iter().map(|r| r.nll).sum::<f64>() / out.len() as f64);
    Ok(RecitationReport { boundaries: out, mean_nll })
}

/// Instruction that follows the (optional) context in reorder prompts.
pub const REORDER_PROMPT: &str = "List the events from earliest to latest:\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReorderReport {
    pub mode: EvalMode,
    pub raw: String,
    /// Predicted order as indices into the chronological label list.
    pub predicted: Vec<usize>,
    pub score: f64,
    pub train: Option<TrainReport>,
}

/// Asks for the events in chronological order and scores the answer by
/// concordant pairs. Unmentioned labels count as listed last, in reverse
/// chronological order.
pub fn eval_reorder<T: Real>(
    model: &Model<T>,
    kind: ModelKind,
    doc: &EventDoc,
    mode: EvalMode,
    config: &EvalConfig,
) -> Result<ReorderReport> {
    check_kind(mode, kind)?;
    let facts = doc.as_fact_doc();
    let prepared = prepare(model, &facts, &QASet::empty(), mode, config)?;
    let m = prepared.model.as_ref().unwrap_or(model);
    let mut cfg = config.lift.clone();
    cfg.answer_reserve = cfg.answer_reserve.max(1);
    let prompt = assemble(&doc.tokens(), &encode_str(REORDER_PROMPT), mode.uses_icl(), m.context_window(), &cfg)?;
    let raw = decode_lossy(&m.generate_until(&prompt, config.reorder_max_new, None)?);
    let predicted = parse_order(&raw, &doc.chronological_labels());
    Ok(ReorderReport {
        mode,
        score: pairwise_order_score(&predicted),
        raw,
        predicted,
        train: prepared.train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::segmenter::plan_overlap;

    fn small() -> Model<f32> {
        Model::new(ModelConfig {
            context_window: 128,
            embed_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ..ModelConfig::toy()
        })
        .unwrap()
    }

    fn cfg() -> EvalConfig {
        EvalConfig {
            lift: LiftConfig {
                epochs: 1,
                answer_reserve: 8,
                ..LiftConfig::toy(128)
            },
            ..EvalConfig::default()
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in EvalMode::ALL {
            assert_eq!(m.as_str().parse::<EvalMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("LIFT".parse::<EvalMode>().is_err());
        assert!(!EvalMode::SftIcl.adapts());
        assert!(EvalMode::SftLiftAtIcl.uses_auxiliary());
        assert!(!EvalMode::LiftOnly.uses_icl());
    }

    #[test]
    fn sft_modes_need_sft_model() {
        let m = small();
        let doc = synth::gen_fact_doc(3, 400, 1).unwrap();
        let err = run_eval(&m, ModelKind::Base, &doc, &doc.fact_qas(), EvalMode::SftLiftIcl, &cfg()).unwrap_err();
        assert!(err.to_string().contains("SFT"), "{err}");
        assert!(run_eval(&m, ModelKind::Sft, &doc, &doc.fact_qas(), EvalMode::Icl, &cfg()).is_err());
    }

    #[test]
    fn icl_prompts_drop_the_middle() {
        let m = small();
        let doc = synth::gen_fact_doc(9, 900, 2).unwrap();
        let qas = doc.fact_qas();
        let r = run_eval(&m, ModelKind::Base, &doc, &qas, EvalMode::Icl, &cfg()).unwrap();
        assert_eq!(r.records.len(), 9);
        for rec in &r.records {
            assert!(rec.prompt_len <= 128);
            if rec.third == Some(Third::Middle) {
                assert!(!rec.gold_in_prompt);
            }
        }
        assert_eq!(r.aggregates, Aggregates::from_records(&r.records));
        assert!(r.train.is_none());
    }

    #[test]
    fn lift_modes_leave_model_untouched() {
        let m = small();
        let before = model_hash(&m).unwrap();
        let doc = synth::gen_fact_doc(3, 300, 5).unwrap();
        let qas = doc.fact_qas();
        let r = run_eval(&m, ModelKind::Base, &doc, &qas, EvalMode::LiftAtIcl, &cfg()).unwrap();
        assert_eq!(model_hash(&m).unwrap(), before);
        assert_eq!(r.model_hash, before);
        assert!(r.train.is_some());
        assert!(r.aux_qa_pairs > 0);
    }

    #[test]
    fn auxiliary_pairs_avoid_held_out_questions() {
        let doc = synth::gen_fact_doc(12, 1200, 3).unwrap();
        let held = doc.fact_qas();
        let aux = auxiliary_qas(&doc, &held, &cfg(), 128);
        assert!(!aux.is_empty());
        for p in &aux.pairs {
            assert!(held.pairs.iter().all(|h| h.question != p.question));
        }
    }

    #[test]
    fn recitation_of_uniform_model_is_log_vocab() {
        let mut m = small();
        m.zero_output_head();
        let doc = synth::gen_fact_doc(0, 500, 1).unwrap().tokens();
        let plan = plan_overlap(500, 64, 24).unwrap();
        let r = eval_recitation(&m, &doc, &plan, 5, &RecitationConfig::default()).unwrap();
        assert_eq!(r.boundaries.len(), 5);
        assert!((r.mean_nll.unwrap() - 256f64.ln()).abs() < 1e-4);
        let empty = eval_recitation(&m, &doc, &plan, 0, &RecitationConfig::default()).unwrap();
        assert!(empty.boundaries.is_empty() && empty.mean_nll.is_none());
    }

    #[test]
    fn spread_is_even() {
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(spread(&all, 2), vec![2, 7]);
        assert_eq!(spread(&all, 20), all);
    }

    #[test]
    fn reorder_runs_for_every_base_mode() {
        let m = small();
        let doc = synth::gen_event_doc(4, 300, 1).unwrap();
        for mode in [EvalMode::Icl, EvalMode::LiftOnly] {
            let r = eval_reorder(&m, ModelKind::Base, &doc, mode, &EvalConfig { reorder_max_new: 8, ..cfg() }).unwrap();
            assert_eq!(r.predicted.len(), 4);
            assert!((0.0..=1.0).contains(&r.score));
        }
    }
}
