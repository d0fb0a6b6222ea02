//! Long-input fine-tuning: adapt a copy of a short-context model to one long
//! input by training on its segments, optionally jointly with auxiliary QA.
//!
//! The objective is `L = L_input + gamma * L_AT`. With the default
//! [`Reduction::Mean`], `L_input` is the mean over segments of the per-token
//! mean NLL and `L_AT` the mean over QA pairs of the answer-token mean NLL.
//! [`Reduction::Sum`] sums over segments and pairs instead, still with
//! per-token means inside each term.
//!
//! Each epoch accumulates gradients over every sample in micro-batches and
//! then applies exactly one clipped AdamW step.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::model::{Model, TokenSeq};
use crate::numcore::{adamw_step, clip_grad_norm, AdamWState, Graph, OptimHyper, Real};
use crate::segmenter::{self, PlanKind, SegmentationPlan};
use crate::synth::QASet;
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiftConfig {
    pub seg_len: usize,
    /// `None` selects `floor(3 * seg_len / 8)`.
    pub stride: Option<usize>,
    pub segmentation: PlanKind,
    pub gamma: f64,
    pub epochs: usize,
    pub use_auxiliary: bool,
    /// Number of auxiliary QA pairs to synthesize when none are supplied.
    pub m: usize,
    pub reduction: Reduction,
    pub optimizer: OptimHyper,
    pub micro_batch: usize,
    /// `None` derives the budget from the window, question and reserve.
    pub icl_budget: Option<usize>,
    pub head_fraction: f64,
    pub answer_reserve: usize,
    /// Evaluate the objective once more after the last step.
    pub final_eval: bool,
    pub seed: u64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        LiftConfig {
            seg_len: 2048,
            stride: None,
            segmentation: PlanKind::Overlap,
            gamma: 1.0,
            epochs: 8,
            use_auxiliary: true,
            m: 16,
            reduction: Reduction::Mean,
            optimizer: OptimHyper::default(),
            micro_batch: 4,
            icl_budget: None,
            head_fraction: 0.5,
            answer_reserve: 32,
            final_eval: true,
            seed: 0,
        }
    }
}

/// Learning rate of the toy presets. The reference rate of 1e-6 barely moves
/// a freshly initialised half-million-parameter model in eight steps.
pub const TOY_LEARNING_RATE: f64 = 3e-3;

impl LiftConfig {
    /// Reference defaults with the segment length scaled to `W / 2`.
    pub fn scaled_to(window: usize) -> Self {
        LiftConfig {
            seg_len: window / 2,
            ..Self::default()
        }
    }

    /// [`LiftConfig::scaled_to`] with the toy learning rate.
    pub fn toy(window: usize) -> Self {
        let mut c = Self::scaled_to(window);
        c.optimizer.learning_rate = TOY_LEARNING_RATE;
        c
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or_else(|| segmenter::default_stride(self.seg_len))
    }

    pub fn plan(&self, input_len: usize) -> Result<SegmentationPlan> {
        match self.segmentation {
            PlanKind::Overlap => segmenter::plan_overlap(input_len, self.seg_len, self.stride()),
            PlanKind::Trivial => segmenter::plan_trivial(input_len, self.seg_len),
        }
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        if self.seg_len < 2 || self.seg_len > window {
            return Err(Error::Config(format!(
                "seg_len {} must lie in [2, {window}] for a {window}-token window",
                self.seg_len
            )));
        }
        let s = self.stride();
        if self.segmentation == PlanKind::Overlap && (s == 0 || s >= self.seg_len) {
            return Err(Error::Config(format!("stride {s} must lie in [1, seg_len)")));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.micro_batch == 0 {
            return Err(Error::Config("micro_batch must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.head_fraction) {
            return Err(Error::Config("head_fraction must lie in [0, 1]".into()));
        }
        self.optimizer.validate()
    }

    fn aux_active(&self, qas: &QASet) -> bool {
        self.use_auxiliary && self.gamma > 0.0 && !qas.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Objective terms measured during the epoch, before its update.
    pub input_loss: f64,
    pub at_loss: f64,
    pub total_loss: f64,
    pub grad_norm_pre_clip: f64,
    pub segments: usize,
    pub qa_pairs: usize,
    pub tokens: usize,
}

/// Wall time per phase. Kept out of serialized reports so reruns compare
/// byte for byte.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub prepare: Duration,
    pub forward_backward: Duration,
    pub optimizer: Duration,
    pub final_eval: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.prepare + self.forward_backward + self.optimizer + self.final_eval
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Objective after the last step, when `final_eval` is set.
    pub final_input_loss: Option<f64>,
    pub final_at_loss: Option<f64>,
    pub final_total_loss: Option<f64>,
    pub input_tokens: usize,
    #[serde(skip)]
    pub timing: PhaseTimes,
}

impl TrainReport {
    pub fn first_input_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.input_loss)
    }

    /// Input loss after training if it was measured, else the last epoch's.
    pub fn last_input_loss(&self) -> Option<f64> {
        self.final_input_loss.or(self.epochs.last().map(|e| e.input_loss))
    }
}

/// A scored sequence: targets are `tokens[first_target..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: TokenSeq,
    pub first_target: usize,
    pub weight: f64,
    pub is_qa: bool,
}

/// Everything one document contributes to an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct DocSamples {
    pub samples: Vec<Sample>,
    pub segments: usize,
    pub qa_pairs: usize,
    pub gamma: f64,
}

impl DocSamples {
    pub fn tokens(&self) -> usize {
        self.samples.iter().map(|s| s.tokens.len()).sum()
    }
}

/// Segments (shorter than two tokens are dropped) followed by QA pairs, each
/// carrying its weight in the joint objective.
pub fn build_samples(input: &TokenSeq, qas: &QASet, config: &LiftConfig, window: usize) -> Result<DocSamples> {
    config.validate(window)?;
    if input.len() < 2 {
        return Err(Error::InvalidInput("input must contain at least two tokens".into()));
    }
    let plan = config.plan(input.len())?;
    let segs: Vec<TokenSeq> = segmenter::extract(input, &plan)?
        .into_iter()
        .filter(|s| s.len() >= 2)
        .collect();
    let k = segs.len();
    let seg_w = match config.reduction {
        Reduction::Mean => 1.0 / k as f64,
        Reduction::Sum => 1.0,
    };
    let mut samples: Vec<Sample> = segs
        .into_iter()
        .map(|tokens| Sample {
            tokens,
            first_target: 1,
            weight: seg_w,
            is_qa: false,
        })
        .collect();
    let mut m = 0;
    if config.aux_active(qas) {
        m = qas.len();
        let qa_w = config.gamma
            * match config.reduction {
                Reduction::Mean => 1.0 / m as f64,
                Reduction::Sum => 1.0,
            };
        for (i, p) in qas.pairs.iter().enumerate() {
            let prompt = p.prompt();
            let answer = p.answer_tokens();
            if answer.is_empty() {
                return Err(Error::InvalidInput(format!("QA pair {i} has an empty answer")));
            }
            if prompt.len() + answer.len() > window {
                return Err(Error::Config(format!(
                    "QA pair {i} needs {} tokens, more than the {window}-token window",
                    prompt.len() + answer.len()
                )));
            }
            samples.push(Sample {
                first_target: prompt.len(),
                tokens: TokenSeq::concat(&[&prompt, &answer]),
                weight: qa_w,
                is_qa: true,
            });
        }
    }
    Ok(DocSamples {
        samples,
        segments: k,
        qa_pairs: m,
        gamma: config.gamma,
    })
}

/// Mean losses of one document's samples, summed in sample order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DocLosses {
    pub input: f64,
    pub at: f64,
    pub total: f64,
}

/// Reduces per-sample losses to the objective terms of one document.
pub fn summarize_losses(doc: &DocSamples, losses: &[f64], reduction: Reduction) -> DocLosses {
    let mut input = 0.0;
    let mut at = 0.0;
    for (s, &l) in doc.samples.iter().zip(losses) {
        if s.is_qa {
            at += l;
        } else {
            input += l;
        }
    }
    if reduction == Reduction::Mean {
        input /= doc.segments.max(1) as f64;
        at /= doc.qa_pairs.max(1) as f64;
    }
    DocLosses {
        input,
        at,
        total: input + doc.gamma * at,
    }
}

/// Seed for the sample order of document `doc_index` in epoch `epoch`.
pub fn epoch_shuffle_seed(root: u64, epoch: usize, doc_index: usize) -> u64 {
    seed::derive(seed::derive(root, "lift-epoch", epoch as u64), "doc", doc_index as u64)
}

/// Adds `scale * d(sum_i w_i L_i)/d(theta)` over the document's samples into
/// the model's gradient buffers, visiting samples in a seeded shuffled order
/// in micro-batches. Returns the per-sample losses in their original order.
pub fn accumulate_doc_gradients<T: Real>(
    model: &mut Model<T>,
    doc: &DocSamples,
    scale: f64,
    micro_batch: usize,
    shuffle_seed: u64,
) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..doc.samples.len()).collect();
    order.shuffle(&mut seed::rng(shuffle_seed));
    let mut losses = vec![0.0; doc.samples.len()];
    for chunk in order.chunks(micro_batch.max(1)) {
        let grads = {
            let mut g = Graph::new();
            let pv = model.register(&mut g)?;
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &doc.samples[i];
                let l = model.loss_on_graph(&mut g, &pv, &s.tokens, s.first_target)?;
                losses[i] = g.scalar(l)?.f64();
                terms.push((l, s.weight * scale));
            }
            let total = g.weighted_sum(&terms)?;
            let mut grads = g.backward(total)?;
            pv.vars()
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take(v, p.numel()))
                .collect::<Vec<_>>()
        };
        for (p, gr) in model.params_mut().iter_mut().zip(grads) {
            p.accumulate_grad(&gr, T::one())?;
        }
    }
    Ok(losses)
}

/// Forward-only per-sample losses, in sample order.
pub fn sample_losses<T: Real>(model: &Model<T>, doc: &DocSamples) -> Result<Vec<f64>> {
    doc.samples
        .iter()
        .map(|s| {
            if s.is_qa {
                let q = s.tokens.slice(0..s.first_target);
                let a = s.tokens.slice(s.first_target..s.tokens.len());
                model.qa_loss(&q, &a).map(|x| x.f64())
            } else {
                model.lm_loss(&s.tokens).map(|x| x.f64())
            }
        })
        .collect()
}

/// Mean (over segments) of the per-token mean NLL of each segment.
pub fn loss_input<T: Real>(model: &Model<T>, segments: &[TokenSeq]) -> Result<f64> {
    if segments.is_empty() {
        return Err(Error::InvalidInput("loss_input over no segments".into()));
    }
    let mut total = 0.0;
    for s in segments {
        total += model.lm_loss(s)?.f64();
    }
    Ok(total / segments.len() as f64)
}

/// Mean over pairs of the answer-only NLL; exactly 0 for an empty set.
pub fn loss_auxiliary<T: Real>(model: &Model<T>, qas: &QASet) -> Result<f64> {
    if qas.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in &qas.pairs {
        total += model.qa_loss(&p.prompt(), &p.answer_tokens())?.f64();
    }
    Ok(total / qas.len() as f64)
}

/// `loss_input + gamma * loss_auxiliary`; the auxiliary term is not
/// evaluated when `gamma == 0`.
pub fn joint_loss<T: Real>(model: &Model<T>, segments: &[TokenSeq], qas: &QASet, gamma: f64) -> Result<f64> {
    let input = loss_input(model, segments)?;
    if gamma == 0.0 {
        return Ok(input);
    }
    Ok(input + gamma * loss_auxiliary(model, qas)?)
}

/// One clipped AdamW step on the accumulated gradients, which are then
/// cleared. Returns the pre-clip global norm.
pub fn apply_step<T: Real>(model: &mut Model<T>, state: &mut AdamWState<T>, hyper: &OptimHyper) -> Result<f64> {
    let norm = clip_grad_norm(model.params_mut(), hyper.max_grad_norm)?;
    adamw_step(model.params_mut(), state, hyper)?;
    model.zero_grad();
    Ok(norm)
}

/// Adapts a copy of `base` to `input`. The base model is not modified.
pub fn lift_adapt<T: Real>(
    base: &Model<T>,
    input: &TokenSeq,
    qas: &QASet,
    config: &LiftConfig,
) -> Result<(Model<T>, TrainReport)> {
    let t0 = Instant::now();
    let doc = build_samples(input, qas, config, base.context_window())?;
    let mut model = base.clone();
    model.zero_grad();
    let mut state = AdamWState::new(model.params());
    let mut report = TrainReport {
        input_tokens: input.len(),
        ..Default::default()
    };
    report.timing.prepare = t0.elapsed();
    for epoch in 0..config.epochs {
        let t = Instant::now();
        let order_seed = epoch_shuffle_seed(config.seed, epoch, 0);
        let losses = accumulate_doc_gradients(&mut model, &doc, 1.0, config.micro_batch, order_seed)?;
        report.timing.forward_backward += t.elapsed();
        let t = Instant::now();
        let norm = apply_step(&mut model, &mut state, &config.optimizer)?;
        report.timing.optimizer += t.elapsed();
        let l = summarize_losses(&doc, &losses, config.reduction);
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            input_loss: l.input,
            at_loss: l.at,
            total_loss: l.total,
            grad_norm_pre_clip: norm,
            segments: doc.segments,
            qa_pairs: doc.qa_pairs,
            tokens: doc.tokens(),
        });
    }
    if config.final_eval {
        let t = Instant::now();
        let l = summarize_losses(&doc, &sample_losses(&model, &doc)?, config.reduction);
        report.final_input_loss = Some(l.input);
        report.final_at_loss = Some(l.at);
        report.final_total_loss = Some(l.total);
        report.timing.final_eval = t.elapsed();
    }
    Ok((model, report))
}
