//! Generic pretraining of a base model on seeded synthetic text.
//!
//! Random windows of filler-and-fact documents teach byte statistics and the
//! fact sentence format, and in-context QA examples show the question and
//! lead templates followed by an answer copied from the prompt. Documents
//! come from their own seed stream, disjoint from both test and fine-tuning
//! corpora.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lift::{accumulate_doc_gradients, apply_step, DocSamples, Sample};
use crate::model::{encode_str, Model};
use crate::numcore::{AdamWState, OptimHyper, Real};
use crate::synth::{self, FactDoc};
use crate::{seed, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Sequences per optimizer step.
    pub batch: usize,
    pub micro_batch: usize,
    pub doc_len: usize,
    pub n_facts: usize,
    /// Share of sequences that are in-context QA examples.
    pub icl_fraction: f64,
    pub optimizer: OptimHyper,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch: 8,
            micro_batch: 8,
            doc_len: 768,
            n_facts: 9,
            icl_fraction: 0.5,
            optimizer: OptimHyper {
                learning_rate: 2e-3,
                ..OptimHyper::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean sample loss of every step, measured before the step.
    pub losses: Vec<f64>,
}

/// Seed of the `i`-th pretraining document; its own labeled stream.
pub fn pretrain_doc_seed(root: u64, i: u64) -> u64 {
    seed::derive(root, "pretrain-doc", i)
}

/// An in-context example: a window of the document that contains one fact
/// sentence, then that fact's question and lead; only the answer is scored.
fn icl_example(doc: &FactDoc, window: usize, rng: &mut impl Rng) -> Option<Sample> {
    if doc.facts.is_empty() {
        return None;
    }
    let f = &doc.facts[rng.random_range(0..doc.facts.len())];
    let qa = doc.fact_qas().pairs.into_iter().find(|p| p.source_span == f.span())?;
    let tail = format!("\n{}", qa.prompt_text());
    let room = window.checked_sub(tail.len() + qa.answer.len())?;
    let span = f.span();
    if span.len() > room {
        return None;
    }
    let ctx_len = rng.random_range(span.len()..=room);
    let lo = span.end.saturating_sub(ctx_len);
    let hi = span.start.min(doc.text.len() - ctx_len);
    let start = rng.random_range(lo..=hi.max(lo));
    let prefix = format!("{}{tail}", &doc.text[start..start + ctx_len]);
    let first_target = prefix.len();
    Some(Sample {
        tokens: encode_str(&(prefix + &qa.answer)),
        first_target,
        weight: 0.0,
        is_qa: true,
    })
}

fn lm_window(doc: &FactDoc, window: usize, rng: &mut impl Rng) -> Sample {
    let n = window.min(doc.text.len());
    let start = rng.random_range(0..=doc.text.len() - n);
    Sample {
        tokens: encode_str(&doc.text[start..start + n]),
        first_target: 1,
        weight: 0.0,
        is_qa: false,
    }
}

/// Trains a copy of `base` with one AdamW step per batch of sequences.
pub fn pretrain<T: Real>(base: &Model<T>, config: &PretrainConfig) -> Result<(Model<T>, PretrainReport)> {
    if config.batch == 0 || config.micro_batch == 0 {
        return Err(Error::Config("batch and micro_batch must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.icl_fraction) {
        return Err(Error::Config("icl_fraction must lie in [0, 1]".into()));
    }
    config.optimizer.validate()?;
    let window = base.context_window();
    let mut model = base.clone();
    model.zero_grad();
    let mut state = AdamWState::new(model.params());
    let mut report = PretrainReport::default();
    let mut rng = seed::derived_rng(config.seed, "pretrain-windows", 0);
    let mut doc_index = 0u64;
    for step in 0..config.steps {
        let mut samples = Vec::with_capacity(config.batch);
        while samples.len() < config.batch {
            let doc = synth::gen_fact_doc(config.n_facts, config.doc_len, pretrain_doc_seed(config.seed, doc_index))?;
            doc_index += 1;
            let icl = rng.random_bool(config.icl_fraction);
            let s = if icl { icl_example(&doc, window, &mut rng) } else { None };
            samples.push(s.unwrap_or_else(|| lm_window(&doc, window, &mut rng)));
        }
        let w = 1.0 / samples.len() as f64;
        samples.iter_mut().for_each(|s| s.weight = w);
        let doc = DocSamples {
            segments: samples.len(),
            qa_pairs: 0,
            gamma: 0.0,
            samples,
        };
        let order_seed = seed::derive(config.seed, "pretrain-order", step as u64);
        let losses = accumulate_doc_gradients(&mut model, &doc, 1.0, config.micro_batch, order_seed)?;
        apply_step(&mut model, &mut state, &config.optimizer)?;
        report.losses.push(losses.iter().sum::<f64>() * w);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn icl_examples_contain_their_fact() {
        let doc = synth::gen_fact_doc(6, 600, 3).unwrap();
        let mut rng = seed::rng(1);
        for _ in 0..50 {
            let s = icl_example(&doc, 128, &mut rng).unwrap();
            assert!(s.tokens.len() <= 128);
            let text = crate::model::decode_lossy(&s.tokens);
            let answer = &text[s.first_target..];
            let prefix = &text[..s.first_target];
            assert!(prefix.contains(&format!(" is {answer}.")), "{text:?}");
        }
        assert!(icl_example(&doc, 40, &mut rng).is_none());
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let cfg = ModelConfig {
            context_window: 32,
            embed_dim: 32,
            n_layers: 1,
            ..ModelConfig::toy()
        };
        let m = Model::<f32>::new(cfg).unwrap();
        let pc = PretrainConfig { steps: 30, batch: 4, doc_len: 300, n_facts: 3, ..Default::default() };
        let (a, ra) = pretrain(&m, &pc).unwrap();
        let (b, _) = pretrain(&m, &pc).unwrap();
        assert_eq!(a, b);
        let head: f64 = ra.losses[..5].iter().sum();
        let tail: f64 = ra.losses[25..].iter().sum();
        assert!(tail < head, "{:?}", ra.losses);
    }
}
