//! Supervised fine-tuning on many long documents ahead of test-time
//! adaptation: `L_SFT = (1/N) * sum_i (L_input(x_i) + gamma * L_AT(x_i))`.
//!
//! Each outer epoch visits the documents in a seeded order, accumulates every
//! document's joint-loss gradient scaled by `1/N`, and takes one optimizer
//! step. With a single document this is exactly one LIFT epoch.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::lift::{
    accumulate_doc_gradients, apply_step, build_samples, epoch_shuffle_seed, sample_losses, summarize_losses, DocLosses,
    EpochStats, LiftConfig, TrainReport,
};
use crate::model::{Model, TokenSeq};
use crate::numcore::{AdamWState, Real};
use crate::synth::QASet;
use crate::{seed, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lift: LiftConfig,
    /// Corpus size `N` when the corpus is generated.
    pub n_docs: usize,
    /// QA pairs per corpus document, `K`.
    pub qa_per_doc: usize,
    pub outer_epochs: usize,
    /// Length and fact count of generated corpus documents.
    pub doc_len: usize,
    pub n_facts: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lift: LiftConfig::default(),
            n_docs: 8,
            qa_per_doc: 16,
            outer_epochs: 4,
            doc_len: 2048,
            n_facts: 12,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self, window: usize) -> Result<()> {
        if self.n_docs == 0 {
            return Err(Error::Config("n_docs must be at least 1".into()));
        }
        if self.outer_epochs == 0 {
            return Err(Error::Config("outer_epochs must be at least 1".into()));
        }
        self.lift.validate(window)
    }
}

fn mean_losses(parts: &[DocLosses], gamma: f64) -> (f64, f64, f64) {
    let n = parts.len() as f64;
    let input = parts.iter().map(|l| l.input).sum::<f64>() / n;
    let at = parts.iter().map(|l| l.at).sum::<f64>() / n;
    (input, at, input + gamma * at)
}

/// Fine-tunes a copy of `base` on `corpus`. Report losses are corpus means.
pub fn sft_train<T: Real>(
    base: &Model<T>,
    corpus: &[(TokenSeq, QASet)],
    config: &SftConfig,
) -> Result<(Model<T>, TrainReport)> {
    let t0 = Instant::now();
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty fine-tuning corpus".into()));
    }
    config.validate(base.context_window())?;
    let lc = &config.lift;
    let docs = corpus
        .iter()
        .map(|(x, q)| build_samples(x, q, lc, base.context_window()))
        .collect::<Result<Vec<_>>>()?;
    let n = docs.len();
    let scale = 1.0 / n as f64;
    let mut model = base.clone();
    model.zero_grad();
    let mut state = AdamWState::new(model.params());
    let mut report = TrainReport {
        input_tokens: corpus.iter().map(|(x, _)| x.len()).sum(),
        ..Default::default()
    };
    report.timing.prepare = t0.elapsed();
    for epoch in 0..config.outer_epochs {
        let t = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::derived_rng(config.seed, "sft-order", epoch as u64));
        let mut parts = vec![DocLosses::default(); n];
        for &i in &order {
            let seed_i = epoch_shuffle_seed(lc.seed, epoch, i);
            let losses = accumulate_doc_gradients(&mut model, &docs[i], scale, lc.micro_batch, seed_i)?;
            parts[i] = summarize_losses(&docs[i], &losses, lc.reduction);
        }
        report.timing.forward_backward += t.elapsed();
        let t = Instant::now();
        let norm = apply_step(&mut model, &mut state, &lc.optimizer)?;
        report.timing.optimizer += t.elapsed();
        let (input, at, total) = mean_losses(&parts, lc.gamma);
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            input_loss: input,
            at_loss: at,
            total_loss: total,
            grad_norm_pre_clip: norm,
            segments: docs.iter().map(|d| d.segments).sum(),
            qa_pairs: docs.iter().map(|d| d.qa_pairs).sum(),
            tokens: docs.iter().map(|d| d.tokens()).sum(),
        });
    }
    if lc.final_eval {
        let t = Instant::now();
        let parts = docs
            .iter()
            .map(|d| Ok(summarize_losses(d, &sample_losses(&model, d)?, lc.reduction)))
            .collect::<Result<Vec<_>>>()?;
        let (input, at, total) = mean_losses(&parts, lc.gamma);
        report.final_input_loss = Some(input);
        report.final_at_loss = Some(at);
        report.final_total_loss = Some(total);
        report.timing.final_eval = t.elapsed();
    }
    Ok((model, report))
}

/// The accumulated gradient of one outer epoch at the current parameters,
/// without taking a step. Exposed for checking the `1/N` scaling.
pub fn epoch_gradient<T: Real>(
    model: &Model<T>,
    corpus: &[(TokenSeq, QASet)],
    config: &SftConfig,
    epoch: usize,
) -> Result<Vec<Vec<T>>> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty fine-tuning corpus".into()));
    }
    let lc = &config.lift;
    let mut m = model.clone();
    m.zero_grad();
    let scale = 1.0 / corpus.len() as f64;
    for (i, (x, q)) in corpus.iter().enumerate() {
        let d = build_samples(x, q, lc, m.context_window())?;
        accumulate_doc_gradients(&mut m, &d, scale, lc.micro_batch, epoch_shuffle_seed(lc.seed, epoch, i))?;
    }
    Ok(m
        .params()
        .iter()
        .map(|p| p.grad.clone().unwrap_or_else(|| vec![T::zero(); p.numel()]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lift::lift_adapt;
    use crate::model::ModelConfig;
    use crate::numcore::OptimHyper;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            context_window: 16,
            n_layers: 1,
            n_heads: 2,
            embed_dim: 8,
            seed: 4,
        }
    }

    fn cfg(epochs: usize) -> SftConfig {
        SftConfig {
            lift: LiftConfig {
                seg_len: 8,
                gamma: 0.0,
                optimizer: OptimHyper { learning_rate: 1e-2, ..Default::default() },
                ..LiftConfig::default()
            },
            outer_epochs: epochs,
            ..SftConfig::default()
        }
    }

    fn doc(k: u32) -> TokenSeq {
        TokenSeq::new((0..30u32).map(|i| (i * k + 1) % 32).collect())
    }

    #[test]
    fn single_document_matches_lift() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let c = cfg(1);
        let (s, rs) = sft_train(&m, &[(doc(3), QASet::empty())], &c).unwrap();
        let lc = LiftConfig { epochs: 1, ..c.lift.clone() };
        let (l, rl) = lift_adapt(&m, &doc(3), &QASet::empty(), &lc).unwrap();
        assert_eq!(s, l);
        assert_eq!(rs.epochs, rl.epochs);
    }

    #[test]
    fn deterministic_and_validated() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let corpus = vec![(doc(3), QASet::empty()), (doc(5), QASet::empty())];
        let a = sft_train(&m, &corpus, &cfg(2)).unwrap().0;
        let b = sft_train(&m, &corpus, &cfg(2)).unwrap().0;
        assert_eq!(a, b);
        assert!(sft_train(&m, &[], &cfg(1)).is_err());
        assert!(sft_train(&m, &corpus, &cfg(0)).is_err());
    }

    #[test]
    fn duplicated_corpus_has_same_gradient() {
        let m = Model::<f64>::new(tiny()).unwrap();
        let corpus = vec![(doc(3), QASet::empty()), (doc(7), QASet::empty())];
        let doubled: Vec<_> = corpus.iter().chain(&corpus).cloned().collect();
        let g1 = epoch_gradient(&m, &corpus, &cfg(1), 0).unwrap();
        let g2 = epoch_gradient(&m, &doubled, &cfg(1), 0).unwrap();
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
