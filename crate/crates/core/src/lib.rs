//! Test-time adaptation of short-context causal language models to a single
//! long input by fine-tuning on overlapping segments of that input.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`]: tensors, a reverse-mode tape, AdamW and gradient clipping.
//! * [`model`]: a byte-level decoder-only transformer with a fixed context window.
//! * [`segmenter`]: overlapping and trivial segmentation plans, truncated-context prompts.
//! * [`synth`]: seeded synthetic documents with known facts, template QA synthesis.
//! * [`pretrain`]: generic pretraining of a base model on synthetic text.
//! * [`lift`]: the adaptation loop over segments and auxiliary QA pairs.
//! * [`sft`]: multi-document supervised fine-tuning ahead of adaptation.
//! * [`evalbench`]: evaluation modes, metrics, timing harness and scaling fits.

pub mod error;
pub mod evalbench;
pub mod lift;
pub mod model;
pub mod numcore;
pub mod pretrain;
pub mod seed;
pub mod segmenter;
pub mod sft;
pub mod synth;

pub use error::{Error, Result};
