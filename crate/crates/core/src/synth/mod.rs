//! Seeded long-document generators with exact ground truth, plus template
//! QA synthesis over sampled short spans.

pub mod io;
mod words;

use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{encode_str, TokenSeq};
use crate::{seed, Error, Result};

pub use words::{EVENTS, KEYS, VALUE_ALPHABET, VALUE_LEN};

/// One key/value fact. `position` is the byte offset of `sentence` in the text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub key: String,
    pub value: String,
    pub position: usize,
    pub sentence: String,
}

impl Fact {
    pub fn span(&self) -> Range<usize> {
        self.position..self.position + self.sentence.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactDoc {
    pub text: String,
    pub facts: Vec<Fact>,
    pub filler_seed: u64,
    pub target_len: usize,
}

/// Which third of the document a byte span lies in, if it lies in one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Third {
    Head,
    Middle,
    Tail,
}

pub fn third_of(span: &Range<usize>, len: usize) -> Option<Third> {
    let a = len / 3;
    let b = 2 * len / 3;
    if span.end <= a {
        Some(Third::Head)
    } else if span.start >= a && span.end <= b {
        Some(Third::Middle)
    } else if span.start >= b {
        Some(Third::Tail)
    } else {
        None
    }
}

impl FactDoc {
    pub fn tokens(&self) -> TokenSeq {
        encode_str(&self.text)
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn middle_facts(&self) -> impl Iterator<Item = &Fact> {
        let n = self.text.len();
        self.facts
            .iter()
            .filter(move |f| third_of(&f.span(), n) == Some(Third::Middle))
    }

    /// Fact-recall pair for every fact, in document order.
    pub fn fact_qas(&self) -> QASet {
        QASet::new(self.facts.iter().map(fact_qa).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub label: String,
    pub year: u32,
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventDoc {
    pub text: String,
    /// Events in narrative order.
    pub events: Vec<Event>,
    /// `true_order[k]` is the narrative index of the k-th event in time.
    pub true_order: Vec<usize>,
}

impl EventDoc {
    pub fn tokens(&self) -> TokenSeq {
        encode_str(&self.text)
    }

    pub fn chronological_labels(&self) -> Vec<String> {
        self.true_order.iter().map(|&i| self.events[i].label.clone()).collect()
    }

    /// The same text viewed as a document without key/value facts, so that
    /// QA synthesis yields cloze pairs only.
    pub fn as_fact_doc(&self) -> FactDoc {
        FactDoc {
            text: self.text.clone(),
            facts: Vec::new(),
            filler_seed: 0,
            target_len: self.text.len(),
        }
    }
}

/// A question, an optional answer lead-in, and the gold answer. The model is
/// conditioned on [`QAPair::prompt`] and scored on `answer` only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    #[serde(default)]
    pub lead: String,
    pub answer: String,
    pub source_span: Range<usize>,
}

impl QAPair {
    pub fn prompt_text(&self) -> String {
        if self.lead.is_empty() {
            format!("{}\n", self.question)
        } else {
            format!("{}\n{}", self.question, self.lead)
        }
    }

    pub fn prompt(&self) -> TokenSeq {
        encode_str(&self.prompt_text())
    }

    pub fn answer_tokens(&self) -> TokenSeq {
        encode_str(&self.answer)
    }

    pub fn len(&self) -> usize {
        self.prompt_text().len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answer.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QAStatus {
    #[default]
    Ok,
    /// No span was sampled, so there is nothing to train on.
    Empty,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASet {
    pub pairs: Vec<QAPair>,
    pub status: QAStatus,
}

impl QASet {
    pub fn new(pairs: Vec<QAPair>) -> Self {
        let status = if pairs.is_empty() { QAStatus::Empty } else { QAStatus::Ok };
        QASet { pairs, status }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    /// `m`.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn truncated(mut self, n: usize) -> Self {
        self.pairs.truncate(n);
        Self::new(self.pairs)
    }
}

pub fn fact_sentence(key: &str, value: &str) -> String {
    format!("The code of {key} is {value}.")
}

fn fact_lead(key: &str) -> String {
    format!("The code of {key} is ")
}

pub fn fact_question(key: &str) -> String {
    format!("What is the code of {key}?")
}

fn fact_qa(f: &Fact) -> QAPair {
    QAPair {
        question: fact_question(&f.key),
        lead: fact_lead(&f.key),
        answer: f.value.clone(),
        source_span: f.span(),
    }
}

pub const CLOZE_QUESTION: &str = "Finish the sentence.";

/// Appends seeded filler of exactly `n` bytes. Every word is preceded by a
/// space unless `out` is empty; near the end only words that fit are drawn.
fn push_filler(out: &mut String, n: usize, rng: &mut ChaCha8Rng) {
    let mut left = n;
    while left > 0 {
        let sep = usize::from(!out.is_empty() && !out.ends_with(' '));
        if left <= sep {
            out.push(' ');
            left -= 1;
            continue;
        }
        let room = left - sep;
        let fits: Vec<&str> = words::FILLER.iter().copied().filter(|w| w.len() <= room).collect();
        let word = *fits.choose(rng).expect("the one-letter filler word always fits");
        if sep == 1 {
            out.push(' ');
        }
        out.push_str(word);
        left -= sep + word.len();
        // Occasional sentence breaks make the salad read as prose.
        if left > 1 && rng.random_ratio(1, 9) {
            out.push('.');
            left -= 1;
        }
    }
}

fn draw_value(rng: &mut ChaCha8Rng) -> String {
    (0..VALUE_LEN)
        .map(|_| *VALUE_ALPHABET.choose(rng).unwrap() as char)
        .collect()
}

/// Number of facts assigned to the head, middle and tail thirds. The
/// remainder goes to the middle, so a document with `n >= 3` facts always
/// has at least `n / 3` out-of-window facts.
pub fn facts_per_third(n: usize) -> [usize; 3] {
    let edge = n / 3;
    [edge, n - 2 * edge, edge]
}

/// Word-salad document of exactly `target_len` bytes with `n_facts` fact
/// sentences. Facts are split over the thirds by [`facts_per_third`] and
/// placed with stratified jitter inside each third.
pub fn gen_fact_doc(n_facts: usize, target_len: usize, seed: u64) -> Result<FactDoc> {
    if n_facts > KEYS.len() {
        return Err(Error::Config(format!("at most {} facts per document", KEYS.len())));
    }
    let mut rng = seed::derived_rng(seed, "fact-doc", 0);
    let mut keys: Vec<&str> = KEYS.to_vec();
    keys.shuffle(&mut rng);
    let mut values = Vec::with_capacity(n_facts);
    while values.len() < n_facts {
        let v = draw_value(&mut rng);
        if !values.contains(&v) {
            values.push(v);
        }
    }
    let sentences: Vec<String> = (0..n_facts).map(|i| fact_sentence(keys[i], &values[i])).collect();

    // Choose a start offset for each fact.
    let bounds = [0, target_len / 3, 2 * target_len / 3, target_len];
    let counts = facts_per_third(n_facts);
    let mut starts = Vec::with_capacity(n_facts);
    let mut idx = 0;
    for third in 0..3 {
        let (lo, hi) = (bounds[third], bounds[third + 1]);
        let c = counts[third];
        if c == 0 {
            continue;
        }
        let width = (hi - lo) / c;
        for j in 0..c {
            // Two separator bytes of slack on each side of the sentence.
            let need = sentences[idx].len() + 4;
            if width < need {
                return Err(Error::Config(format!(
                    "document length {target_len} is too small for {n_facts} facts"
                )));
            }
            let slot = lo + j * width;
            starts.push(slot + 2 + rng.random_range(0..=width - need));
            idx += 1;
        }
    }

    let filler_seed = seed::derive(seed, "filler", 0);
    let mut frng = seed::rng(filler_seed);
    let mut text = String::with_capacity(target_len);
    let mut facts = Vec::with_capacity(n_facts);
    for i in 0..n_facts {
        let gap = starts[i] - 1 - text.len();
        push_filler(&mut text, gap, &mut frng);
        text.push(' ');
        facts.push(Fact {
            key: keys[i].to_string(),
            value: values[i].clone(),
            position: text.len(),
            sentence: sentences[i].clone(),
        });
        text.push_str(&sentences[i]);
    }
    let rest = target_len - text.len();
    push_filler(&mut text, rest, &mut frng);
    debug_assert_eq!(text.len(), target_len);
    Ok(FactDoc {
        text,
        facts,
        filler_seed,
        target_len,
    })
}

/// Range of the last word wholly inside `span` that is preceded by at
/// least one byte of the span.
fn cloze_word(text: &str, span: &Range<usize>) -> Option<Range<usize>> {
    let b = text.as_bytes();
    let is_word = |c: u8| c.is_ascii_alphanumeric();
    let mut best = None;
    let mut i = span.start;
    while i < span.end {
        if !is_word(b[i]) {
            i += 1;
            continue;
        }
        let s = i;
        while i < span.end && is_word(b[i]) {
            i += 1;
        }
        let whole = (s == 0 || !is_word(b[s - 1])) && (i == b.len() || !is_word(b[i]));
        if whole && s > span.start {
            best = Some(s..i);
        }
    }
    best
}

/// Samples `n_segments` spans of `seg_len` bytes. Each fact sentence fully
/// inside a span yields its recall pair; a span without facts yields one
/// cloze pair whose answer is the span's last whole word.
pub fn synth_qa_from_segments(doc: &FactDoc, n_segments: usize, seg_len: usize, seed: u64) -> QASet {
    let mut rng = seed::derived_rng(seed, "qa-spans", 0);
    let n = doc.text.len();
    let seg_len = seg_len.min(n);
    let mut pairs = Vec::new();
    for _ in 0..n_segments {
        if seg_len == 0 {
            break;
        }
        let start = rng.random_range(0..=n - seg_len);
        let span = start..start + seg_len;
        let inside: Vec<&Fact> = doc
            .facts
            .iter()
            .filter(|f| f.position >= span.start && f.span().end <= span.end)
            .collect();
        if inside.is_empty() {
            if let Some(w) = cloze_word(&doc.text, &span) {
                pairs.push(QAPair {
                    question: CLOZE_QUESTION.to_string(),
                    lead: doc.text[span.start..w.start].to_string(),
                    answer: doc.text[w.clone()].to_string(),
                    source_span: span,
                });
            }
        } else {
            pairs.extend(inside.into_iter().map(fact_qa));
        }
    }
    QASet::new(pairs)
}

fn event_sentence(cue: &str, year: u32, label: &str) -> String {
    format!("{cue}, in the year {year}, came the {label}.")
}

/// Timeline document: `n_events` dated events told in a shuffled order,
/// each with a narrative cue, padded with filler to `target_len` bytes.
pub fn gen_event_doc(n_events: usize, target_len: usize, seed: u64) -> Result<EventDoc> {
    if n_events == 0 || n_events > EVENTS.len() {
        return Err(Error::Config(format!("n_events must be in 1..={}", EVENTS.len())));
    }
    let mut rng = seed::derived_rng(seed, "event-doc", 0);
    let mut labels: Vec<&str> = EVENTS.to_vec();
    labels.shuffle(&mut rng);
    labels.truncate(n_events);
    let mut year = rng.random_range(1100..1500u32);
    let mut years = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        years.push(year);
        year += rng.random_range(3..40u32);
    }
    // narrative[p] = chronological index told at narrative position p.
    let mut narrative: Vec<usize> = (0..n_events).collect();
    narrative.shuffle(&mut rng);
    let mut true_order = vec![0; n_events];
    for (p, &c) in narrative.iter().enumerate() {
        true_order[c] = p;
    }
    let sentences: Vec<String> = narrative
        .iter()
        .enumerate()
        .map(|(p, &c)| {
            let cue = if p + 1 == n_events && n_events > 1 {
                words::FINAL_CUE
            } else {
                words::CUES[p.min(words::CUES.len() - 1)]
            };
            event_sentence(cue, years[c], labels[c])
        })
        .collect();
    let used: usize = sentences.iter().map(|s| s.len() + 1).sum();
    if used + 2 * n_events > target_len {
        return Err(Error::Config(format!(
            "document length {target_len} is too small for {n_events} events"
        )));
    }
    let slack = target_len - used;
    let mut cuts: Vec<usize> = (0..n_events).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut frng = seed::derived_rng(seed, "event-filler", 0);
    let mut text = String::with_capacity(target_len);
    let mut events = Vec::with_capacity(n_events);
    let mut spent = 0;
    for (p, s) in sentences.iter().enumerate() {
        push_filler(&mut text, cuts[p] - spent, &mut frng);
        spent = cuts[p];
        text.push(' ');
        events.push(Event {
            label: labels[narrative[p]].to_string(),
            year: years[narrative[p]],
            position: text.len(),
        });
        text.push_str(s);
    }
    let rest = target_len - text.len();
    push_filler(&mut text, rest, &mut frng);
    debug_assert_eq!(text.len(), target_len);
    Ok(EventDoc {
        text,
        events,
        true_order,
    })
}

const TOP_BIT: u64 = 1 << 63;

/// Seed of the `i`-th pre-training corpus document. Corpus seeds have the
/// top bit set and [`test_doc_seed`] values never do, so the two streams
/// cannot collide.
pub fn sft_doc_seed(root: u64, i: u64) -> u64 {
    seed::derive(root, "sft-corpus-doc", i) | TOP_BIT
}

pub fn test_doc_seed(root: u64, i: u64) -> u64 {
    seed::derive(root, "test-doc", i) & !TOP_BIT
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub doc: FactDoc,
    pub qas: QASet,
}

/// `n_docs` documents from the reserved corpus seed stream, each with up to
/// `qa_per_doc` synthesized pairs over spans of `qa_span` bytes.
pub fn gen_sft_corpus(
    n_docs: usize,
    qa_per_doc: usize,
    n_facts: usize,
    target_len: usize,
    qa_span: usize,
    seed: u64,
) -> Result<Vec<CorpusEntry>> {
    (0..n_docs as u64)
        .map(|i| {
            let s = sft_doc_seed(seed, i);
            let doc = gen_fact_doc(n_facts, target_len, s)?;
            let qas = synth_qa_from_segments(&doc, qa_per_doc, qa_span, s).truncated(qa_per_doc);
            Ok(CorpusEntry { doc, qas })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decode_lossy, encode_str};
    use std::collections::HashSet;

    #[test]
    fn fact_sentences_are_where_recorded() {
        let d = gen_fact_doc(12, 2000, 5).unwrap();
        assert_eq!(d.text.len(), 2000);
        for f in &d.facts {
            assert_eq!(&d.text[f.span()], f.sentence);
            assert!(f.sentence.contains(&f.value));
        }
        let values: HashSet<_> = d.facts.iter().map(|f| &f.value).collect();
        assert_eq!(values.len(), 12);
        assert!(d.text.is_ascii());
    }

    #[test]
    fn pure_filler() {
        let d = gen_fact_doc(0, 333, 1).unwrap();
        assert!(d.facts.is_empty());
        assert_eq!(d.text.len(), 333);
        assert!(!d.text.contains("code"));
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(gen_fact_doc(5, 900, 2).unwrap(), gen_fact_doc(5, 900, 2).unwrap());
        assert_ne!(gen_fact_doc(5, 900, 2).unwrap(), gen_fact_doc(5, 900, 3).unwrap());
    }

    #[test]
    fn middle_third_receives_facts() {
        for s in 0..20 {
            let d = gen_fact_doc(10, 8 * 64, s).unwrap();
            assert!(d.middle_facts().count() >= 3);
        }
    }

    #[test]
    fn too_short_rejected() {
        assert!(matches!(gen_fact_doc(10, 100, 0), Err(Error::Config(_))));
    }

    #[test]
    fn fact_qa_template() {
        let f = Fact {
            key: "alpha".into(),
            value: "7Q2".into(),
            position: 0,
            sentence: fact_sentence("alpha", "7Q2"),
        };
        let q = fact_qa(&f);
        assert_eq!(q.question, "What is the code of alpha?");
        assert_eq!(q.answer, "7Q2");
        let doc = FactDoc {
            text: f.sentence.clone() + " the end",
            facts: vec![f],
            filler_seed: 0,
            target_len: 33,
        };
        let qs = synth_qa_from_segments(&doc, 1, doc.text.len(), 0);
        assert_eq!(qs.pairs, vec![q]);
    }

    #[test]
    fn qa_answers_found_in_source() {
        let d = gen_fact_doc(8, 1500, 4).unwrap();
        let qs = synth_qa_from_segments(&d, 40, 32, 9);
        assert!(qs.pairs.len() >= 40);
        for p in &qs.pairs {
            assert!(d.text[p.source_span.clone()].contains(&p.answer), "{p:?}");
            assert!(!p.answer.is_empty());
            if p.question == CLOZE_QUESTION {
                assert_eq!(format!("{}{}", p.lead, p.answer), d.text[p.source_span.start..p.source_span.start + p.lead.len() + p.answer.len()]);
            }
        }
        assert_eq!(qs, synth_qa_from_segments(&d, 40, 32, 9));
    }

    #[test]
    fn zero_segments_flagged() {
        let d = gen_fact_doc(2, 400, 0).unwrap();
        let q = synth_qa_from_segments(&d, 0, 32, 0);
        assert!(q.is_empty());
        assert_eq!(q.status, QAStatus::Empty);
    }

    #[test]
    fn event_order_round_trip() {
        let d = gen_event_doc(1, 200, 0).unwrap();
        assert_eq!(d.true_order, vec![0]);
        let d = gen_event_doc(5, 600, 3).unwrap();
        assert_eq!(d.text.len(), 600);
        let years: Vec<u32> = d.true_order.iter().map(|&i| d.events[i].year).collect();
        assert!(years.windows(2).all(|w| w[0] < w[1]));
        assert!(d.events.windows(2).all(|w| w[0].position < w[1].position));
        let mut perm = d.true_order.clone();
        perm.sort_unstable();
        assert_eq!(perm, (0..5).collect::<Vec<_>>());
        for e in &d.events {
            assert!(d.text[e.position..].contains(&e.label));
        }
        assert!(d.text.contains("Finally"));
        assert_eq!(d, gen_event_doc(5, 600, 3).unwrap());
    }

    #[test]
    fn corpus_docs_distinct_and_disjoint_from_tests() {
        let c = gen_sft_corpus(8, 4, 6, 600, 32, 11).unwrap();
        let texts: HashSet<_> = c.iter().map(|e| e.doc.text.clone()).collect();
        assert_eq!(texts.len(), 8);
        assert!(c.iter().all(|e| e.qas.len() == 4));
        let one = gen_sft_corpus(1, 0, 6, 600, 32, 11).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].qas.is_empty());

        let sft: HashSet<u64> = (0..100).map(|i| sft_doc_seed(11, i)).collect();
        let test: HashSet<u64> = (0..100).map(|i| test_doc_seed(11, i)).collect();
        assert!(sft.is_disjoint(&test));
    }

    #[test]
    fn text_survives_tokenization() {
        let d = gen_fact_doc(3, 300, 8).unwrap();
        assert_eq!(decode_lossy(&encode_str(&d.text)), d.text);
    }
}
