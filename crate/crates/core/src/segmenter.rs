//! Planning of training segments over a long token sequence, and truncation
//! of long inputs into an in-context prompt.
//!
//! All ranges are 0-based and half-open. An overlap plan with segment length
//! `seg_len` and stride `stride` covers `[0, L)` with windows
//! `[i*stride, i*stride + seg_len)` and a final window that ends exactly at
//! `L`. The final window starts on the stride grid, so it is never longer
//! than `seg_len` and never shorter than `seg_len - stride + 1`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::model::TokenSeq;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Overlap,
    Trivial,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationPlan {
    pub kind: PlanKind,
    pub input_len: usize,
    pub seg_len: usize,
    /// Offset between consecutive starts. Equals `seg_len` for trivial plans.
    pub stride: usize,
    pub ranges: Vec<Range<usize>>,
}

impl SegmentationPlan {
    /// Number of segments, `K`.
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Sum of segment lengths.
    pub fn planned_tokens(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    /// Ends of every segment except the last, i.e. the positions where one
    /// window stops and text continues beyond it.
    pub fn interior_boundaries(&self) -> Vec<usize> {
        self.ranges[..self.ranges.len().saturating_sub(1)]
            .iter()
            .map(|r| r.end)
            .collect()
    }

    /// Checks the structural invariants shared by both plan kinds.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("segmentation plan: {m}")));
        let Some(last) = self.ranges.last() else {
            return bad("no ranges".into());
        };
        if self.ranges[0].start != 0 || last.end != self.input_len {
            return bad(format!("does not span [0, {})", self.input_len));
        }
        let mut covered = 0;
        for (i, r) in self.ranges.iter().enumerate() {
            if r.is_empty() || r.len() > self.seg_len {
                return bad(format!("range {i} {r:?} has invalid length"));
            }
            if i + 1 < self.ranges.len() && r.len() != self.seg_len {
                return bad(format!("interior range {i} is not {} long", self.seg_len));
            }
            if r.start > covered {
                return bad(format!("gap before range {i}"));
            }
            if i > 0 && r.start <= self.ranges[i - 1].start {
                return bad(format!("range {i} does not advance"));
            }
            covered = covered.max(r.end);
        }
        Ok(())
    }
}

/// `floor(3 * seg_len / 8)`.
pub fn default_stride(seg_len: usize) -> usize {
    3 * seg_len / 8
}

/// Overlapping windows with the minimal count `K = ceil((L - l) / s) + 1`.
pub fn plan_overlap(input_len: usize, seg_len: usize, stride: usize) -> Result<SegmentationPlan> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if stride >= seg_len {
        return Err(Error::Config(format!(
            "stride {stride} >= segment length {seg_len}; use a trivial plan for disjoint segments"
        )));
    }
    if input_len == 0 {
        return Err(Error::InvalidInput("cannot segment an empty input".into()));
    }
    let ranges = if input_len <= seg_len {
        vec![0..input_len]
    } else {
        let k = (input_len - seg_len).div_ceil(stride) + 1;
        let mut r: Vec<_> = (0..k - 1).map(|i| i * stride..i * stride + seg_len).collect();
        r.push((k - 1) * stride..input_len);
        r
    };
    Ok(SegmentationPlan {
        kind: PlanKind::Overlap,
        input_len,
        seg_len,
        stride,
        ranges,
    })
}

/// Disjoint consecutive windows of `seg_len` tokens.
pub fn plan_trivial(input_len: usize, seg_len: usize) -> Result<SegmentationPlan> {
    if seg_len == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    if input_len == 0 {
        return Err(Error::InvalidInput("cannot segment an empty input".into()));
    }
    let ranges = (0..input_len)
        .step_by(seg_len)
        .map(|a| a..(a + seg_len).min(input_len))
        .collect();
    Ok(SegmentationPlan {
        kind: PlanKind::Trivial,
        input_len,
        seg_len,
        stride: seg_len,
        ranges,
    })
}

pub fn extract(tokens: &TokenSeq, plan: &SegmentationPlan) -> Result<Vec<TokenSeq>> {
    if plan.input_len != tokens.len() {
        return Err(Error::InvalidInput(format!(
            "plan covers {} tokens but the input has {}",
            plan.input_len,
            tokens.len()
        )));
    }
    plan.validate()?;
    Ok(plan.ranges.iter().map(|r| tokens.slice(r.clone())).collect())
}

/// Keeps the first `round(head_fraction * budget)` tokens and enough of the
/// tail to total exactly `budget`. Inputs within budget are returned as is.
pub fn truncate_icl(tokens: &TokenSeq, budget: usize, head_fraction: f64) -> Result<TokenSeq> {
    if !(0.0..=1.0).contains(&head_fraction) {
        return Err(Error::Config(format!("head_fraction {head_fraction} outside [0, 1]")));
    }
    if tokens.len() <= budget {
        return Ok(tokens.clone());
    }
    if budget < 2 {
        return Err(Error::Config(format!("ICL budget {budget} is below 2 tokens")));
    }
    let head = ((head_fraction * budget as f64).round() as usize).min(budget);
    let tail = budget - head;
    let n = tokens.len();
    Ok(TokenSeq::concat(&[&tokens.slice(0..head), &tokens.slice(n - tail..n)]))
}

/// Index ranges of the input kept by [`truncate_icl`].
pub fn icl_kept_ranges(len: usize, budget: usize, head_fraction: f64) -> (Range<usize>, Range<usize>) {
    if len <= budget {
        return (0..len, len..len);
    }
    let head = ((head_fraction * budget as f64).round() as usize).min(budget);
    (0..head, len - (budget - head)..len)
}

/// Context tokens available once the question and the answer reserve are
/// placed in a window of `window` tokens.
pub fn icl_budget(window: usize, question_len: usize, answer_reserve: usize) -> Result<usize> {
    window
        .checked_sub(question_len + answer_reserve)
        .ok_or_else(|| {
            Error::Config(format!(
                "question of {question_len} tokens plus answer reserve {answer_reserve} exceeds window {window}"
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(n: u32) -> TokenSeq {
        TokenSeq::new((1..=n).collect())
    }

    #[test]
    fn overlap_small_example() {
        let p = plan_overlap(10, 4, 2).unwrap();
        assert_eq!(p.ranges, vec![0..4, 2..6, 4..8, 6..10]);
    }

    #[test]
    fn overlap_short_input() {
        assert_eq!(plan_overlap(3, 2048, 768).unwrap().ranges, vec![0..3]);
    }

    #[test]
    fn overlap_reference_setting() {
        let p = plan_overlap(4096, 2048, 768).unwrap();
        assert_eq!(p.ranges, vec![0..2048, 768..2816, 1536..3584, 2304..4096]);
        let last = p.ranges.last().unwrap().len();
        assert!(last > 1280 && last <= 2048);
    }

    #[test]
    fn overlap_rejects_bad_stride() {
        assert!(plan_overlap(10, 4, 4).is_err());
        assert!(plan_overlap(10, 4, 0).is_err());
    }

    #[test]
    fn trivial_examples() {
        assert_eq!(plan_trivial(10, 4).unwrap().ranges, vec![0..4, 4..8, 8..10]);
        assert_eq!(plan_trivial(4, 4).unwrap().ranges, vec![0..4]);
        assert_eq!(plan_trivial(1, 4).unwrap().ranges, vec![0..1]);
    }

    #[test]
    fn stride_defaults() {
        assert_eq!(default_stride(2048), 768);
        assert_eq!(default_stride(8), 3);
        assert_eq!(default_stride(16), 6);
    }

    #[test]
    fn extract_examples() {
        let t = seq(10);
        let parts = extract(&t, &plan_trivial(10, 4).unwrap()).unwrap();
        let ids: Vec<Vec<u32>> = parts.iter().map(|p| p.ids().to_vec()).collect();
        assert_eq!(ids, vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 10]]);
        let ov = extract(&t, &plan_overlap(10, 4, 2).unwrap()).unwrap();
        assert_eq!(ov[1], t.slice(2..6));
        assert!(extract(&seq(9), &plan_trivial(10, 4).unwrap()).is_err());
    }

    #[test]
    fn truncation_examples() {
        let t = seq(20);
        let out = truncate_icl(&t, 8, 0.5).unwrap();
        assert_eq!(out.ids(), &[1, 2, 3, 4, 17, 18, 19, 20]);
        assert_eq!(truncate_icl(&seq(8), 8, 0.5).unwrap(), seq(8));
        assert_eq!(truncate_icl(&t, 8, 1.0).unwrap(), seq(8));
        assert!(truncate_icl(&t, 1, 0.5).is_err());
    }

    #[test]
    fn budget_accounting() {
        assert_eq!(icl_budget(64, 20, 32).unwrap(), 12);
        assert!(icl_budget(64, 40, 32).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn overlap_invariants(l in 1usize..=100_000, seg in 2usize..=4096, s_frac in 0.0f64..1.0) {
            let s = 1 + ((seg - 2) as f64 * s_frac) as usize;
            let p = plan_overlap(l, seg, s).unwrap();
            p.validate().unwrap();
            prop_assert_eq!(p.ranges.last().unwrap().end, l);
            for w in p.ranges.windows(2) {
                prop_assert_eq!(w[1].start - w[0].start, s);
                prop_assert_eq!(w[0].end - w[1].start, seg - s);
            }
            if l > seg {
                let k = p.len();
                // One fewer window would leave a tail longer than seg.
                prop_assert!(l - (k - 2) * s > seg);
                let last = p.ranges[k - 1].len();
                prop_assert!(last > seg - s && last <= seg);
            }
            prop_assert!(p.planned_tokens() as f64 <= l as f64 * seg as f64 / s as f64 + seg as f64);
        }

        #[test]
        fn trivial_is_a_partition(l in 1usize..5000, seg in 1usize..300) {
            let p = plan_trivial(l, seg).unwrap();
            p.validate().unwrap();
            let t = TokenSeq::new((0..l as u32).collect());
            let joined: Vec<u32> = extract(&t, &p).unwrap().iter().flat_map(|x| x.ids().to_vec()).collect();
            prop_assert_eq!(joined, t.into_ids());
        }

        #[test]
        fn truncation_keeps_order(len in 0usize..300, budget in 2usize..100, hf in 0.0f64..=1.0) {
            let t = TokenSeq::new((0..len as u32).collect());
            let out = truncate_icl(&t, budget, hf).unwrap();
            prop_assert_eq!(out.len(), len.min(budget));
            prop_assert!(out.ids().windows(2).all(|w| w[0] < w[1]));
            let (h, tl) = icl_kept_ranges(len, budget, hf);
            let expect: Vec<u32> = h.chain(tl).map(|i| i as u32).collect();
            prop_assert_eq!(out.ids(), &expect[..]);
        }
    }
}
