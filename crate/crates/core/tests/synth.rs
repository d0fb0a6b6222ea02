use std::collections::HashSet;

use lift_core::synth::{
    facts_per_third, gen_event_doc, gen_fact_doc, gen_sft_corpus, synth_qa_from_segments, test_doc_seed, third_of, Third,
};
use proptest::prelude::*;

#[test]
fn corpus_and_test_documents_never_coincide() {
    let corpus = gen_sft_corpus(100, 0, 4, 400, 32, 3).unwrap();
    let corpus: HashSet<String> = corpus.into_iter().map(|e| e.doc.text).collect();
    let tests: HashSet<String> = (0..100)
        .map(|i| gen_fact_doc(4, 400, test_doc_seed(3, i)).unwrap().text)
        .collect();
    assert_eq!(corpus.len(), 100);
    assert!(corpus.is_disjoint(&tests));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fact_documents_hold_their_facts(n in 0usize..16, len in 1200usize..4000, seed: u64) {
        let d = gen_fact_doc(n, len, seed).unwrap();
        prop_assert_eq!(d.len(), len);
        prop_assert_eq!(d.facts.len(), n);
        let mut per = [0usize; 3];
        for f in &d.facts {
            let s = lift_core::synth::fact_sentence(&f.key, &f.value);
            prop_assert_eq!(&d.text[f.span()], s.as_str());
            match third_of(&f.span(), len) {
                Some(Third::Head) => per[0] += 1,
                Some(Third::Middle) => per[1] += 1,
                Some(Third::Tail) => per[2] += 1,
                None => prop_assert!(false, "fact straddles a third boundary"),
            }
        }
        prop_assert_eq!(per, facts_per_third(n));
        let keys: HashSet<&str> = d.facts.iter().map(|f| f.key.as_str()).collect();
        prop_assert_eq!(keys.len(), n);
        prop_assert_eq!(gen_fact_doc(n, len, seed).unwrap(), d);
    }

    #[test]
    fn synthesized_answers_come_from_their_source(seed: u64, spans in 1usize..12, span_len in 24usize..96) {
        let d = gen_fact_doc(6, 1500, seed).unwrap();
        let q = synth_qa_from_segments(&d, spans, span_len, seed);
        prop_assert!(q.len() <= spans);
        for p in &q.pairs {
            prop_assert!(!p.answer.is_empty());
            prop_assert!(d.text[p.source_span.clone()].contains(&p.answer));
        }
    }

    #[test]
    fn event_order_is_a_permutation(n in 2usize..8, seed: u64) {
        let d = gen_event_doc(n, 800, seed).unwrap();
        let mut order = d.true_order.clone();
        order.sort();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
        let years: Vec<u32> = d.true_order.iter().map(|&i| d.events[i].year).collect();
        prop_assert!(years.windows(2).all(|w| w[0] < w[1]));
    }
}
