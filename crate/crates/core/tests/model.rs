use lift_core::lift::apply_step;
use lift_core::model::{decode_lossy, encode, encode_str, Model, ModelConfig, TokenSeq};
use lift_core::numcore::{AdamWState, Graph, OptimHyper, Real};
use proptest::prelude::*;
use rand::Rng;

fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        context_window: 24,
        n_layers: 2,
        n_heads: 2,
        embed_dim: 16,
        seed,
    }
}

fn byte_model(window: usize) -> Model<f32> {
    Model::new(ModelConfig {
        context_window: window,
        n_layers: 1,
        n_heads: 2,
        embed_dim: 32,
        ..ModelConfig::default()
    })
    .unwrap()
}

/// One AdamW step on the mean NLL of `tokens[first..]`. Returns the loss.
fn step<T: Real>(m: &mut Model<T>, st: &mut AdamWState<T>, h: &OptimHyper, tokens: &TokenSeq, first: usize) -> f64 {
    let (loss, grads) = {
        let mut g = Graph::new();
        let pv = m.register(&mut g).unwrap();
        let l = m.loss_on_graph(&mut g, &pv, tokens, first).unwrap();
        let mut grads = g.backward(l).unwrap();
        let flat: Vec<Vec<T>> = pv.vars().iter().zip(m.params()).map(|(&v, p)| grads.take(v, p.numel())).collect();
        (g.scalar(l).unwrap().f64(), flat)
    };
    for (p, g) in m.params_mut().iter_mut().zip(grads) {
        p.accumulate_grad(&g, T::one()).unwrap();
    }
    apply_step(m, st, h).unwrap();
    loss
}

fn hyper(lr: f64) -> OptimHyper {
    OptimHyper {
        learning_rate: lr,
        weight_decay: 0.0,
        ..OptimHyper::default()
    }
}

#[test]
fn causality_over_random_triples() {
    let mut rng = lift_core::seed::rng(99);
    for trial in 0..100u64 {
        let m = Model::<f32>::new(small(trial)).unwrap();
        let len = rng.random_range(2..=24);
        let mut ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..32)).collect();
        let k = rng.random_range(1..len);
        let before = m.forward_logits(&TokenSeq::new(ids.clone())).unwrap();
        ids[k] = (ids[k] + 1 + rng.random_range(0..31)) % 32;
        let after = m.forward_logits(&TokenSeq::new(ids)).unwrap();
        let v = 32;
        assert_eq!(before[..k * v], after[..k * v], "trial {trial}: rows before {k} changed");
        assert_ne!(before[k * v..], after[k * v..], "trial {trial}: perturbation had no effect");
    }
}

#[test]
fn uniform_head_loss_is_ln_vocab() {
    let mut m = Model::<f64>::new(small(1)).unwrap();
    m.zero_output_head();
    let t = TokenSeq::new((0..20).map(|i| i % 32).collect());
    let ln_v = (32f64).ln();
    assert!((m.lm_loss(&t).unwrap() - ln_v).abs() < 1e-5);
    let q = TokenSeq::new(vec![1, 2, 3]);
    assert!((m.qa_loss(&q, &TokenSeq::new(vec![4])).unwrap() - ln_v).abs() < 1e-5);
}

#[test]
fn lm_loss_falls_on_a_repeated_pattern() {
    let mut m = byte_model(48);
    let t = encode_str(&"the quick fox, ".repeat(4)[..48]);
    let mut st = AdamWState::new(m.params());
    let h = hyper(3e-3);
    let losses: Vec<f64> = (0..50).map(|_| step(&mut m, &mut st, &h, &t, 1)).collect();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "loss {head:.3} -> {tail:.3}");
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises < 10, "{rises} of 49 steps increased the loss");
}

#[test]
fn one_qa_pair_is_memorised() {
    let mut m = byte_model(32);
    let q = encode_str("What is the code of ruby?\n");
    let a = encode_str("Q7X\n");
    let seq = TokenSeq::concat(&[&q, &a]);
    let initial = m.qa_loss(&q, &a).unwrap() as f64;
    let mut st = AdamWState::new(m.params());
    let h = hyper(3e-3);
    for _ in 0..100 {
        step(&mut m, &mut st, &h, &seq, q.len());
    }
    let fin = m.qa_loss(&q, &a).unwrap() as f64;
    assert!(fin < 0.1 * initial, "qa loss {initial:.3} -> {fin:.3}");
    assert_eq!(decode_lossy(&m.generate(&q, 8).unwrap()), "Q7X");
}

#[test]
fn repeated_abcd_continues_with_d() {
    let mut m = byte_model(32);
    let t = encode_str(&"abcd".repeat(8));
    let mut st = AdamWState::new(m.params());
    let h = hyper(3e-3);
    for _ in 0..60 {
        step(&mut m, &mut st, &h, &t, 1);
    }
    let out = m.generate(&encode_str("abc"), 3).unwrap();
    assert_eq!(out.ids().first(), Some(&(b'd' as u32)), "got {:?}", decode_lossy(&out));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut m = Model::<f32>::new(small(4)).unwrap();
        let t = TokenSeq::new((0..24).map(|i| (i * 5) % 32).collect());
        let mut st = AdamWState::new(m.params());
        for _ in 0..5 {
            step(&mut m, &mut st, &hyper(1e-2), &t, 1);
        }
        m
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        prop_assert_eq!(lift_core::model::decode(&encode(&bytes)), bytes);
    }

    #[test]
    fn param_count_is_a_function_of_config(
        layers in 0usize..4, heads in 1usize..4, mult in 1usize..6, window in 2usize..64, vocab in 2usize..300,
    ) {
        let c = ModelConfig { vocab_size: vocab, context_window: window, n_layers: layers, n_heads: heads, embed_dim: heads * mult, seed: 0 };
        let from_layout: usize = c.param_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        prop_assert_eq!(c.param_count(), from_layout);
        if layers < 2 && window < 32 {
            prop_assert_eq!(Model::<f32>::new(c).unwrap().num_params(), from_layout);
        }
    }
}
