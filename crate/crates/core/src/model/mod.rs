//! Byte-level decoder-only transformer with learned absolute positions.
//!
//! The positional table has exactly `context_window` rows, so the model
//! cannot attend over anything longer than its window. That is the
//! short-context premise long-input fine-tuning works around.

pub mod checkpoint;
mod tokenizer;

pub use tokenizer::{decode, decode_lossy, encode, encode_str, TokenSeq, END_OF_ANSWER};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numcore::kernels::{self, MatMut, MatRef};
use crate::numcore::{Graph, Real, Tensor, Var};
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_window: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            context_window: 64,
            n_layers: 2,
            n_heads: 4,
            embed_dim: 128,
            seed: 0,
        }
    }
}

const INIT_STD: f64 = 0.02;
const PARAMS_PER_LAYER: usize = 12;

impl ModelConfig {
    /// Window-64 model of roughly half a million parameters.
    pub fn toy() -> Self {
        Self::default()
    }

    /// Window-128 configuration used by the benchmarks.
    pub fn bench() -> Self {
        ModelConfig {
            context_window: 128,
            embed_dim: 64,
            ..Self::default()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        ModelConfig { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.context_window < 2 {
            return Err(Error::Config("context_window must be at least 2".into()));
        }
        if self.n_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// `V*D + W*D + n_layers*(12*D^2 + 13*D) + 2*D + D*V + V`.
    pub fn param_count(&self) -> usize {
        let (v, w, d) = (self.vocab_size, self.context_window, self.embed_dim);
        v * d + w * d + self.n_layers * (12 * d * d + 13 * d) + 2 * d + d * v + v
    }

    /// Names and shapes of every parameter tensor in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, w, d) = (self.vocab_size, self.context_window, self.embed_dim);
        let mut out = vec![("wte".to_string(), vec![v, d]), ("wpe".to_string(), vec![w, d])];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            out.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.qkv.w"), vec![d, 3 * d]),
                (p("attn.qkv.b"), vec![3 * d]),
                (p("attn.proj.w"), vec![d, d]),
                (p("attn.proj.b"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.fc.w"), vec![d, 4 * d]),
                (p("mlp.fc.b"), vec![4 * d]),
                (p("mlp.proj.w"), vec![4 * d, d]),
                (p("mlp.proj.b"), vec![d]),
            ]);
        }
        out.extend([
            ("lnf.g".to_string(), vec![d]),
            ("lnf.b".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, v]),
            ("head.b".to_string(), vec![v]),
        ]);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// Parameter leaves registered on a graph, in storage order.
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

// Indices into the parameter list.
const WTE: usize = 0;
const WPE: usize = 1;
const FIRST_LAYER: usize = 2;

fn layer_base(l: usize) -> usize {
    FIRST_LAYER + l * PARAMS_PER_LAYER
}

impl<T: Real> Model<T> {
    /// Seeded GPT-2 style initialisation: N(0, 0.02) weights, residual output
    /// projections scaled by 1/sqrt(2 * n_layers), zero biases, unit gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::derived_rng(config.seed, "model-init", 0);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid_scale = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_layout() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".g") {
                vec![T::one(); n]
            } else if name.ends_with(".b") || name == "head.b" {
                vec![T::zero(); n]
            } else {
                let s = if name.ends_with("proj.w") { resid_scale } else { 1.0 };
                (0..n).map(|_| T::of(normal.sample(&mut rng) * s)).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Model {
            config,
            names,
            params,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        for ((want_name, want_shape), (name, t)) in layout.iter().zip(&named) {
            if want_name != name || want_shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} {:?} where {want_name} {want_shape:?} was expected",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Model {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn context_window(&self) -> usize {
        self.config.context_window
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Zeroes the output projection so every next-token distribution is uniform.
    pub fn zero_output_head(&mut self) {
        for name in ["head.w", "head.b"] {
            let t = self.param_mut(name).expect("head parameters exist");
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Copy of this model whose positional table is extended to `window`
    /// rows. Extra rows are seeded noise; this exists only to time full-length
    /// forward passes and is not a usable long-context model.
    pub fn with_context_window(&self, window: usize) -> Result<Model<T>> {
        let mut config = self.config;
        if window <= config.context_window {
            return Ok(self.clone());
        }
        let d = config.embed_dim;
        let old = &self.params[WPE];
        let mut data = Vec::new();
        data.try_reserve_exact(window * d)
            .map_err(|_| Error::OutOfMemory(format!("positional table of {window} rows")))?;
        data.extend_from_slice(old.data());
        let mut rng = seed::derived_rng(config.seed, "extended-positions", window as u64);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        while data.len() < window * d {
            data.push(T::of(normal.sample(&mut rng)));
        }
        config.context_window = window;
        let mut params = self.params.clone();
        params[WPE] = Tensor::new(vec![window, d], data)?;
        Ok(Model {
            config,
            names: self.names.clone(),
            params,
        })
    }

    fn check_ids(&self, tokens: &TokenSeq) -> Result<Vec<usize>> {
        let v = self.config.vocab_size as u32;
        if let Some(bad) = tokens.ids().iter().find(|&&id| id >= v) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(tokens.ids().iter().map(|&i| i as usize).collect())
    }

    fn check_len(&self, len: usize, min: usize, what: &str) -> Result<()> {
        let w = self.config.context_window;
        if len < min || len > w {
            return Err(Error::InvalidInput(format!(
                "{what} of length {len} outside [{min}, {w}]"
            )));
        }
        Ok(())
    }

    pub fn register<'a>(&'a self, g: &mut Graph<'a, T>) -> Result<ParamVars> {
        Ok(ParamVars(
            self.params.iter().map(|p| g.param(p)).collect::<Result<_>>()?,
        ))
    }

    /// Records the forward pass, returning `[len, vocab]` logits.
    pub fn logits_on_graph<'a>(&'a self, g: &mut Graph<'a, T>, pv: &ParamVars, tokens: &TokenSeq) -> Result<Var> {
        self.check_len(tokens.len(), 1, "sequence")?;
        let ids = self.check_ids(tokens)?;
        let p = &pv.0;
        let t = ids.len();
        let tok = g.gather(p[WTE], &ids)?;
        let pos = g.rows(p[WPE], 0, t)?;
        let mut x = g.add(tok, pos)?;
        for l in 0..self.config.n_layers {
            let b = layer_base(l);
            let h = g.layernorm(x, p[b], p[b + 1])?;
            let qkv = g.matmul(h, p[b + 2])?;
            let qkv = g.add_row(qkv, p[b + 3])?;
            let a = g.causal_attention(qkv, self.config.n_heads)?;
            let a = g.matmul(a, p[b + 4])?;
            let a = g.add_row(a, p[b + 5])?;
            x = g.add(x, a)?;
            let h = g.layernorm(x, p[b + 6], p[b + 7])?;
            let f = g.matmul(h, p[b + 8])?;
            let f = g.add_row(f, p[b + 9])?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, p[b + 10])?;
            let f = g.add_row(f, p[b + 11])?;
            x = g.add(x, f)?;
        }
        let nf = self.params.len() - 4;
        let x = g.layernorm(x, p[nf], p[nf + 1])?;
        let logits = g.matmul(x, p[nf + 2])?;
        g.add_row(logits, p[nf + 3])
    }

    /// Mean next-token NLL over targets `tokens[first_target..]`, recorded on
    /// the graph. `first_target` is 1 for plain language modelling and the
    /// question length for QA pairs.
    pub fn loss_on_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        pv: &ParamVars,
        tokens: &TokenSeq,
        first_target: usize,
    ) -> Result<Var> {
        if first_target == 0 || first_target >= tokens.len() {
            return Err(Error::InvalidInput(format!(
                "first scored position {first_target} for a sequence of {}",
                tokens.len()
            )));
        }
        let logits = self.logits_on_graph(g, pv, tokens)?;
        let targets = score_targets(tokens, first_target);
        g.cross_entropy(logits, &targets)
    }

    /// Logits for every position, `[len, vocab]` row-major.
    pub fn forward_logits(&self, tokens: &TokenSeq) -> Result<Vec<T>> {
        self.check_len(tokens.len(), 1, "sequence")?;
        let ids = self.check_ids(tokens)?;
        self.forward_plain(&ids, true)
    }

    /// Graph-free forward pass sharing the tape's kernels and op order.
    /// With `all_rows == false` only the final row of logits is produced.
    fn forward_plain(&self, ids: &[usize], all_rows: bool) -> Result<Vec<T>> {
        let c = &self.config;
        let (t, d, v) = (ids.len(), c.embed_dim, c.vocab_size);
        let p = &self.params;
        let wte = p[WTE].data();
        let wpe = p[WPE].data();
        let mut x = alloc::<T>(t * d)?;
        for (r, &id) in ids.iter().enumerate() {
            for k in 0..d {
                x[r * d + k] = wte[id * d + k] + wpe[r * d + k];
            }
        }
        let mut h = alloc::<T>(t * d)?;
        let mut qkv = alloc::<T>(t * 3 * d)?;
        let mut att = alloc::<T>(t * d)?;
        let mut proj = alloc::<T>(t * d)?;
        let mut fc = alloc::<T>(t * 4 * d)?;
        for l in 0..c.n_layers {
            let b = layer_base(l);
            kernels::layernorm_forward(&x, d, p[b].data(), p[b + 1].data(), &mut h);
            linear(&h, t, d, p[b + 2].data(), p[b + 3].data(), 3 * d, &mut qkv);
            kernels::attention_forward(&qkv, t, d, c.n_heads, &mut att, None);
            linear(&att, t, d, p[b + 4].data(), p[b + 5].data(), d, &mut proj);
            for (u, &w) in x.iter_mut().zip(&proj) {
                *u = *u + w;
            }
            kernels::layernorm_forward(&x, d, p[b + 6].data(), p[b + 7].data(), &mut h);
            linear(&h, t, d, p[b + 8].data(), p[b + 9].data(), 4 * d, &mut fc);
            for u in fc.iter_mut() {
                *u = kernels::gelu(*u);
            }
            linear(&fc, t, 4 * d, p[b + 10].data(), p[b + 11].data(), d, &mut proj);
            for (u, &w) in x.iter_mut().zip(&proj) {
                *u = *u + w;
            }
        }
        let nf = p.len() - 4;
        kernels::layernorm_forward(&x, d, p[nf].data(), p[nf + 1].data(), &mut h);
        let (rows, src) = if all_rows { (t, &h[..]) } else { (1, &h[(t - 1) * d..]) };
        let mut logits = alloc::<T>(rows * v)?;
        linear(src, rows, d, p[nf + 2].data(), p[nf + 3].data(), v, &mut logits);
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("forward logits".into()));
        }
        Ok(logits)
    }

    /// Final-row logits of a sequence of any length up to the window.
    pub fn next_token_logits(&self, tokens: &TokenSeq) -> Result<Vec<T>> {
        self.check_len(tokens.len(), 1, "sequence")?;
        let ids = self.check_ids(tokens)?;
        self.forward_plain(&ids, false)
    }

    /// Mean negative log-likelihood of `tokens[1..]` given their prefixes.
    pub fn lm_loss(&self, tokens: &TokenSeq) -> Result<T> {
        self.check_len(tokens.len(), 2, "language-modelling sequence")?;
        self.scored_nll(tokens, 1)
    }

    /// Mean NLL of the answer tokens conditioned on the question and the
    /// preceding answer tokens. Question positions are never scored.
    pub fn qa_loss(&self, question: &TokenSeq, answer: &TokenSeq) -> Result<T> {
        if answer.is_empty() {
            return Err(Error::InvalidInput("empty answer".into()));
        }
        if question.is_empty() {
            return Err(Error::InvalidInput("empty question".into()));
        }
        let seq = TokenSeq::concat(&[question, answer]);
        self.check_len(seq.len(), 2, "question+answer")?;
        self.scored_nll(&seq, question.len())
    }

    /// Mean NLL of `tokens[first_target..]`, each given everything before it.
    pub fn scored_nll(&self, tokens: &TokenSeq, first_target: usize) -> Result<T> {
        if first_target == 0 || first_target >= tokens.len() {
            return Err(Error::InvalidInput(format!(
                "first target {first_target} outside 1..{}",
                tokens.len()
            )));
        }
        let logits = self.forward_logits(tokens)?;
        let v = self.config.vocab_size;
        let targets = score_targets(tokens, first_target);
        let scored = targets.iter().filter(|t| t.is_some()).count();
        let (total, _) = kernels::cross_entropy_forward(&logits, v, &targets);
        Ok(total * (T::one() / T::of(scored as f64)))
    }

    /// Greedy decoding of up to `max_new` tokens, stopping before
    /// [`END_OF_ANSWER`].
    pub fn generate(&self, prompt: &TokenSeq, max_new: usize) -> Result<TokenSeq> {
        self.generate_until(prompt, max_new, Some(END_OF_ANSWER))
    }

    /// Greedy decoding. Once the running sequence exceeds the window only its
    /// last `W - 1` tokens are fed back.
    pub fn generate_until(&self, prompt: &TokenSeq, max_new: usize, stop: Option<u32>) -> Result<TokenSeq> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        let w = self.config.context_window;
        if prompt.len() > w {
            return Err(Error::InvalidInput(format!(
                "prompt of {} tokens exceeds the {w}-token window",
                prompt.len()
            )));
        }
        let mut ids = self.check_ids(prompt)?;
        let mut out = TokenSeq::default();
        for _ in 0..max_new {
            let window = if ids.len() > w { &ids[ids.len() - (w - 1)..] } else { &ids[..] };
            let logits = self.forward_plain(window, false)?;
            let next = kernels::argmax(&logits);
            if stop == Some(next as u32) {
                break;
            }
            out.push(next as u32);
            ids.push(next);
        }
        Ok(out)
    }
}

/// Row `i` predicts token `i + 1`; it is scored iff `i + 1 >= first_target`.
fn score_targets(tokens: &TokenSeq, first_target: usize) -> Vec<Option<usize>> {
    let ids = tokens.ids();
    (0..ids.len())
        .map(|i| {
            let j = i + 1;
            (j < ids.len() && j >= first_target).then(|| ids[j] as usize)
        })
        .collect()
}

fn alloc<T: Real>(n: usize) -> Result<Vec<T>> {
    let mut v = Vec::new();
    v.try_reserve_exact(n)
        .map_err(|_| Error::OutOfMemory(format!("activation buffer of {n} elements")))?;
    v.resize(n, T::zero());
    Ok(v)
}

fn linear<T: Real>(x: &[T], rows: usize, k: usize, w: &[T], b: &[T], n: usize, out: &mut [T]) {
    kernels::gemm(
        T::one(),
        MatRef::dense(x, rows, k),
        MatRef::dense(w, k, n),
        T::zero(),
        MatMut::dense(&mut out[..rows * n], rows, n),
    );
    for r in 0..rows {
        for (o, &bb) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
            *o = *o + bb;
        }
    }
}

/// Draws a random token sequence; handy for tests and timing inputs.
pub fn random_tokens(len: usize, vocab: usize, rng: &mut impl Rng) -> TokenSeq {
    TokenSeq::new((0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            context_window: 8,
            n_layers: 1,
            n_heads: 2,
            embed_dim: 8,
            seed: 3,
        }
    }

    #[test]
    fn param_count_matches_layout() {
        for cfg in [tiny(), ModelConfig::toy(), ModelConfig::bench()] {
            let m = Model::<f32>::new(cfg).unwrap();
            assert_eq!(m.num_params(), cfg.param_count());
        }
        assert_eq!(ModelConfig::toy().param_count(), 470_784);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = ModelConfig { embed_dim: 10, n_heads: 4, ..tiny() };
        assert!(matches!(Model::<f32>::new(bad), Err(Error::Config(_))));
        let bad = ModelConfig { context_window: 1, ..tiny() };
        assert!(Model::<f32>::new(bad).is_err());
    }

    #[test]
    fn window_bounds_enforced() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let ok = TokenSeq::new(vec![1; 8]);
        let long = TokenSeq::new(vec![1; 9]);
        assert_eq!(m.forward_logits(&ok).unwrap().len(), 8 * 16);
        assert!(m.forward_logits(&long).is_err());
        assert_eq!(m.forward_logits(&TokenSeq::new(vec![3])).unwrap().len(), 16);
        assert!(m.lm_loss(&TokenSeq::new(vec![3])).is_err());
    }

    #[test]
    fn graph_and_plain_paths_agree_bitwise() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let seq = TokenSeq::new(vec![1, 5, 2, 9, 4, 4, 0]);
        let mut g = Graph::new();
        let pv = m.register(&mut g).unwrap();
        let loss = m.loss_on_graph(&mut g, &pv, &seq, 1).unwrap();
        assert_eq!(g.scalar(loss).unwrap().to_bits(), m.lm_loss(&seq).unwrap().to_bits());
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let mut m = Model::<f32>::new(tiny()).unwrap();
        m.zero_output_head();
        let loss = m.lm_loss(&TokenSeq::new(vec![1, 2, 3, 4])).unwrap();
        assert!((loss as f64 - 16f64.ln()).abs() < 1e-6);
        let qa = m
            .qa_loss(&TokenSeq::new(vec![1, 2]), &TokenSeq::new(vec![7]))
            .unwrap();
        assert!((qa as f64 - 16f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn qa_scores_only_answer_positions() {
        let seq = TokenSeq::new(vec![1, 2, 3, 4, 5]);
        let t = score_targets(&seq, 3);
        assert_eq!(t, vec![None, None, Some(4), Some(5), None]);
        // A longer question shifts, but never widens, the scored region.
        let padded = TokenSeq::new(vec![9, 9, 1, 2, 3, 4, 5]);
        let tp = score_targets(&padded, 5);
        assert_eq!(tp.iter().flatten().count(), 2);
        assert_eq!(tp[4..6], [Some(4), Some(5)]);
    }

    #[test]
    fn qa_length_limit() {
        let m = Model::<f32>::new(tiny()).unwrap();
        assert!(m.qa_loss(&TokenSeq::new(vec![1; 5]), &TokenSeq::new(vec![2; 4])).is_err());
        assert!(m.qa_loss(&TokenSeq::new(vec![1; 5]), &TokenSeq::new(vec![])).is_err());
    }

    #[test]
    fn generation_basics() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let p = TokenSeq::new(vec![1, 2, 3]);
        assert!(m.generate(&p, 0).unwrap().is_empty());
        let a = m.generate_until(&p, 20, None).unwrap();
        let b = m.generate_until(&p, 20, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!(m.generate(&TokenSeq::default(), 3).is_err());
    }

    #[test]
    fn extended_window_keeps_original_rows() {
        let m = Model::<f32>::new(tiny()).unwrap();
        let big = m.with_context_window(32).unwrap();
        assert_eq!(big.context_window(), 32);
        let seq = TokenSeq::new(vec![3; 8]);
        assert_eq!(m.forward_logits(&seq).unwrap(), big.forward_logits(&seq).unwrap());
        assert!(big.forward_logits(&TokenSeq::new(vec![3; 32])).is_ok());
    }
}
