//! Wall-clock harness and scaling fits.
//!
//! `lift_adapt` mode times one epoch of adaptation plus a short generation.
//! `icl_full_forward` mode times one forward pass over the whole input
//! through a copy of the model whose positional table is stretched to the
//! input length; that copy exists only to measure attention cost.
//!
//! Timings are only meaningful when nothing else runs in the process.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::lift::{lift_adapt, LiftConfig};
use crate::model::{random_tokens, Model, ModelConfig};
use crate::synth::QASet;
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    LiftAdapt,
    IclFullForward,
}

impl TimingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TimingMode::LiftAdapt => "lift_adapt",
            TimingMode::IclFullForward => "icl_full_forward",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub input_length: usize,
    pub mode: TimingMode,
    /// Mean seconds over the measured repeats; `None` marks a length that
    /// ran out of memory.
    pub wall_time_s: Option<f64>,
    pub repeats: usize,
    pub peak_memory_bytes: u64,
    pub oom: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub lengths: Vec<usize>,
    pub repeats: usize,
    /// Segment length and optimizer for the adaptation mode; it always runs
    /// one epoch without auxiliary pairs.
    pub lift: LiftConfig,
    pub prompt_tokens: usize,
    pub gen_tokens: usize,
    /// Lengths whose estimated peak memory exceeds this are recorded as
    /// out of memory without running.
    pub memory_budget_bytes: Option<u64>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let model = ModelConfig::bench();
        BenchConfig {
            lengths: (0..9).map(|k| length_at(1024, k)).collect(),
            repeats: 3,
            lift: LiftConfig {
                seg_len: model.context_window,
                ..LiftConfig::toy(model.context_window)
            },
            model,
            prompt_tokens: 16,
            gen_tokens: 8,
            memory_budget_bytes: None,
            seed: 0,
        }
    }
}

/// `base * 2^(k/2)`, rounded: half-octave spacing.
pub fn length_at(base: usize, k: u32) -> usize {
    (base as f64 * 2f64.powf(k as f64 / 2.0)).round() as usize
}

fn bytes_per_value() -> u64 {
    std::mem::size_of::<f32>() as u64
}

/// Peak activation and parameter memory of one full forward pass.
pub fn icl_memory_estimate(config: &ModelConfig, len: usize) -> u64 {
    let d = config.embed_dim as u64;
    let l = len as u64;
    let params = ModelConfig { context_window: len, ..*config }.param_count() as u64;
    bytes_per_value() * (params + l * 10 * d + config.vocab_size as u64)
}

/// Parameters, gradients, optimizer moments and one micro-batch of graph.
pub fn lift_memory_estimate(config: &ModelConfig, lift: &LiftConfig) -> u64 {
    let d = config.embed_dim as u64;
    let rows = (lift.seg_len * lift.micro_batch) as u64;
    let per_row = config.n_layers as u64 * 20 * d + 2 * config.vocab_size as u64;
    bytes_per_value() * (4 * config.param_count() as u64 + rows * per_row)
}

fn time_lift(model: &Model<f32>, input: &crate::model::TokenSeq, config: &BenchConfig, lc: &LiftConfig) -> Result<f64> {
    let t = Instant::now();
    let (adapted, _) = lift_adapt(model, input, &QASet::empty(), lc)?;
    let prompt = input.slice(0..config.prompt_tokens.min(input.len()));
    adapted.generate_until(&prompt, config.gen_tokens, None)?;
    Ok(t.elapsed().as_secs_f64())
}

fn time_icl(model: &Model<f32>, input: &crate::model::TokenSeq) -> Result<f64> {
    let t = Instant::now();
    let wide = model.with_context_window(input.len())?;
    wide.next_token_logits(input)?;
    Ok(t.elapsed().as_secs_f64())
}

/// Runs one timed call, mapping an out-of-memory error to `None`.
fn attempt(run: impl FnOnce() -> Result<f64>) -> Result<Option<f64>> {
    match run() {
        Ok(t) => Ok(Some(t)),
        Err(Error::OutOfMemory(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Times every length in both modes. Each `(length, mode)` cell gets one
/// discarded warmup call, then the timed repeats run round-robin over all
/// cells so slow spells of the host spread across lengths instead of biasing
/// one of them.
pub fn bench_time(config: &BenchConfig) -> Result<Vec<TimingRecord>> {
    if config.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if config.lengths.iter().any(|&l| l < 2) {
        return Err(Error::Config("every benchmark length must be at least 2".into()));
    }
    let model = Model::<f32>::new(config.model)?;
    let lc = LiftConfig {
        epochs: 1,
        gamma: 0.0,
        final_eval: false,
        ..config.lift.clone()
    };
    lc.validate(model.context_window())?;
    let budget = config.memory_budget_bytes.unwrap_or(u64::MAX);
    let inputs: Vec<_> = config
        .lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let mut rng = seed::derived_rng(config.seed, "bench-input", i as u64);
            random_tokens(len, config.model.vocab_size, &mut rng)
        })
        .collect();
    let run = |mode: TimingMode, i: usize| match mode {
        TimingMode::LiftAdapt => attempt(|| time_lift(&model, &inputs[i], config, &lc)),
        TimingMode::IclFullForward => attempt(|| time_icl(&model, &inputs[i])),
    };

    struct Cell {
        len: usize,
        mode: TimingMode,
        peak: u64,
        total: Option<f64>,
    }
    let mut cells = Vec::with_capacity(2 * config.lengths.len());
    for (i, &len) in config.lengths.iter().enumerate() {
        for mode in [TimingMode::LiftAdapt, TimingMode::IclFullForward] {
            let peak = match mode {
                TimingMode::LiftAdapt => lift_memory_estimate(&config.model, &lc),
                TimingMode::IclFullForward => icl_memory_estimate(&config.model, len),
            };
            let total = if peak > budget { None } else { run(mode, i)?.map(|_| 0.0) };
            cells.push(Cell { len, mode, peak, total });
        }
    }
    for _ in 0..config.repeats {
        for (k, cell) in cells.iter_mut().enumerate() {
            if let Some(acc) = cell.total {
                cell.total = run(cell.mode, k / 2)?.map(|t| acc + t);
            }
        }
    }
    Ok(cells
        .into_iter()
        .map(|c| {
            let time = c.total.map(|t| t / config.repeats as f64);
            TimingRecord {
                input_length: c.len,
                mode: c.mode,
                wall_time_s: time,
                repeats: config.repeats,
                peak_memory_bytes: c.peak,
                oom: time.is_none(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeFit {
    pub mode: TimingMode,
    pub points: usize,
    /// `ln t = intercept + slope * ln L`.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `t = a + b L`.
    pub linear: [f64; 2],
    /// `t = a + b L + c L^2`.
    pub quadratic: [f64; 3],
    /// t statistic of `c`; `None` for an exact fit.
    pub quadratic_t: Option<f64>,
    /// `c L^2` as a share of the fitted time at the largest length.
    pub quadratic_share: f64,
    pub quadratic_significant: bool,
}

impl ModeFit {
    /// Power-law prediction at `len`.
    pub fn predict(&self, len: f64) -> f64 {
        (self.intercept + self.slope * len.ln()).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub fits: Vec<ModeFit>,
    /// Smallest length at which fitted adaptation time drops below fitted
    /// full-forward time, when the curves cross inside the measured range.
    pub crossover: Option<f64>,
}

impl ScalingFit {
    pub fn get(&self, mode: TimingMode) -> Option<&ModeFit> {
        self.fits.iter().find(|f| f.mode == mode)
    }
}

pub const MIN_POINTS: usize = 6;
pub const MIN_SPAN: f64 = 16.0;
/// One-sided confidence of the quadratic-term test.
pub const QUADRATIC_CONFIDENCE: f64 = 0.99;
/// Minimum share of the quadratic term at the largest length.
pub const QUADRATIC_MIN_SHARE: f64 = 0.10;

/// Solves `A x = b` for symmetric positive definite `A` of order 3 by
/// Gauss-Jordan elimination and returns `x` and `A^-1`.
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<([f64; 3], [[f64; 3]; 3])> {
    let mut m = [[0.0; 7]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3 + i] = 1.0;
        m[i][6] = b[i];
    }
    for col in 0..3 {
        let pivot = (col..3).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        m.swap(col, pivot);
        let p = m[col][col];
        if p.abs() < 1e-300 {
            return None;
        }
        m[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..3 {
            if r != col {
                let f = m[r][col];
                let src = m[col];
                m[r].iter_mut().zip(src).for_each(|(v, s)| *v -= f * s);
            }
        }
    }
    let x = [m[0][6], m[1][6], m[2][6]];
    let inv = [0, 1, 2].map(|i| [m[i][3], m[i][4], m[i][5]]);
    Some((x, inv))
}

/// Ordinary least squares of `y` on the first `k` powers of `x`.
fn polyfit(x: &[f64], y: &[f64], k: usize) -> Option<([f64; 3], [[f64; 3]; 3], f64)> {
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for (&xi, &yi) in x.iter().zip(y) {
        let p = [1.0, xi, xi * xi];
        for r in 0..k {
            b[r] += p[r] * yi;
            for c in 0..k {
                a[r][c] += p[r] * p[c];
            }
        }
    }
    for (r, row) in a.iter_mut().enumerate().skip(k) {
        row[r] = 1.0;
    }
    let (coef, inv) = solve3(a, b)?;
    let sse = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let f = coef[0] + coef[1] * xi + coef[2] * xi * xi;
            (yi - f).powi(2)
        })
        .sum();
    Some((coef, inv, sse))
}

/// Fits one mode's curve. Lengths are rescaled to `L / max L` before the
/// polynomial fits so the normal equations stay well conditioned.
pub fn fit_mode(mode: TimingMode, lengths: &[f64], times: &[f64]) -> Result<ModeFit> {
    let n = lengths.len();
    if n != times.len() {
        return Err(Error::InvalidInput("lengths and times differ in count".into()));
    }
    if n < MIN_POINTS {
        return Err(Error::InvalidInput(format!("scaling fit needs at least {MIN_POINTS} points, got {n}")));
    }
    if lengths.iter().chain(times).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("lengths and times must be positive".into()));
    }
    let lo = lengths.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lengths.iter().copied().fold(0.0, f64::max);
    if hi / lo < MIN_SPAN {
        return Err(Error::InvalidInput(format!(
            "lengths span {:.1}x; at least {MIN_SPAN}x is required",
            hi / lo
        )));
    }
    let lx: Vec<f64> = lengths.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = times.iter().map(|v| v.ln()).collect();
    let (c, _, sse) = polyfit(&lx, &ly, 2).ok_or_else(|| Error::NonFinite("log-log fit".into()))?;
    let mean = ly.iter().sum::<f64>() / n as f64;
    let sst: f64 = ly.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - sse / sst } else { 1.0 };

    let x: Vec<f64> = lengths.iter().map(|v| v / hi).collect();
    let (lin, _, _) = polyfit(&x, times, 2).ok_or_else(|| Error::NonFinite("linear fit".into()))?;
    let (q, inv, qsse) = polyfit(&x, times, 3).ok_or_else(|| Error::NonFinite("quadratic fit".into()))?;
    let dof = (n - 3) as f64;
    let se = (qsse / dof * inv[2][2]).sqrt();
    let quadratic_t = (se > 0.0).then(|| q[2] / se);
    let at_max = q[0] + q[1] + q[2];
    let quadratic_share = if at_max > 0.0 { q[2] / at_max } else { 0.0 };
    let critical = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .inverse_cdf(QUADRATIC_CONFIDENCE);
    let significant_t = quadratic_t.is_none_or(|t| t > critical);
    Ok(ModeFit {
        mode,
        points: n,
        slope: c[1],
        intercept: c[0],
        r_squared,
        linear: [lin[0], lin[1] / hi],
        quadratic: [q[0], q[1] / hi, q[2] / (hi * hi)],
        quadratic_t,
        quadratic_share,
        quadratic_significant: significant_t && quadratic_share >= QUADRATIC_MIN_SHARE,
    })
}

/// Smallest `L` in `[lo, hi]` where `lift` predicts less time than `icl`,
/// provided the difference changes sign inside the range.
pub fn crossover(lift: &ModeFit, icl: &ModeFit, lo: f64, hi: f64) -> Option<f64> {
    let diff = |l: f64| lift.predict(l) - icl.predict(l);
    if !(diff(lo) >= 0.0) {
        return None;
    }
    const GRID: usize = 4096;
    let at = |i: usize| (lo.ln() + (hi / lo).ln() * i as f64 / GRID as f64).exp();
    let i = (1..=GRID).find(|&i| diff(at(i)) < 0.0)?;
    let (mut a, mut b) = (at(i - 1), at(i));
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if diff(m) < 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    Some(b)
}

/// Fits every mode present in `records`, skipping out-of-memory markers,
/// and locates the crossover when both modes are present.
pub fn fit_scaling(records: &[TimingRecord]) -> Result<ScalingFit> {
    let mut fits = Vec::new();
    for mode in [TimingMode::LiftAdapt, TimingMode::IclFullForward] {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.mode == mode)
            .filter_map(|r| r.wall_time_s.map(|t| (r.input_length as f64, t)))
            .collect();
        if pts.is_empty() && records.iter().all(|r| r.mode != mode) {
            continue;
        }
        let (l, t): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        fits.push(fit_mode(mode, &l, &t)?);
    }
    if fits.is_empty() {
        return Err(Error::InvalidInput("no timing records".into()));
    }
    let lengths = || records.iter().filter(|r| !r.oom).map(|r| r.input_length as f64);
    let lo = lengths().fold(f64::INFINITY, f64::min);
    let hi = lengths().fold(0.0, f64::max);
    let crossover = match fits.as_slice() {
        [a, b] => crossover(a, b, lo, hi),
        _ => None,
    };
    Ok(ScalingFit { fits, crossover })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lengths() -> Vec<f64> {
        (0..7).map(|k| 1e4 * 2f64.powi(k)).collect()
    }

    #[test]
    fn exact_linear_data() {
        let l = lengths();
        let t: Vec<f64> = l.iter().map(|x| 2.0 * x).collect();
        let f = fit_mode(TimingMode::LiftAdapt, &l, &t).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-6);
        assert!((f.linear[1] - 2.0).abs() < 1e-9);
        assert!(!f.quadratic_significant);
        assert!(crossover(&f, &f, 1e4, 6.4e5).is_none());
    }

    #[test]
    fn exact_quadratic_data() {
        let l = lengths();
        let t: Vec<f64> = l.iter().map(|x| 3.0 * x * x).collect();
        let f = fit_mode(TimingMode::IclFullForward, &l, &t).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-6);
        assert!((f.quadratic[2] - 3.0).abs() < 1e-6);
        assert!(f.quadratic_significant);
    }

    #[test]
    fn preconditions() {
        let l = lengths();
        assert!(fit_mode(TimingMode::LiftAdapt, &l[..5], &l[..5]).is_err());
        let narrow: Vec<f64> = (0..8).map(|k| 100.0 + k as f64).collect();
        assert!(fit_mode(TimingMode::LiftAdapt, &narrow, &narrow).is_err());
    }

    #[test]
    fn noisy_linear_is_not_quadratic() {
        let l = lengths();
        let t: Vec<f64> = l.iter().enumerate().map(|(i, x)| x * (1.0 + 0.02 * ((i * 7 % 5) as f64 - 2.0))).collect();
        let f = fit_mode(TimingMode::LiftAdapt, &l, &t).unwrap();
        assert!(!f.quadratic_significant, "{f:?}");
    }

    #[test]
    fn half_octave_lengths() {
        assert_eq!(length_at(1024, 0), 1024);
        assert_eq!(length_at(1024, 1), 1448);
        assert_eq!(length_at(1024, 8), 16384);
    }

    #[test]
    fn small_bench_records_both_modes() {
        let cfg = BenchConfig {
            model: ModelConfig {
                embed_dim: 16,
                n_layers: 1,
                n_heads: 2,
                context_window: 32,
                ..ModelConfig::toy()
            },
            lengths: vec![64],
            repeats: 1,
            lift: LiftConfig { seg_len: 32, ..LiftConfig::toy(32) },
            ..BenchConfig::default()
        };
        let r = bench_time(&cfg).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|x| x.wall_time_s.unwrap() > 0.0));
        let capped = bench_time(&BenchConfig { memory_budget_bytes: Some(1), ..cfg }).unwrap();
        assert!(capped.iter().all(|x| x.oom && x.wall_time_s.is_none()));
    }
}
