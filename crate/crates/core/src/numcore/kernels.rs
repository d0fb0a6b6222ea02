//! Slice-level kernels shared by the tape and by the graph-free inference path.

use super::Real;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Dense row-major `rows x cols` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Strided mutable matrix view.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm<T: Real>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "gemm output out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked above for its full extent.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense `[m,k] x [k,n]` product into a fresh buffer.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatRef::dense(a, m, k),
        MatRef::dense(b, k, n),
        T::zero(),
        MatMut::dense(&mut out, m, n),
    );
    out
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalisation. Returns the per-row mean and reciprocal std.
pub fn layernorm_forward<T: Real>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let eps = T::of(LN_EPS);
    let inv_n = T::one() / T::of(cols as f64);
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        let o = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            o[c] = (row[c] - mean) * rstd * gain[c] + bias[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Real>(
    x: &[T],
    cols: usize,
    gain: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let rows = x.len() / cols;
    let inv_n = T::one() / T::of(cols as f64);
    if let Some(dg) = dgain {
        for r in 0..rows {
            for c in 0..cols {
                let xhat = (x[r * cols + c] - means[r]) * rstds[r];
                dg[c] = dg[c] + dy[r * cols + c] * xhat;
            }
        }
    }
    if let Some(db) = dbias {
        for r in 0..rows {
            for c in 0..cols {
                db[c] = db[c] + dy[r * cols + c];
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let dyr = &dy[r * cols..(r + 1) * cols];
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for c in 0..cols {
                let xhat = (xr[c] - means[r]) * rstds[r];
                let dxhat = dyr[c] * gain[c];
                mean_dxhat = mean_dxhat + dxhat;
                mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
            }
            mean_dxhat = mean_dxhat * inv_n;
            mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
            let dxr = &mut dx[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let xhat = (xr[c] - means[r]) * rstds[r];
                let dxhat = dyr[c] * gain[c];
                dxr[c] = dxr[c] + rstds[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Query rows processed per attention block.
pub const ATTN_BLOCK: usize = 64;

/// Causal multi-head self-attention over a packed `[t, 3d]` q|k|v buffer,
/// writing `[t, d]` into `out`. When `probs` is given (length `heads*t*t`)
/// the attention weights are stored with zeros above the diagonal.
///
/// Scores are materialised one block of query rows at a time, so peak extra
/// memory is `ATTN_BLOCK * t` regardless of `t`.
pub fn attention_forward<T: Real>(
    qkv: &[T],
    t: usize,
    d: usize,
    heads: usize,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut scores = vec![T::zero(); ATTN_BLOCK.min(t) * t];
    for h in 0..heads {
        let q_off = h * dh;
        let k_off = d + h * dh;
        let v_off = 2 * d + h * dh;
        let mut i0 = 0;
        while i0 < t {
            let bs = ATTN_BLOCK.min(t - i0);
            let kv = i0 + bs;
            let s = &mut scores[..bs * kv];
            gemm(
                scale,
                MatRef {
                    data: qkv,
                    offset: i0 * 3 * d + q_off,
                    rows: bs,
                    cols: dh,
                    rs: 3 * d,
                    cs: 1,
                },
                MatRef {
                    data: qkv,
                    offset: k_off,
                    rows: kv,
                    cols: dh,
                    rs: 3 * d,
                    cs: 1,
                }
                .t(),
                T::zero(),
                MatMut::dense(s, bs, kv),
            );
            for r in 0..bs {
                let i = i0 + r;
                let row = &mut s[r * kv..(r + 1) * kv];
                let mut max = T::neg_infinity();
                for &v in &row[..=i] {
                    max = max.max(v);
                }
                let mut sum = T::zero();
                for v in row[..=i].iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                let inv = T::one() / sum;
                for v in row[..=i].iter_mut() {
                    *v = *v * inv;
                }
                for v in row[i + 1..].iter_mut() {
                    *v = T::zero();
                }
                if let Some(p) = probs.as_deref_mut() {
                    let dst = &mut p[h * t * t + i * t..h * t * t + i * t + t];
                    dst[..kv].copy_from_slice(row);
                    for v in dst[kv..].iter_mut() {
                        *v = T::zero();
                    }
                }
            }
            gemm(
                T::one(),
                MatRef::dense(s, bs, kv),
                MatRef {
                    data: qkv,
                    offset: v_off,
                    rows: kv,
                    cols: dh,
                    rs: 3 * d,
                    cs: 1,
                },
                T::zero(),
                MatMut {
                    data: out,
                    offset: i0 * d + h * dh,
                    rows: bs,
                    cols: dh,
                    rs: d,
                    cs: 1,
                },
            );
            i0 += bs;
        }
    }
}

/// Backward of [`attention_forward`], accumulating into `dqkv`.
pub fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    t: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [T],
) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dp = vec![T::zero(); t * t];
    for h in 0..heads {
        let q_off = h * dh;
        let k_off = d + h * dh;
        let v_off = 2 * d + h * dh;
        let p = &probs[h * t * t..(h + 1) * t * t];
        let dout_h = MatRef {
            data: dout,
            offset: h * dh,
            rows: t,
            cols: dh,
            rs: d,
            cs: 1,
        };
        let col = |offset: usize| MatRef {
            data: qkv,
            offset,
            rows: t,
            cols: dh,
            rs: 3 * d,
            cs: 1,
        };
        // dV += P^T dO
        gemm(
            T::one(),
            MatRef::dense(p, t, t).t(),
            dout_h,
            T::one(),
            MatMut {
                data: dqkv,
                offset: v_off,
                rows: t,
                cols: dh,
                rs: 3 * d,
                cs: 1,
            },
        );
        // dP = dO V^T
        gemm(
            T::one(),
            dout_h,
            col(v_off).t(),
            T::zero(),
            MatMut::dense(&mut dp, t, t),
        );
        // dS = P * (dP - rowsum(P * dP))
        for i in 0..t {
            let pr = &p[i * t..(i + 1) * t];
            let dr = &mut dp[i * t..(i + 1) * t];
            let mut dot = T::zero();
            for j in 0..=i {
                dot = dot + pr[j] * dr[j];
            }
            for j in 0..t {
                dr[j] = if j <= i { pr[j] * (dr[j] - dot) } else { T::zero() };
            }
        }
        // dQ += scale dS K ; dK += scale dS^T Q
        gemm(
            scale,
            MatRef::dense(&dp, t, t),
            col(k_off),
            T::one(),
            MatMut {
                data: dqkv,
                offset: q_off,
                rows: t,
                cols: dh,
                rs: 3 * d,
                cs: 1,
            },
        );
        gemm(
            scale,
            MatRef::dense(&dp, t, t).t(),
            col(q_off),
            T::one(),
            MatMut {
                data: dqkv,
                offset: k_off,
                rows: t,
                cols: dh,
                rs: 3 * d,
                cs: 1,
            },
        );
    }
}

/// Row-wise softmax cross-entropy. Rows with `None` targets are unscored.
/// Returns `(sum of NLL over scored rows, softmax probabilities)`.
pub fn cross_entropy_forward<T: Real>(
    logits: &[T],
    vocab: usize,
    targets: &[Option<usize>],
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (r, target) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        let pr = &mut probs[r * vocab..(r + 1) * vocab];
        for (p, &z) in pr.iter_mut().zip(row) {
            *p = (z - max).exp();
            sum = sum + *p;
        }
        let inv = T::one() / sum;
        for p in pr.iter_mut() {
            *p = *p * inv;
        }
        if let Some(tgt) = *target {
            total = total + (sum.ln() - (row[tgt] - max));
        }
    }
    (total, probs)
}

/// Log-sum-exp based NLL of one target under a row of logits.
pub fn nll<T: Real>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = row.iter().map(|&z| (z - max).exp()).sum::<T>();
    sum.ln() - (row[target] - max)
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_views() {
        // a = [[1,2],[3,4]], b = a^T
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        gemm(
            1.0,
            MatRef::dense(&a, 2, 2),
            MatRef::dense(&a, 2, 2).t(),
            0.0,
            MatMut::dense(&mut c, 2, 2),
        );
        assert_eq!(c, [5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn attention_single_position_copies_value() {
        // t=1: the only attendable position is itself.
        let d = 4;
        let qkv: Vec<f64> = (0..3 * d).map(|i| i as f64).collect();
        let mut out = vec![0.0; d];
        attention_forward(&qkv, 1, d, 2, &mut out, None);
        assert_eq!(out, vec![8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn attention_blocks_agree_with_direct_softmax() {
        let (t, d, heads) = (ATTN_BLOCK + 9, 8, 2);
        let qkv: Vec<f64> = (0..t * 3 * d).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        let mut out = vec![0.0; t * d];
        attention_forward(&qkv, t, d, heads, &mut out, None);
        let dh = d / heads;
        for h in 0..heads {
            for i in 0..t {
                let mut w = Vec::new();
                for j in 0..=i {
                    let s: f64 = (0..dh)
                        .map(|c| qkv[i * 3 * d + h * dh + c] * qkv[j * 3 * d + d + h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt();
                    w.push(s);
                }
                let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = w.iter().map(|s| (s - m).exp()).sum();
                for c in 0..dh {
                    let o: f64 = (0..=i)
                        .map(|j| (w[j] - m).exp() / z * qkv[j * 3 * d + 2 * d + h * dh + c])
                        .sum();
                    assert!((o - out[i * d + h * dh + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let (loss, _) = cross_entropy_forward(&[0.0f64; 8], 4, &[Some(1), None]);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }
}
