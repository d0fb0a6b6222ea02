use std::borrow::Cow;

use super::kernels::{self, MatMut, MatRef};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    WeightedSum(Vec<(usize, T)>),
    MatMul(usize, usize),
    Tanh(usize),
    Relu(usize),
    Gelu(usize),
    Sum(usize),
    Gather { table: usize, ids: Vec<usize> },
    Rows { table: usize, start: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, means: Vec<T>, rstds: Vec<T> },
    Attention { qkv: usize, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<T>, scale: T },
}

struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every op's
/// inputs precede it and the recorded graph is acyclic by construction.
///
/// Parameters are borrowed, not copied; the graph must be dropped before the
/// parameters are updated.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(what: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, what: &str, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        check_finite(what, &value)?;
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<'a, T> {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf borrowing the tensor's storage.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Result<Var> {
        self.push("parameter", Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("constant {shape:?} with {} values", data.len())));
        }
        self.push("constant", Cow::Owned(data), shape, Op::Leaf, false)
    }

    /// Trainable leaf owning its data (used for free-standing variables).
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("variable {shape:?} with {} values", data.len())));
        }
        self.push("variable", Cow::Owned(data), shape, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::Shape(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a, b]);
        self.push("add", Cow::Owned(value), shape, Op::Add(a.0, b.0), ng)
    }

    /// `x[r, c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "add_row")?;
        if self.shape(bias) != [cols] {
            return Err(Error::Shape(format!("add_row bias {:?} for {cols} columns", self.shape(bias))));
        }
        let b = self.value(bias);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            value.extend(xv[r * cols..(r + 1) * cols].iter().zip(b).map(|(&u, &w)| u + w));
        }
        let ng = self.any_grad(&[x, bias]);
        self.push("add_row", Cow::Owned(value), vec![rows, cols], Op::AddRow(x.0, bias.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a, b]);
        self.push("mul", Cow::Owned(value), shape, Op::Mul(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value: Vec<T> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push("scale", Cow::Owned(value), shape, Op::Scale(a.0, c), ng)
    }

    /// `sum_i w_i * x_i` over scalar nodes, accumulated in input order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::InvalidInput("weighted_sum of no terms".into()));
        }
        let mut acc = T::zero();
        let mut recorded = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            let x = self.scalar(v)?;
            let w = T::of(w);
            acc = acc + w * x;
            recorded.push((v.0, w));
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.any_grad(&vars);
        self.push("weighted_sum", Cow::Owned(vec![acc]), Vec::new(), Op::WeightedSum(recorded), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.any_grad(&[a, b]);
        self.push("matmul", Cow::Owned(value), vec![m, n], Op::MatMul(a.0, b.0), ng)
    }

    fn unary(&mut self, what: &str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value: Vec<T> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.any_grad(&[a]);
        self.push(what, Cow::Owned(value), shape, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, kernels::gelu, Op::Gelu(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum::<T>();
        let ng = self.any_grad(&[a]);
        self.push("sum", Cow::Owned(vec![s]), Vec::new(), Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::InvalidInput("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Row lookup `table[ids[i]]` into a `[ids.len(), cols]` matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidInput(format!("row id {bad} outside table of {rows} rows")));
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            value.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let ng = self.any_grad(&[table]);
        self.push(
            "gather",
            Cow::Owned(value),
            vec![ids.len(), cols],
            Op::Gather { table: table.0, ids: ids.to_vec() },
            ng,
        )
    }

    /// Contiguous rows `[start, start + count)` of a matrix.
    pub fn rows(&mut self, table: Var, start: usize, count: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(table, "rows")?;
        if start + count > rows {
            return Err(Error::Shape(format!("rows {start}..{} of a {rows}-row table", start + count)));
        }
        let value = self.value(table)[start * cols..(start + count) * cols].to_vec();
        let ng = self.any_grad(&[table]);
        self.push("rows", Cow::Owned(value), vec![count, cols], Op::Rows { table: table.0, start }, ng)
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "layernorm")?;
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::Shape(format!("layernorm affine params for {cols} columns")));
        }
        let mut out = vec![T::zero(); rows * cols];
        let (means, rstds) =
            kernels::layernorm_forward(self.value(x), cols, self.value(gain), self.value(bias), &mut out);
        let ng = self.any_grad(&[x, gain, bias]);
        self.push(
            "layernorm",
            Cow::Owned(out),
            vec![rows, cols],
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, means, rstds },
            ng,
        )
    }

    /// Causal multi-head self-attention over packed `[t, 3d]` q|k|v rows.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (t, w) = self.matrix_dims(qkv, "attention")?;
        if w % 3 != 0 || (w / 3) % heads != 0 {
            return Err(Error::Shape(format!("attention width {w} with {heads} heads")));
        }
        let d = w / 3;
        let mut out = vec![T::zero(); t * d];
        let mut probs = vec![T::zero(); heads * t * t];
        kernels::attention_forward(self.value(qkv), t, d, heads, &mut out, Some(&mut probs));
        let ng = self.any_grad(&[qkv]);
        self.push("attention", Cow::Owned(out), vec![t, d], Op::Attention { qkv: qkv.0, heads, probs }, ng)
    }

    /// Mean softmax cross-entropy over rows with `Some` target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Shape(format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::InvalidInput(format!("target {bad} outside vocabulary {vocab}")));
        }
        let scored = targets.iter().filter(|t| t.is_some()).count();
        if scored == 0 {
            return Err(Error::InvalidInput("cross_entropy with no scored rows".into()));
        }
        let (total, probs) = kernels::cross_entropy_forward(self.value(logits), vocab, targets);
        let scale = T::one() / T::of(scored as f64);
        let ng = self.any_grad(&[logits]);
        self.push(
            "cross_entropy",
            Cow::Owned(vec![total * scale]),
            Vec::new(),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, scale },
            ng,
        )
    }

    /// Gradients of a scalar node with respect to every node that needs them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar of shape {:?}", root.shape)));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let (before, _) = grads.split_at_mut(i);
            self.propagate(i, node, &g, before);
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                check_finite(&format!("gradient of node {i}"), g)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| {
            assert!(j < i, "tape input {j} does not precede node {i}");
            nodes[j].needs_grad
        };
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                let len = nodes[j].value.len();
                grads[j].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for j in [a, b] {
                    if wants(j) {
                        let ga = acc!(j);
                        for (x, &y) in ga.iter_mut().zip(g) {
                            *x = *x + y;
                        }
                    }
                }
            }
            &Op::AddRow(x, b) => {
                let cols = nodes[b].value.len();
                if wants(x) {
                    let gx = acc!(x);
                    for (u, &v) in gx.iter_mut().zip(g) {
                        *u = *u + v;
                    }
                }
                if wants(b) {
                    let gb = acc!(b);
                    for row in g.chunks(cols) {
                        for (u, &v) in gb.iter_mut().zip(row) {
                            *u = *u + v;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = &nodes[b].value;
                    let ga = acc!(a);
                    for k in 0..ga.len() {
                        ga[k] = ga[k] + g[k] * bv[k];
                    }
                }
                if wants(b) {
                    let av = &nodes[a].value;
                    let gb = acc!(b);
                    for k in 0..gb.len() {
                        gb[k] = gb[k] + g[k] * av[k];
                    }
                }
            }
            &Op::Scale(a, c) => {
                if wants(a) {
                    let ga = acc!(a);
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x = *x + c * y;
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(j, w) in terms {
                    if wants(j) {
                        let gj = acc!(j);
                        gj[0] = gj[0] + w * g[0];
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                let n = nodes[b].shape[1];
                if wants(a) {
                    let ga = acc!(a);
                    kernels::gemm(
                        T::one(),
                        MatRef::dense(g, m, n),
                        MatRef::dense(&nodes[b].value, k, n).t(),
                        T::one(),
                        MatMut::dense(ga, m, k),
                    );
                }
                if wants(b) {
                    let gb = acc!(b);
                    kernels::gemm(
                        T::one(),
                        MatRef::dense(&nodes[a].value, m, k).t(),
                        MatRef::dense(g, m, n),
                        T::one(),
                        MatMut::dense(gb, k, n),
                    );
                }
            }
            &Op::Tanh(a) => {
                if wants(a) {
                    let y = &node.value;
                    let ga = acc!(a);
                    for k in 0..ga.len() {
                        ga[k] = ga[k] + g[k] * (T::one() - y[k] * y[k]);
                    }
                }
            }
            &Op::Relu(a) => {
                if wants(a) {
                    let x = &nodes[a].value;
                    let ga = acc!(a);
                    for k in 0..ga.len() {
                        if x[k] > T::zero() {
                            ga[k] = ga[k] + g[k];
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                if wants(a) {
                    let x = &nodes[a].value;
                    let ga = acc!(a);
                    for k in 0..ga.len() {
                        ga[k] = ga[k] + g[k] * kernels::gelu_grad(x[k]);
                    }
                }
            }
            &Op::Sum(a) => {
                if wants(a) {
                    let ga = acc!(a);
                    for x in ga.iter_mut() {
                        *x = *x + g[0];
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let cols = nodes[*table].shape[1];
                    let gt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[id * cols + c] = gt[id * cols + c] + g[r * cols + c];
                        }
                    }
                }
            }
            &Op::Rows { table, start } => {
                if wants(table) {
                    let cols = nodes[table].shape[1];
                    let gt = acc!(table);
                    for (k, &v) in g.iter().enumerate() {
                        gt[start * cols + k] = gt[start * cols + k] + v;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, means, rstds } => {
                let cols = nodes[*gain].value.len();
                let mut dg = wants(*gain).then(|| vec![T::zero(); cols]);
                let mut db = wants(*bias).then(|| vec![T::zero(); cols]);
                let dx = if wants(*x) { Some(acc!(*x).as_mut_slice()) } else { None };
                kernels::layernorm_backward(
                    &nodes[*x].value,
                    cols,
                    &nodes[*gain].value,
                    means,
                    rstds,
                    g,
                    dx,
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (j, part) in [(*gain, dg), (*bias, db)] {
                    if let Some(part) = part {
                        let gj = acc!(j);
                        for (u, v) in gj.iter_mut().zip(part) {
                            *u = *u + v;
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                if wants(*qkv) {
                    let (t, w) = (nodes[*qkv].shape[0], nodes[*qkv].shape[1]);
                    let dq = acc!(*qkv);
                    kernels::attention_backward(&nodes[*qkv].value, probs, g, t, w / 3, *heads, dq);
                }
            }
            Op::CrossEntropy { logits, targets, probs, scale } => {
                if wants(*logits) {
                    let vocab = nodes[*logits].shape[1];
                    let gl = acc!(*logits);
                    let s = g[0] * *scale;
                    for (r, tgt) in targets.iter().enumerate() {
                        let Some(tgt) = *tgt else { continue };
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        let pr = &probs[r * vocab..(r + 1) * vocab];
                        for c in 0..vocab {
                            row[c] = row[c] + s * pr[c];
                        }
                        row[tgt] = row[tgt] - s;
                    }
                }
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves the gradient of `v` out, yielding zeros of `len` if `v` was not
    /// reached from the loss.
    pub fn take(&mut self, v: Var, len: usize) -> Vec<T> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(vec![], vec![3.0]).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x), Some(&[6.0][..]));
    }

    #[test]
    fn cross_entropy_gradient_on_symmetric_logits() {
        let mut g = Graph::<f64>::new();
        let z = g.variable(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let l = g.cross_entropy(z, &[Some(0)]).unwrap();
        assert!((g.scalar(l).unwrap() - 2f64.ln()).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(z), Some(&[-0.5, 0.5][..]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(vec![1], vec![f32::MAX]).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(vec![1], vec![2.0]).unwrap();
        let x = g.variable(vec![1], vec![5.0]).unwrap();
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x), Some(&[2.0][..]));
    }

    #[test]
    fn reused_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(vec![2], vec![1.0, -2.0]).unwrap();
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x), Some(&[2.0, 2.0][..]));
    }
}
