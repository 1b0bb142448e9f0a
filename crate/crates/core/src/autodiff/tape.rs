use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{axis_extents, matmul_acc, matmul_nt_acc, matmul_tn_acc, permute};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn tape_id(self) -> u64 {
        self.tape
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Recip(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MatMul { a: usize, b: usize, batched: bool },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    GatherRows { table: usize, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run gradient tape.
///
/// Every operation appends one node; nodes whose inputs carry no gradient are
/// stored as constants without saved intermediates. Backward visits nodes in
/// reverse construction order, and consumes the tape: a second backward call
/// without re-running the forward pass fails with [`Error::TapeConsumed`].
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    consumed: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` if `var` does not require grad.
    pub fn wrt(&self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        let g = self.grads.get(var.index)?.as_ref()?;
        Some(Tensor::raw(self.shapes[var.index].clone(), g.clone()))
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let &(_, node) = self.params.iter().find(|(p, _)| *p == id)?;
        let g = self.grads[node].as_ref()?;
        Some(Tensor::raw(self.shapes[node].clone(), g.clone()))
    }

    /// Writes gradients into every parameter of `store`; parameters the loss
    /// does not reach receive zeros.
    pub fn write_into(&self, store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let g = match self.param(id) {
                Some(g) => g,
                None => Tensor::raw(
                    store.value(id).shape().to_vec(),
                    vec![0.0; store.value(id).numel()],
                ),
            };
            store.get_mut(id).grad = Some(g);
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
            dropout_rng: None,
        }
    }

    /// A tape on which [`Tape::dropout`] is active, seeded deterministically.
    pub fn with_dropout(seed: u64) -> Self {
        let mut t = Self::new();
        t.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        t
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedTensor);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var { index: self.nodes.len() - 1, tape: self.id }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Places a parameter on the tape. Repeated calls return the same handle
    /// so gradients from every use accumulate in one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&i) = self.params.get(&id) {
            return Var { index: i, tape: self.id };
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(id, v.index);
        v
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::raw(ta.shape().to_vec(), data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, v) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(v, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(v, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(v, Op::Mul(ia, ib), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Result<(usize, Tensor)> {
        let i = self.idx(x)?;
        let t = &self.nodes[i].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        Ok((i, Tensor::raw(t.shape().to_vec(), data)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let (i, v) = self.unary(x, |v| v * c)?;
        let rg = self.rg(i);
        Ok(self.push(v, Op::Scale(i, c), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let (i, v) = self.unary(x, |v| v + c)?;
        let rg = self.rg(i);
        Ok(self.push(v, Op::Shift(i), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let (i, v) = self.unary(x, f64::tanh)?;
        let rg = self.rg(i);
        Ok(self.push(v, Op::Tanh(i), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (i, v) = self.unary(x, |v| v.max(0.0))?;
        let rg = self.rg(i);
        Ok(self.push(v, Op::Relu(i), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let (i, v) = self.unary(x, f64::exp)?;
        let rg = self.rg(i);
        Ok(self.push(v, Op::Exp(i), rg))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let (i, v) = self.unary(x, |v| 1.0 / v)?;
        let rg = self.rg(i);
        Ok(self.push(v, Op::Recip(i), rg))
    }

    fn row_op(&mut self, x: Var, row: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ix, ir) = (self.idx(x)?, self.idx(row)?);
        let (tx, tr) = (&self.nodes[ix].value, &self.nodes[ir].value);
        let n = *tx.shape().last().unwrap();
        if tr.numel() != n {
            return Err(Error::ShapeMismatch(format!(
                "{what}: row of {} values against last dimension {n}",
                tr.numel()
            )));
        }
        let r = tr.data();
        let data = tx.data().chunks(n).flat_map(|c| c.iter().zip(r).map(|(&a, &b)| f(a, b))).collect();
        Ok((ix, ir, Tensor::raw(tx.shape().to_vec(), data)))
    }

    /// `x[..., j] + row[j]`
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir, v) = self.row_op(x, row, "add_row", |a, b| a + b)?;
        let rg = self.rg(ix) || self.rg(ir);
        Ok(self.push(v, Op::AddRow(ix, ir), rg))
    }

    /// `x[..., j] * row[j]`
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir, v) = self.row_op(x, row, "mul_row", |a, b| a * b)?;
        let rg = self.rg(ix) || self.rg(ir);
        Ok(self.push(v, Op::MulRow(ix, ir), rg))
    }

    // ---- linear algebra and shape ----

    /// Matrix product. `a` is `[..., m, k]`; `b` is either a shared `[k, n]`
    /// matrix or a batch `[..., k, n]` with the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::ShapeMismatch(format!("matmul needs matrices: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::ShapeMismatch(format!("matmul inner dimensions: {sa:?} x {sb:?}")));
        }
        let lead = &sa[..sa.len() - 2];
        let batched = if sb.len() == 2 {
            false
        } else if &sb[..sb.len() - 2] == lead {
            true
        } else {
            return Err(Error::ShapeMismatch(format!("matmul batch dimensions: {sa:?} x {sb:?}")));
        };
        let batches: usize = lead.iter().product();
        let mut out = vec![0.0; batches * m * n];
        if batched {
            for bi in 0..batches {
                matmul_acc(
                    &ta.data()[bi * m * k..(bi + 1) * m * k],
                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            matmul_acc(ta.data(), tb.data(), &mut out, batches * m, k, n);
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::raw(shape, out), Op::MatMul { a: ia, b: ib, batched }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let v = self.nodes[i].value.reshape(shape)?;
        let rg = self.rg(i);
        Ok(self.push(v, Op::Reshape(i), rg))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let t = &self.nodes[i].value;
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..t.rank()).collect::<Vec<_>>() {
            return Err(Error::ShapeMismatch(format!("bad permutation {perm:?} for rank {}", t.rank())));
        }
        let (data, shape) = permute(t.data(), t.shape(), perm);
        let rg = self.rg(i);
        Ok(self.push(Tensor::raw(shape, data), Op::Permute(i, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::ShapeMismatch("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Softmax along `axis`, stabilized by max subtraction. Entries equal to
    /// `-inf` act as masked positions; NaN, `+inf`, or a fully masked slice
    /// are rejected.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let t = &self.nodes[i].value;
        if axis >= t.rank() {
            return Err(Error::ShapeMismatch(format!("softmax axis {axis} for rank {}", t.rank())));
        }
        if t.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFiniteInput("softmax input contains NaN or +inf".into()));
        }
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |k: usize| (o * len + k) * inner + j;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::NonFiniteInput("softmax slice fully masked".into()));
                }
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(i);
        Ok(self.push(Tensor::raw(shape, out), Op::Softmax { x: i, axis }, rg))
    }

    /// Normalizes the last dimension to zero mean and unit (population)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let t = &self.nodes[ix].value;
        let n = *t.shape().last().unwrap();
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if g.numel() != n || b.numel() != n {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm gain/bias ({}, {}) vs last dimension {n}",
                g.numel(),
                b.numel()
            )));
        }
        let rows = t.numel() / n;
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        Ok(self.push(
            Tensor::raw(shape, out),
            Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, inv_std },
            rg,
        ))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.nodes[i].value.sum();
        let rg = self.rg(i);
        Ok(self.push(Tensor::scalar(s), Op::Sum(i), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let t = &self.nodes[i].value;
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::ShapeMismatch(format!(
                "narrow axis {axis} [{start}, {}) of shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, full, inner) = axis_extents(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(i);
        Ok(self.push(Tensor::raw(shape, out), Op::Narrow { x: i, axis, start }, rg))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::ShapeMismatch("concat of nothing".into()));
        }
        let idxs = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch(format!("concat {s:?} with {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idxs {
                let t = &self.nodes[i].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = idxs.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::raw(shape, out), Op::Concat { inputs: idxs, axis }, rg))
    }

    /// Selects rows of a `[rows, d]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let i = self.idx(table)?;
        let t = &self.nodes[i].value;
        if t.rank() != 2 || indices.is_empty() {
            return Err(Error::ShapeMismatch("gather_rows needs a matrix and indices".into()));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &r in indices {
            if r >= rows {
                return Err(Error::ShapeMismatch(format!("row {r} of table with {rows} rows")));
            }
            out.extend_from_slice(t.row(r));
        }
        let rg = self.rg(i);
        Ok(self.push(
            Tensor::raw(vec![indices.len(), d], out),
            Op::GatherRows { table: i, indices: indices.to_vec() },
            rg,
        ))
    }

    /// Inverted dropout; identity unless the tape was built with
    /// [`Tape::with_dropout`].
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if self.dropout_rng.is_none() {
            return Ok(x);
        }
        let shape = self.value(x).shape().to_vec();
        let n = self.value(x).numel();
        let rng = self.dropout_rng.as_mut().expect("checked");
        let keep = 1.0 - rate;
        let mask = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = self.constant(Tensor::raw(shape, mask));
        self.mul(x, m)
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let li = self.idx(loss)?;
        let lt = &self.nodes[li].value;
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::DetachedTensor);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let params = self.params.iter().map(|(&p, &i)| (p, i)).collect();
        Ok(Gradients { tape: self.id, grads, shapes, params })
    }

    /// Backward pass that writes gradients into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let g = self.backward(loss)?;
        g.write_into(store);
        Ok(g)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        let len = |j: usize| nodes[j].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &j in [a, b].into_iter() {
                    if needs(j) {
                        for (d, gv) in acc(&mut grads[j], g.len()).iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    for (d, gv) in acc(&mut grads[*a], g.len()).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if needs(*b) {
                    for (d, gv) in acc(&mut grads[*b], g.len()).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if needs(*a) {
                    let d = acc(&mut grads[*a], g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] * vb[k];
                    }
                }
                if needs(*b) {
                    let d = acc(&mut grads[*b], g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] * va[k];
                    }
                }
            }
            Op::Scale(x, c) => {
                for (d, gv) in acc(&mut grads[*x], g.len()).iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                for (d, gv) in acc(&mut grads[*x], g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Tanh(x) => {
                let d = acc(&mut grads[*x], g.len());
                for k in 0..g.len() {
                    d[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }
            Op::Relu(x) => {
                let d = acc(&mut grads[*x], g.len());
                for k in 0..g.len() {
                    if out[k] > 0.0 {
                        d[k] += g[k];
                    }
                }
            }
            Op::Exp(x) => {
                let d = acc(&mut grads[*x], g.len());
                for k in 0..g.len() {
                    d[k] += g[k] * out[k];
                }
            }
            Op::Recip(x) => {
                let d = acc(&mut grads[*x], g.len());
                for k in 0..g.len() {
                    d[k] -= g[k] * out[k] * out[k];
                }
            }
            Op::AddRow(x, r) => {
                let n = len(*r);
                if needs(*x) {
                    for (d, gv) in acc(&mut grads[*x], g.len()).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if needs(*r) {
                    let d = acc(&mut grads[*r], n);
                    for chunk in g.chunks(n) {
                        for (dv, gv) in d.iter_mut().zip(chunk) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::MulRow(x, r) => {
                let n = len(*r);
                let (vx, vr) = (nodes[*x].value.data(), nodes[*r].value.data());
                if needs(*x) {
                    let d = acc(&mut grads[*x], g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] * vr[k % n];
                    }
                }
                if needs(*r) {
                    let d = acc(&mut grads[*r], n);
                    for k in 0..g.len() {
                        d[k % n] += g[k] * vx[k];
                    }
                }
            }
            Op::MatMul { a, b, batched } => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let sa = ta.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = tb.shape()[tb.rank() - 1];
                let batches = ta.numel() / (m * k);
                if *batched {
                    if needs(*a) {
                        let d = acc(&mut grads[*a], ta.numel());
                        for bi in 0..batches {
                            matmul_nt_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &tb.data()[bi * k * n..(bi + 1) * k * n],
                                &mut d[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    if needs(*b) {
                        let d = acc(&mut grads[*b], tb.numel());
                        for bi in 0..batches {
                            matmul_tn_acc(
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut d[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                } else {
                    let rows = batches * m;
                    if needs(*a) {
                        let d = acc(&mut grads[*a], ta.numel());
                        matmul_nt_acc(g, tb.data(), d, rows, n, k);
                    }
                    if needs(*b) {
                        let d = acc(&mut grads[*b], tb.numel());
                        matmul_tn_acc(ta.data(), g, d, rows, k, n);
                    }
                }
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (o, &p) in perm.iter().enumerate() {
                    inv[p] = o;
                }
                let (back, _) = permute(g, node.value.shape(), &inv);
                for (d, gv) in acc(&mut grads[*x], g.len()).iter_mut().zip(&back) {
                    *d += gv;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis);
                let d = acc(&mut grads[*x], g.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + j;
                        let dot: f64 = (0..n).map(|k| out[at(k)] * g[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] += out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = len(*gain);
                let gv = nodes[*gain].value.data();
                if needs(*gain) {
                    let d = acc(&mut grads[*gain], n);
                    for (k, gk) in g.iter().enumerate() {
                        d[k % n] += gk * xhat[k];
                    }
                }
                if needs(*bias) {
                    let d = acc(&mut grads[*bias], n);
                    for (k, gk) in g.iter().enumerate() {
                        d[k % n] += gk;
                    }
                }
                if needs(*x) {
                    let d = acc(&mut grads[*x], g.len());
                    let nf = n as f64;
                    for (r, &is) in inv_std.iter().enumerate() {
                        let base = r * n;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..n {
                            let dh = g[base + c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[base + c];
                        }
                        for c in 0..n {
                            let dh = g[base + c] * gv[c];
                            d[base + c] += is / nf * (nf * dh - sum_dh - xhat[base + c] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = len(*x);
                for dv in acc(&mut grads[*x], n).iter_mut() {
                    *dv += g[0];
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = nodes[*x].value.shape();
                let (outer, full, inner) = axis_extents(src_shape, *axis);
                let l = node.value.shape()[*axis];
                let d = acc(&mut grads[*x], outer * full * inner);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let gbase = o * l * inner;
                    for q in 0..l * inner {
                        d[base + q] += g[gbase + q];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &j in inputs {
                    let l = nodes[j].value.shape()[*axis];
                    if needs(j) {
                        let d = acc(&mut grads[j], outer * l * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for q in 0..l * inner {
                                d[o * l * inner + q] += g[src + q];
                            }
                        }
                    }
                    offset += l;
                }
            }
            Op::GatherRows { table, indices } => {
                let dcols = nodes[*table].value.shape()[1];
                let d = acc(&mut grads[*table], len(*table));
                for (r, &row) in indices.iter().enumerate() {
                    for c in 0..dcols {
                        d[row * dcols + c] += g[r * dcols + c];
                    }
                }
            }
        }
    }
}
