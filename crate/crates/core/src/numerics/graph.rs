use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{gemm, gelu, gelu_grad};
use crate::numerics::tensor::{GradMap, ParamStore, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Param(usize),
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gather { src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Attention { qkv: Var, segments: Vec<(usize, usize)>, heads: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape over a borrowed parameter store.
///
/// Nodes are appended in evaluation order, so parents always precede children
/// and the node list is itself a topological order. Parameters enter the graph
/// through [`Graph::param`]; gradients are only tracked for nodes that depend
/// on a trainable parameter.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Leaf node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: &str) -> Result<Var> {
        let idx = self
            .store
            .index_of(id)
            .ok_or_else(|| Error::contract(format!("unknown parameter {id:?}")))?;
        if let Some(v) = self.param_vars.get(&idx) {
            return Ok(*v);
        }
        let p = self.store.by_index(idx);
        let v = self.push(p.tensor.clone(), Op::Param(idx), p.trainable);
        self.param_vars.insert(idx, v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::contract(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix_unchecked(m, n, out), Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() || ta.cols() != tb.cols() {
            return Err(Error::contract(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `a + 1·bias`, broadcasting a single row over every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let tb = self.value(bias);
        if tb.numel() != c {
            return Err(Error::contract(format!("add_row {r}x{c} with bias {:?}", tb.shape())));
        }
        let b = tb.data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Tensor::matrix_unchecked(r, c, data), Op::AddRow(a, bias), rg))
    }

    /// `a ∘ row`, broadcasting a single row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let tr = self.value(row);
        if tr.numel() != c {
            return Err(Error::contract(format!("mul_row {r}x{c} with row {:?}", tr.shape())));
        }
        let w = tr.data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (x, y) in chunk.iter_mut().zip(w) {
                *x *= y;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::matrix_unchecked(r, c, data), Op::MulRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::contract(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix_unchecked(c, r, out), Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x)).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.tanh()).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix_unchecked(r, c, data), Op::Softmax(a), rg)
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::contract(format!("layer_norm over {c} columns with mismatched gain/bias")));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::matrix_unchecked(r, c, out),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            rg,
        ))
    }

    /// Selects rows of `src` by index; the embedding-lookup primitive.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(src);
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!("row index {bad} out of range for {r} rows")));
        }
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&s[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::matrix_unchecked(idx.len(), c, out),
            Op::Gather { src, idx: idx.to_vec() },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|p| self.dims(*p).1)
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(Error::contract(format!("concat_rows width {} vs {c}", t.cols())));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix_unchecked(rows, c, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|p| self.dims(*p).0)
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = self.dims(*p);
            if pr != r {
                return Err(Error::contract(format!("concat_cols height {pr} vs {r}")));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix_unchecked(r, total, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over rows, producing a single row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks_exact(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix_unchecked(1, c, out), Op::MeanRows(a), rg)
    }

    /// Mean softmax cross-entropy of each row of `logits` against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::contract(format!("{} targets for {r} logit rows", targets.len())));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!("target {t} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
            let lse = log_sum_exp(row);
            loss -= row[t] - lse;
            softmax_in_place(row);
        }
        loss /= r.max(1) as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `qkv` is `N x 3d` holding queries, keys and values side by side.
    /// `segments` lists `(start, len)` of each sequence; attention never
    /// crosses a segment boundary, so ragged batches need no padding mask.
    pub fn attention(&mut self, qkv: Var, segments: &[(usize, usize)], heads: usize) -> Result<Var> {
        let (n, w) = self.dims(qkv);
        if w % 3 != 0 || heads == 0 || (w / 3) % heads != 0 {
            return Err(Error::contract(format!("attention width {w} with {heads} heads")));
        }
        let mut cursor = 0;
        for &(s, l) in segments {
            if s != cursor || l == 0 {
                return Err(Error::contract("attention segments must be contiguous and nonempty"));
            }
            cursor += l;
        }
        if cursor != n {
            return Err(Error::contract(format!("segments cover {cursor} of {n} rows")));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; segments.iter().map(|(_, l)| l * l * heads).sum()];
        let (mut q, mut k, mut v, mut o) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut p_off = 0;
        for &(s, l) in segments {
            for h in 0..heads {
                gather_head(src, w, s, l, h * dh, dh, scale, &mut q);
                gather_head(src, w, s, l, d + h * dh, dh, 1.0, &mut k);
                gather_head(src, w, s, l, 2 * d + h * dh, dh, 1.0, &mut v);
                let p = &mut probs[p_off..p_off + l * l];
                p_off += l * l;
                gemm(l, dh, l, &q, false, &k, true, p, 0.0);
                p.chunks_mut(l).for_each(softmax_in_place);
                o.clear();
                o.resize(l * dh, 0.0);
                gemm(l, l, dh, p, false, &v, false, &mut o, 0.0);
                for i in 0..l {
                    out[(s + i) * d + h * dh..(s + i) * d + (h + 1) * dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
                }
            }
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(
            Tensor::matrix_unchecked(n, d, out),
            Op::Attention { qkv, segments: segments.to_vec(), heads, probs },
            rg,
        ))
    }

    /// Gradients of a scalar `loss` with respect to every trainable parameter
    /// that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!("backward from non-scalar of shape {:?}", lt.shape())));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::Numerical { node: Some(loss.0), msg: format!("loss is {}", lt.data()[0]) });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(GradMap::new());
        }
        grads[loss.0] = Some(vec![1.0]);
        let mut out = GradMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical { node: Some(i), msg: "non-finite gradient".into() });
            }
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            if let Op::Param(idx) = node.op {
                let p = self.store.by_index(idx);
                out.insert(p.id.clone(), Tensor::new(p.tensor.shape().to_vec(), g)?);
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if let Some(ga) = self.slot(grads, *a) {
                    // dA += dC · Bᵀ
                    gemm(m, n, k, g, false, self.value(*b).data(), true, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB += Aᵀ · dC
                    gemm(k, m, n, self.value(*a).data(), true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = self.slot(grads, *v) {
                        axpy(s, g, 1.0);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(s) = self.slot(grads, *a) {
                    axpy(s, g, 1.0);
                }
                let c = self.dims(*a).1;
                if let Some(s) = self.slot(grads, *bias) {
                    for row in g.chunks_exact(c) {
                        axpy(s, row, 1.0);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let c = self.dims(*a).1;
                let (va, vr) = (self.value(*a).data(), self.value(*row).data());
                if let Some(s) = self.slot(grads, *a) {
                    for (srow, grow) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((o, gg), w) in srow.iter_mut().zip(grow).zip(vr) {
                            *o += gg * w;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *row) {
                    for (arow, grow) in va.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for ((o, gg), x) in s.iter_mut().zip(grow).zip(arow) {
                            *o += gg * x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, gg), y) in s.iter_mut().zip(g).zip(vb) {
                        *o += gg * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((o, gg), x) in s.iter_mut().zip(g).zip(va) {
                        *o += gg * x;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    axpy(s, g, *k);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    axpy(s, g, 1.0);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, gg), xx) in s.iter_mut().zip(g).zip(x) {
                        *o += gg * gelu_grad(*xx);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, gg), yy) in s.iter_mut().zip(g).zip(y) {
                        *o += gg * (1.0 - yy * yy);
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                if let Some(s) = self.slot(grads, *a) {
                    for ((srow, grow), yrow) in
                        s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(node.value.data().chunks_exact(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data();
                if let Some(s) = self.slot(grads, *gain) {
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for grow in g.chunks_exact(c) {
                        axpy(s, grow, 1.0);
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let nf = c as f64;
                    let mut dh = vec![0.0; c];
                    for (i, (grow, hrow)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = grow[j] * gv[j];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let srow = &mut s[i * c..(i + 1) * c];
                        for j in 0..c {
                            srow[j] += inv_std[i] / nf * (nf * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gather { src, idx } => {
                let c = node.value.cols();
                if let Some(s) = self.slot(grads, *src) {
                    for (k, &row) in idx.iter().enumerate() {
                        axpy(&mut s[row * c..(row + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(s) = self.slot(grads, *p) {
                        axpy(s, &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for p in parts {
                    let (r, c) = self.dims(*p);
                    if let Some(s) = self.slot(grads, *p) {
                        for i in 0..r {
                            axpy(&mut s[i * c..(i + 1) * c], &g[i * total + col..i * total + col + c], 1.0);
                        }
                    }
                    col += c;
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.dims(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for row in s.chunks_exact_mut(c) {
                        axpy(row, g, 1.0 / r as f64);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (r, c) = self.dims(*logits);
                if let Some(s) = self.slot(grads, *logits) {
                    let k = g[0] / r as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[i * c + j] += k * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Attention { qkv, segments, heads, probs } => {
                if let Some(s) = self.slot(grads, *qkv) {
                    attention_backward(self.value(*qkv), segments, *heads, probs, g, s);
                }
            }
        }
    }
}

/// Copies the `dh` columns starting at `col` of rows `s..s+l` into `buf`, times `scale`.
#[allow(clippy::too_many_arguments)]
fn gather_head(src: &[f64], w: usize, s: usize, l: usize, col: usize, dh: usize, scale: f64, buf: &mut Vec<f64>) {
    buf.clear();
    for i in 0..l {
        let row = &src[(s + i) * w + col..(s + i) * w + col + dh];
        buf.extend(row.iter().map(|x| x * scale));
    }
}

fn scatter_add_head(dst: &mut [f64], w: usize, s: usize, l: usize, col: usize, dh: usize, buf: &[f64]) {
    for i in 0..l {
        axpy(&mut dst[(s + i) * w + col..(s + i) * w + col + dh], &buf[i * dh..(i + 1) * dh], 1.0);
    }
}

fn attention_backward(
    qkv: &Tensor,
    segments: &[(usize, usize)],
    heads: usize,
    probs: &[f64],
    g: &[f64],
    s_grad: &mut [f64],
) {
    let w = qkv.cols();
    let d = w / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let src = qkv.data();
    let (mut q, mut k, mut v, mut go) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut dp, mut dq, mut dk, mut dv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut p_off = 0;
    for &(s, l) in segments {
        for h in 0..heads {
            let p = &probs[p_off..p_off + l * l];
            p_off += l * l;
            gather_head(src, w, s, l, h * dh, dh, 1.0, &mut q);
            gather_head(src, w, s, l, d + h * dh, dh, 1.0, &mut k);
            gather_head(src, w, s, l, 2 * d + h * dh, dh, 1.0, &mut v);
            gather_head(g, d, s, l, h * dh, dh, 1.0, &mut go);
            for buf in [&mut dp, &mut dq, &mut dk, &mut dv] {
                buf.clear();
            }
            dp.resize(l * l, 0.0);
            dq.resize(l * dh, 0.0);
            dk.resize(l * dh, 0.0);
            dv.resize(l * dh, 0.0);
            // dP = dO·Vᵀ, dV = Pᵀ·dO
            gemm(l, dh, l, &go, false, &v, true, &mut dp, 0.0);
            gemm(l, l, dh, p, true, &go, false, &mut dv, 0.0);
            // dS = P ∘ (dP − rowsum(P ∘ dP)), with the score scale folded in
            for (pr, dr) in p.chunks(l).zip(dp.chunks_mut(l)) {
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            gemm(l, l, dh, &dp, false, &k, false, &mut dq, 0.0);
            gemm(l, l, dh, &dp, true, &q, false, &mut dk, 0.0);
            scatter_add_head(s_grad, w, s, l, h * dh, dh, &dq);
            scatter_add_head(s_grad, w, s, l, d + h * dh, dh, &dk);
            scatter_add_head(s_grad, w, s, l, 2 * d + h * dh, dh, &dv);
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
