//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, so a single reverse sweep over the node
//! list visits children before parents. Parameters are bound lazily: the
//! first call to [`Graph::param`] for a given id copies that tensor into a leaf.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Which keys each query row may attend to.
///
/// Legality is an equivalence on segment labels: query `q` sees key `k` iff
/// both carry the same label. Queries whose segment has no keys produce a
/// zero output row.
#[derive(Clone, Debug)]
pub struct AttendMask {
    n_keys: usize,
    query_group: Vec<Option<usize>>,
    key_groups: Vec<Vec<usize>>,
}

impl AttendMask {
    pub fn from_segments(query_segments: &[usize], key_segments: &[usize]) -> Self {
        let mut slot: std::collections::HashMap<usize, usize> = Default::default();
        let mut key_groups: Vec<Vec<usize>> = Vec::new();
        for (k, &s) in key_segments.iter().enumerate() {
            let g = *slot.entry(s).or_insert_with(|| {
                key_groups.push(Vec::new());
                key_groups.len() - 1
            });
            key_groups[g].push(k);
        }
        let query_group = query_segments.iter().map(|s| slot.get(s).copied()).collect();
        Self {
            n_keys: key_segments.len(),
            query_group,
            key_groups,
        }
    }

    /// Self-attention restricted to equal segment labels.
    pub fn self_segments(segments: &[usize]) -> Self {
        Self::from_segments(segments, segments)
    }

    /// Every query sees every key.
    pub fn full(n_queries: usize, n_keys: usize) -> Self {
        Self::from_segments(&vec![0; n_queries], &vec![0; n_keys])
    }

    /// Each position sees only itself.
    pub fn identity(n: usize) -> Self {
        let seg: Vec<usize> = (0..n).collect();
        Self::self_segments(&seg)
    }

    pub fn n_queries(&self) -> usize {
        self.query_group.len()
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn keys_for(&self, query: usize) -> &[usize] {
        match self.query_group[query] {
            Some(g) => &self.key_groups[g],
            None => &[],
        }
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.keys_for(query).binary_search(&key).is_ok()
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale(Var, f64),
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    SliceRows {
        src: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Rc<AttendMask>,
        probs: Vec<f64>,
        offsets: Vec<usize>,
    },
    GroupMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
        weight: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape for one forward pass, bound to a parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            bound: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf holding a copy of parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Leaf);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        gemm(av, false, bv, false, &mut out, 0.0);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                b_transposed: false,
            },
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(av, false, bv, true, &mut out, 0.0);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                b_transposed: true,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 × d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), rv.shape()),
            ));
        }
        let mut out = xv.clone();
        let r = rv.data();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r) {
                *o += *b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, row }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s))
    }

    /// Row lookup: output row `r` is `src[idx[r]]`.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let mut out = Tensor::zeros(idx.len(), sv.cols());
        for (r, &i) in idx.iter().enumerate() {
            if i >= sv.rows() {
                return Err(shape_err(
                    "gather",
                    format!("row {i} out of range for {:?}", sv.shape()),
                ));
            }
            out.row_mut(r).copy_from_slice(sv.row(i));
        }
        Ok(self.push(
            out,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(p) => self.value(*p).cols(),
            None => return Err(shape_err("concat_rows", "no inputs")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("column mismatch {} vs {cols}", pv.cols()),
                ));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let sv = self.value(src);
        if start + len > sv.rows() {
            return Err(shape_err(
                "slice_rows",
                format!("{start}..{} of {:?}", start + len, sv.shape()),
            ));
        }
        let c = sv.cols();
        let out = Tensor::from_vec(len, c, sv.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { src, start }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.shape() != [1, d] || bv.shape() != [1, d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let mut xhat = Tensor::zeros(xv.rows(), d);
        let mut out = Tensor::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = xh[c] * gv.data()[c] + bv.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(x))
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`,
    /// split into `heads` contiguous column blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Rc<AttendMask>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || kv.cols() != d || vv.shape() != kv.shape() {
            return Err(shape_err(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, heads {heads}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            ));
        }
        if mask.n_queries() != qv.rows() || mask.n_keys() != kv.rows() {
            return Err(shape_err(
                "attention",
                format!(
                    "mask {}x{} for q {} rows / k {} rows",
                    mask.n_queries(),
                    mask.n_keys(),
                    qv.rows(),
                    kv.rows()
                ),
            ));
        }
        let (out, probs, offsets) = attention_forward(qv, kv, vv, heads, &mask);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
                offsets,
            },
        ))
    }

    /// Row `g` of the output is the mean of `x` rows listed in `groups[g]`
    /// (zero for an empty group).
    pub fn group_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Tensor::zeros(groups.len(), xv.cols());
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let inv = 1.0 / members.len() as f64;
            let o = out.row_mut(g);
            for &m in members {
                if m >= xv.rows() {
                    return Err(shape_err("group_mean", format!("row {m} out of range")));
                }
                for (a, b) in o.iter_mut().zip(xv.row(m)) {
                    *a += *b * inv;
                }
            }
        }
        Ok(self.push(out, Op::GroupMean { x, groups }))
    }

    /// Softmax cross-entropy summed over rows, multiplied by `weight`
    /// (`1/n` gives the mean).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weight: f64) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), lv.rows()),
            ));
        }
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= lv.cols() {
                return Err(shape_err(
                    "cross_entropy",
                    format!("label {label} out of {} classes", lv.cols()),
                ));
            }
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            total += lse - row[label];
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        Ok(self.push(
            Tensor::scalar(total * weight),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                weight,
            },
        ))
    }

    /// `Σ wₖ·xₖ` over `1 × 1` inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for (v, w) in terms {
            let t = self.value(*v);
            if t.shape() != [1, 1] {
                return Err(shape_err("weighted_sum", format!("non-scalar {:?}", t.shape())));
            }
            total += w * t.item();
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != [1, 1] {
            return Err(shape_err("backward", "loss must be 1x1"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            self.propagate(i, g, lower);
        }
        let params = self
            .bound
            .iter()
            .enumerate()
            .map(|(pi, b)| {
                let shape = self.params.get(ParamId::from_index(pi)).shape();
                b.and_then(|v| grads[v.0].take())
                    .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
            })
            .collect();
        Ok(Gradients { params })
    }

    fn propagate(&self, i: usize, g: &Tensor, lower: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                {
                    let da = slot(lower, *a, av);
                    // out = a·b  => da += g·bᵀ ; out = a·bᵀ => da += g·b
                    gemm(g, false, bv, !*b_transposed, da, 1.0);
                }
                let db = slot(lower, *b, bv);
                if *b_transposed {
                    gemm(g, true, av, false, db, 1.0);
                } else {
                    gemm(av, true, g, false, db, 1.0);
                }
            }
            Op::Add(a, b) => {
                slot(lower, *a, g).add_assign(g);
                slot(lower, *b, g).add_assign(g);
            }
            Op::AddRow { x, row } => {
                slot(lower, *x, g).add_assign(g);
                let dr = slot(lower, *row, self.value(*row));
                for r in 0..g.rows() {
                    for (a, b) in dr.data_mut().iter_mut().zip(g.row(r)) {
                        *a += *b;
                    }
                }
            }
            Op::Scale(x, s) => {
                let dx = slot(lower, *x, g);
                for (a, b) in dx.data_mut().iter_mut().zip(g.data()) {
                    *a += s * b;
                }
            }
            Op::Gather { src, idx } => {
                let ds = slot(lower, *src, self.value(*src));
                for (r, &i) in idx.iter().enumerate() {
                    for (a, b) in ds.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a += *b;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.data().len();
                    let dp = slot(lower, *p, pv);
                    for (a, b) in dp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                        *a += *b;
                    }
                    offset += n;
                }
            }
            Op::SliceRows { src, start } => {
                let sv = self.value(*src);
                let c = sv.cols();
                let ds = slot(lower, *src, sv);
                for (a, b) in ds.data_mut()[start * c..start * c + g.data().len()]
                    .iter_mut()
                    .zip(g.data())
                {
                    *a += *b;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let d = g.cols();
                {
                    let dg = slot(lower, *gamma, gv);
                    for r in 0..g.rows() {
                        for c in 0..d {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                {
                    let db = slot(lower, *beta, gv);
                    for r in 0..g.rows() {
                        for (a, b) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *a += *b;
                        }
                    }
                }
                let dx = slot(lower, *x, g);
                let mut dxhat = vec![0.0; d];
                for (r, &istd) in inv_std.iter().enumerate() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    for ((o, a), b) in dxhat.iter_mut().zip(gr).zip(gv.data()) {
                        *o = a * b;
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let out = dx.row_mut(r);
                    for ((o, &dh), &xc) in out.iter_mut().zip(&dxhat).zip(xr) {
                        *o += istd * (dh - mean_d - xc * mean_dx);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = slot(lower, *x, xv);
                for ((a, b), xval) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *a += b * gelu_grad(*xval);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
                offsets,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Tensor::zeros(qv.rows(), qv.cols());
                let mut dk = Tensor::zeros(kv.rows(), kv.cols());
                let mut dv = Tensor::zeros(vv.rows(), vv.cols());
                attention_backward(
                    g, qv, kv, vv, *heads, mask, probs, offsets, &mut dq, &mut dk, &mut dv,
                );
                slot(lower, *q, qv).add_assign(&dq);
                slot(lower, *k, kv).add_assign(&dk);
                slot(lower, *v, vv).add_assign(&dv);
            }
            Op::GroupMean { x, groups } => {
                let dx = slot(lower, *x, self.value(*x));
                for (gi, members) in groups.iter().enumerate() {
                    if members.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / members.len() as f64;
                    for &m in members {
                        for (a, b) in dx.row_mut(m).iter_mut().zip(g.row(gi)) {
                            *a += *b * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                weight,
            } => {
                let scale = g.item() * weight;
                let dl = slot(lower, *logits, probs);
                for (r, &label) in labels.iter().enumerate() {
                    let out = dl.row_mut(r);
                    for (a, p) in out.iter_mut().zip(probs.row(r)) {
                        *a += scale * p;
                    }
                    out[label] -= scale;
                }
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    slot(lower, *v, g).data_mut()[0] += w * g.item();
                }
            }
        }
    }
}

/// Gradient slot for `v`, created as zeros shaped like `like` on first use.
fn slot<'a>(lower: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    lower[v.0].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

/// Per-parameter gradients from one backward pass, indexed like the store.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: Vec<Tensor>,
}

impl Gradients {
    pub fn from_tensors(params: Vec<Tensor>) -> Self {
        Self { params }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.params
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.params
    }

    pub fn global_norm(&self) -> f64 {
        self.params.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Returns the output, the flattened attention weights and the per-query
/// offsets into them (`heads × |keys|` weights per query).
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: &AttendMask,
) -> (Tensor, Vec<f64>, Vec<usize>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(q.rows(), d);
    let mut probs = Vec::new();
    let mut offsets = Vec::with_capacity(q.rows() + 1);
    let mut scores = Vec::new();
    for i in 0..q.rows() {
        offsets.push(probs.len());
        let keys = mask.keys_for(i);
        if keys.is_empty() {
            continue;
        }
        let qi = q.row(i);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            scores.clear();
            for &j in keys {
                let kj = &k.row(j)[cols.clone()];
                let s: f64 = qi[cols.clone()].iter().zip(kj).map(|(a, b)| a * b).sum();
                scores.push(s * scale);
            }
            let lse = log_sum_exp(&scores);
            let base = probs.len();
            probs.extend(scores.iter().map(|s| (s - lse).exp()));
            let o = &mut out.row_mut(i)[cols.clone()];
            for (jj, &j) in keys.iter().enumerate() {
                let p = probs[base + jj];
                for (a, b) in o.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *a += p * b;
                }
            }
        }
    }
    offsets.push(probs.len());
    (out, probs, offsets)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: &AttendMask,
    probs: &[f64],
    offsets: &[usize],
    dq: &mut Tensor,
    dk: &mut Tensor,
    dv: &mut Tensor,
) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = Vec::new();
    for i in 0..q.rows() {
        let keys = mask.keys_for(i);
        if keys.is_empty() {
            continue;
        }
        let n = keys.len();
        let gi = g.row(i);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &probs[offsets[i] + h * n..offsets[i] + (h + 1) * n];
            dp.clear();
            for (jj, &j) in keys.iter().enumerate() {
                let vj = &v.row(j)[cols.clone()];
                dp.push(gi[cols.clone()].iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                for (a, b) in dv.row_mut(j)[cols.clone()].iter_mut().zip(&gi[cols.clone()]) {
                    *a += p[jj] * b;
                }
            }
            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (jj, &j) in keys.iter().enumerate() {
                let ds = p[jj] * (dp[jj] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let qi = &q.row(i)[cols.clone()];
                for (a, b) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                    *a += ds * b;
                }
                let kj = &k.row(j)[cols.clone()];
                for (a, b) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                    *a += ds * b;
                }
            }
        }
    }
}

/// Attention weights for each query and head as a dense `[query][head][key]`
/// table, with forbidden keys holding exactly zero.
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    heads: usize,
    mask: &AttendMask,
) -> Vec<Vec<Vec<f64>>> {
    let v = Tensor::zeros(k.rows(), k.cols());
    let (_, probs, offsets) = attention_forward(q, k, &v, heads, mask);
    (0..q.rows())
        .map(|i| {
            let keys = mask.keys_for(i);
            (0..heads)
                .map(|h| {
                    let mut dense = vec![0.0; k.rows()];
                    for (jj, &j) in keys.iter().enumerate() {
                        dense[j] = probs[offsets[i] + h * keys.len() + jj];
                    }
                    dense
                })
                .collect()
        })
        .collect()
}
