//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] records every operation applied during a forward pass. Model
//! parameters enter as named leaves, so after [`Graph::backward`] their
//! gradients can be read back by path. Only the operations the model needs
//! are provided; each stores whatever its backward pass requires.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One independent attention problem: queries `[q_start, q_start+q_len)`
/// attend over keys/values `[k_start, k_start+k_len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    pub fn square(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

/// Block-diagonal attention structure for a packed batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<Segment>,
    pub causal: bool,
}

impl AttnLayout {
    pub fn self_attention(lengths: &[usize], causal: bool) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let s = Segment::square(start, len);
                start += len;
                s
            })
            .collect();
        Self { segments, causal }
    }

    pub fn query_rows(&self) -> usize {
        self.segments.iter().map(|s| s.q_start + s.q_len).max().unwrap_or(0)
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const PROB_CLAMP: f64 = 1e-7;

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Affine(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        layout: Arc<AttnLayout>,
        // probs[segment][head] is a q_len × k_len row-major block
        probs: Vec<Vec<Vec<f64>>>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Transpose(Var),
    RowDot(Var, Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Bce {
        probs: Var,
        labels: Vec<f64>,
        clamped: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        softmax: Matrix,
        divisor: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients by path; parameters that were touched but received
    /// no gradient come back as zeros.
    pub fn into_param_grads(mut self, params: &ModelParams) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        for (path, v) in &self.params {
            let g = self.grads[v.0].take().unwrap_or_else(|| {
                let (r, c) = params.get(path).map(Matrix::shape).unwrap_or((0, 0));
                Matrix::zeros(r, c)
            });
            out.insert(path.clone(), g);
        }
        out
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients are not propagated into it.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, false)
    }

    /// Input whose gradient is wanted (used by tests and probes).
    pub fn input_with_grad(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, true)
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(path) {
            return Ok(v);
        }
        let value = self
            .params
            .get(path)
            .ok_or_else(|| Error::Shape(format!("unknown parameter `{path}`")))?
            .clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} · {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.matmul(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Shape(format!(
                "matmul_t {:?} · {:?}ᵀ",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.matmul_t(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(cols, bv.cols());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `s·a + offset`
    pub fn affine(&mut self, a: Var, s: f64, offset: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = s * *v + offset;
        }
        let rg = self.rg(a);
        self.push(out, Op::Affine(a, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh());
        }
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = sigmoid(*v);
        }
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row-wise layer normalisation with learned scale `gamma` and offset
    /// `beta` (both `1 × d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(Error::Shape(format!(
                "layer_norm over {d} features with gamma {:?}, beta {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let mut xhat = Matrix::zeros(rows, d);
        let mut out = Matrix::zeros(rows, d);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = gv.data()[c] * xh[c] + bv.data()[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over a block-diagonal layout.
    /// Queries and keys are split into `heads` equal column groups, as are
    /// values; the output has the value width.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if heads == 0 || qv.cols() != kv.cols() || qv.cols() % heads != 0 || vv.cols() % heads != 0
        {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if kv.rows() != vv.rows() {
            return Err(Error::Shape("attention keys and values differ in length".into()));
        }
        let dh = qv.cols() / heads;
        let dvh = vv.cols() / heads;
        let mut out = Matrix::zeros(qv.rows(), vv.cols());
        let mut probs = Vec::with_capacity(layout.segments.len());
        for seg in &layout.segments {
            if seg.q_start + seg.q_len > qv.rows() || seg.k_start + seg.k_len > kv.rows() {
                return Err(Error::Shape(format!("attention segment {seg:?} out of range")));
            }
            if seg.k_len == 0 && seg.q_len > 0 {
                return Err(Error::Shape("attention over an empty key set".into()));
            }
            if layout.causal && seg.q_len != seg.k_len {
                return Err(Error::Shape("causal attention needs square segments".into()));
            }
            let mut seg_probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let mut p = vec![0.0; seg.q_len * seg.k_len];
                for i in 0..seg.q_len {
                    let qrow = &qv.row(seg.q_start + i)[h * dh..(h + 1) * dh];
                    let limit = if layout.causal { i + 1 } else { seg.k_len };
                    let prow = &mut p[i * seg.k_len..(i + 1) * seg.k_len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..limit {
                        let krow = &kv.row(seg.k_start + j)[h * dh..(h + 1) * dh];
                        let s = dot(qrow, krow) * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for pj in prow.iter_mut().take(limit) {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    for pj in prow.iter_mut().take(limit) {
                        *pj /= sum;
                    }
                    let orow = &mut out.row_mut(seg.q_start + i)[h * dvh..(h + 1) * dvh];
                    for (j, &pj) in prow.iter().enumerate().take(limit) {
                        let vrow = &vv.row(seg.k_start + j)[h * dvh..(h + 1) * dvh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
                seg_probs.push(p);
            }
            probs.push(seg_probs);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights recorded by an attention node, as one
    /// `q_len × k_len` matrix per (segment, head).
    pub fn attention_weights(&self, v: Var) -> Option<Vec<Vec<Matrix>>> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, layout, .. } => Some(
                probs
                    .iter()
                    .zip(&layout.segments)
                    .map(|(heads, seg)| {
                        heads
                            .iter()
                            .map(|p| Matrix::from_vec(seg.q_len, seg.k_len, p.clone()).unwrap())
                            .collect()
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let sv = self.value(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= sv.rows()) {
            return Err(Error::Shape(format!(
                "row {bad} out of range for {} rows",
                sv.rows()
            )));
        }
        let out = sv.select_rows(&idx);
        let rg = self.rg(src);
        Ok(self.push(out, Op::GatherRows { src, idx }, rg))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in &parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::Shape("concat_rows width mismatch".into()));
            }
            data.extend_from_slice(pv.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Matrix::from_vec(rows, cols, data)?, Op::ConcatRows(parts), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Row-wise dot products of two equally shaped matrices, as an `n × 1`
    /// column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("row_dot {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = (0..av.rows()).map(|r| dot(av.row(r), bv.row(r))).collect();
        let out = Matrix::from_vec(av.rows(), 1, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = dot(row, row).sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Mean binary cross-entropy of an `n × 1` column of probabilities.
    /// Probabilities outside `[PROB_CLAMP, 1 - PROB_CLAMP]` are clamped and
    /// pass no gradient.
    pub fn bce(&mut self, probs: Var, labels: Vec<f64>) -> Result<Var> {
        let pv = self.value(probs);
        if pv.cols() != 1 || pv.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "bce over {:?} with {} labels",
                pv.shape(),
                labels.len()
            )));
        }
        let mut clamped = Vec::with_capacity(labels.len());
        let mut total = 0.0;
        for (&s, &y) in pv.data().iter().zip(&labels) {
            let c = s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            clamped.push(c != s);
            total += -y * c.ln() - (1.0 - y) * (1.0 - c).ln();
        }
        let out = Matrix::filled(1, 1, total / labels.len() as f64);
        let rg = self.rg(probs);
        Ok(self.push(
            out,
            Op::Bce {
                probs,
                labels,
                clamped,
            },
            rg,
        ))
    }

    /// Number of probabilities clamped by a [`Graph::bce`] node.
    pub fn saturation_count(&self, v: Var) -> usize {
        match &self.nodes[v.0].op {
            Op::Bce { clamped, .. } => clamped.iter().filter(|&&c| c).count(),
            _ => 0,
        }
    }

    /// Softmax cross-entropy summed over rows that carry a target, divided by
    /// `divisor`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<Option<usize>>,
        divisor: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy over {} rows with {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        let mut softmax = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for (s, v) in softmax.row_mut(r).iter_mut().zip(row) {
                *s = (v - lse).exp();
            }
            if let Some(t) = *t {
                if t >= row.len() {
                    return Err(Error::Shape(format!("target {t} out of {} classes", row.len())));
                }
                total += lse - row[t];
            }
        }
        let out = Matrix::filled(1, 1, total / divisor);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets,
                softmax,
                divisor,
            },
            rg,
        ))
    }

    /// Row-wise softmax probabilities recorded by a cross-entropy node.
    pub fn cross_entropy_probs(&self, v: Var) -> Option<&Matrix> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { softmax, .. } => Some(softmax),
            _ => None,
        }
    }

    /// `Σ wᵢ·xᵢ` over `1 × 1` scalars.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in &terms {
            let val = self.value(v);
            if val.shape() != (1, 1) {
                return Err(Error::Shape("weighted_sum expects scalars".into()));
            }
            total += w * val.scalar();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Matrix::filled(1, 1, total), Op::WeightedSum(terms), rg))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Matrix::filled(rv.rows(), rv.cols(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .param_vars
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ ⇒ da = g b, db = gᵀ a
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) | Op::Affine(a, s) => {
                let mut ga = g.clone();
                ga.scale_in_place(*s);
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (o, &x) in ga.data_mut().iter_mut().zip(x.data()) {
                    let inner = GELU_C * (x + 0.044715 * x * x * x);
                    let t = inner.tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *o *= d;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (o, &s) in ga.data_mut().iter_mut().zip(node.value.data()) {
                    *o *= s * (1.0 - s);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, d) = xhat.shape();
                let gv = self.value(*gamma);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = Matrix::zeros(1, d);
                    let mut gb = Matrix::zeros(1, d);
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        for c in 0..d {
                            gg.data_mut()[c] += gr[c] * xr[c];
                            gb.data_mut()[c] += gr[c];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gb);
                }
                if self.rg(*x) {
                    let mut gx = Matrix::zeros(rows, d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * gv.data()[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xr[c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        let out = gx.row_mut(r);
                        for c in 0..d {
                            out[c] = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                layout,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dh = qv.cols() / heads;
                let dvh = vv.cols() / heads;
                let mut gq = Matrix::zeros(qv.rows(), qv.cols());
                let mut gk = Matrix::zeros(kv.rows(), kv.cols());
                let mut gv = Matrix::zeros(vv.rows(), vv.cols());
                for (seg, seg_probs) in layout.segments.iter().zip(probs) {
                    for (h, p) in seg_probs.iter().enumerate() {
                        let mut dp = vec![0.0; seg.k_len];
                        for i in 0..seg.q_len {
                            let limit = if layout.causal { i + 1 } else { seg.k_len };
                            let prow = &p[i * seg.k_len..(i + 1) * seg.k_len];
                            let grow = &g.row(seg.q_start + i)[h * dvh..(h + 1) * dvh];
                            let mut weighted = 0.0;
                            for j in 0..limit {
                                let vrow = &vv.row(seg.k_start + j)[h * dvh..(h + 1) * dvh];
                                dp[j] = dot(grow, vrow);
                                weighted += dp[j] * prow[j];
                                let gvrow =
                                    &mut gv.row_mut(seg.k_start + j)[h * dvh..(h + 1) * dvh];
                                for (o, x) in gvrow.iter_mut().zip(grow) {
                                    *o += prow[j] * x;
                                }
                            }
                            let qrow = &qv.row(seg.q_start + i)[h * dh..(h + 1) * dh];
                            for j in 0..limit {
                                let ds = prow[j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &kv.row(seg.k_start + j)[h * dh..(h + 1) * dh];
                                let gqrow =
                                    &mut gq.row_mut(seg.q_start + i)[h * dh..(h + 1) * dh];
                                for (o, x) in gqrow.iter_mut().zip(krow) {
                                    *o += ds * x;
                                }
                                let gkrow =
                                    &mut gk.row_mut(seg.k_start + j)[h * dh..(h + 1) * dh];
                                for (o, x) in gkrow.iter_mut().zip(qrow) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::GatherRows { src, idx } => {
                if self.rg(*src) {
                    let sv = self.value(*src);
                    let mut gs = Matrix::zeros(sv.rows(), sv.cols());
                    for (o, &i) in idx.iter().enumerate() {
                        for (a, b) in gs.row_mut(i).iter_mut().zip(g.row(o)) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *src, gs);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        let idx: Vec<usize> = (start..start + rows).collect();
                        self.accumulate(grads, p, g.select_rows(&idx));
                    }
                    start += rows;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = av.clone();
                let mut gb = bv.clone();
                for r in 0..av.rows() {
                    let s = g.get(r, 0);
                    for (o, x) in ga.row_mut(r).iter_mut().zip(bv.row(r)) {
                        *o = s * x;
                    }
                    for (o, x) in gb.row_mut(r).iter_mut().zip(av.row(r)) {
                        *o = s * x;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let proj = dot(g.row(r), yr);
                    for (o, &yv) in gx.row_mut(r).iter_mut().zip(yr) {
                        *o = (*o - proj * yv) / norms[r];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Bce {
                probs,
                labels,
                clamped,
            } => {
                let pv = self.value(*probs);
                let n = labels.len() as f64;
                let up = g.scalar();
                let data = pv
                    .data()
                    .iter()
                    .zip(labels)
                    .zip(clamped)
                    .map(|((&s, &y), &c)| {
                        if c {
                            0.0
                        } else {
                            up * (-y / s + (1.0 - y) / (1.0 - s)) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *probs, Matrix::from_vec(pv.rows(), 1, data).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                softmax,
                divisor,
            } => {
                let up = g.scalar() / divisor;
                let mut gl = Matrix::zeros(softmax.rows(), softmax.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let out = gl.row_mut(r);
                        for (o, s) in out.iter_mut().zip(softmax.row(r)) {
                            *o = up * s;
                        }
                        out[t] -= up;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Matrix::filled(1, 1, w * g.scalar()));
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
