//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Named
//! parameters are borrowed from a [`ParamSet`] and bound lazily, once per
//! graph, so a weight reused across decoding steps is a single leaf whose
//! gradient accumulates over all uses.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::tensor::Mat;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Named model parameters, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    /// Zero-valued tensors with the same names and shapes.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (k, v) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(mine) => mine.add_assign(v),
                None => {
                    self.tensors.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for v in self.tensors.values_mut() {
            v.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.values().map(Mat::sq_norm).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Mat::is_finite)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    // Masked entries have zero output, hence zero gradient.
    Softmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SelectRows {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
    DeformSample {
        values: Var,
        loc: Var,
        weights: Var,
    },
    NllSum {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        probs: Mat,
    },
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
}

/// Recorded computation.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamSet>,
    bound: HashMap<&'p str, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Fractional sampling position for a normalized location over `len` rows.
/// Returns (lower row, upper row, fraction, inside-open-interval).
#[inline]
pub(crate) fn sample_position(loc: f64, len: usize) -> (usize, usize, f64, bool) {
    if len <= 1 {
        return (0, 0, 0.0, false);
    }
    let last = (len - 1) as f64;
    let raw = loc * last;
    let interior = raw > 0.0 && raw < last;
    let s = raw.clamp(0.0, last);
    let lo = (s.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    (lo, hi, s - lo as f64, interior)
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            bound: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamSet) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Some(params),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// A leaf holding a caller-owned value.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to the named parameter. Panics if the name is unknown.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let params = self.params.expect("graph has no parameter set");
        let (key, value) = params
            .tensors
            .get_key_value(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(key.as_str(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), r.cols(), "add_row width");
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Mat::from_vec(x.rows(), x.cols(), data).expect("shape checked");
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise layer normalization, optionally followed by `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some((gamma, beta)) = affine {
            let (g, b) = (self.value(gamma), self.value(beta));
            for r in 0..rows {
                for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                    *o = *o * gv + bv;
                }
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                affine,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax. Masked-out entries (`false`) get probability 0; a
    /// fully masked row is all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        if let Some(m) = &mask {
            assert_eq!(m.len(), rows * cols, "softmax mask shape");
        }
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let keep = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
            let row = input.row(r);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut z = 0.0;
            for c in 0..cols {
                if keep(c) {
                    o[c] = (row[c] - max).exp();
                    z += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Mat::concat_cols(&mats).expect("concat_cols row counts");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Mat::concat_rows(&mats).expect("concat_rows column counts");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows of `a` at `indices` (repeats allowed); embedding lookup.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Mat::zeros(indices.len(), src.cols());
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(idx));
        }
        self.push(out, Op::GatherRows(a, indices.to_vec()))
    }

    /// Row `i` from `a` where `take_a[i]`, otherwise from `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: Vec<bool>) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "select_rows shape");
        assert_eq!(take_a.len(), x.rows(), "select_rows selector length");
        let mut out = y.clone();
        for (i, &t) in take_a.iter().enumerate() {
            if t {
                out.row_mut(i).copy_from_slice(x.row(i));
            }
        }
        self.push(out, Op::SelectRows { a, b, take_a })
    }

    /// Weighted sum of linearly interpolated rows of `values` (L × c) at
    /// normalized locations `loc` (Q × K), using `weights` (Q × K).
    /// Locations are scaled by `L − 1` and clamped to the valid range.
    pub fn deform_sample(&mut self, values: Var, loc: Var, weights: Var) -> Var {
        let (v, l, w) = (self.value(values), self.value(loc), self.value(weights));
        assert_eq!(l.shape(), w.shape(), "deform_sample loc/weights shape");
        let len = v.rows();
        let c = v.cols();
        let mut out = Mat::zeros(l.rows(), c);
        for q in 0..l.rows() {
            let o = out.row_mut(q);
            for k in 0..l.cols() {
                let (lo, hi, f, _) = sample_position(l.get(q, k), len);
                let wk = w.get(q, k);
                let (r0, r1) = (v.row(lo), v.row(hi));
                for j in 0..c {
                    o[j] += wk * ((1.0 - f) * r0[j] + f * r1[j]);
                }
            }
        }
        self.push(
            out,
            Op::DeformSample {
                values,
                loc,
                weights,
            },
        )
    }

    /// Sum over rows with a target of `−log softmax(logits_row)[target]`.
    pub fn nll_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let ones = vec![1.0; targets.len()];
        self.weighted_nll_sum(logits, targets, &ones)
    }

    /// As [`Graph::nll_sum`] with row `r` scaled by `weights[r]`.
    pub fn weighted_nll_sum(&mut self, logits: Var, targets: &[Option<usize>], weights: &[f64]) -> Var {
        let lg = self.value(logits);
        assert_eq!(lg.rows(), targets.len(), "nll_sum target count");
        assert_eq!(lg.rows(), weights.len(), "nll_sum weight count");
        let mut probs = Mat::zeros(lg.rows(), lg.cols());
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = lg.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            if let Some(t) = *t {
                total += weights[r] * (log_z - row[t]);
            }
        }
        self.push(
            Mat::scalar(total),
            Op::NllSum {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &*node.value;
            let acc = |v: Var, d: Mat, grads: &mut Vec<Option<Mat>>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*a, g, &mut grads);
                    acc(*row, dr, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, y, |p, q| p * q);
                    let db = zip_map(&g, x, |p, q| p * q);
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(*a, g.map(|v| v * s), &mut grads);
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(*a, d, &mut grads);
                }
                Op::Tanh(a) => {
                    acc(*a, zip_map(&g, out, |gv, y| gv * (1.0 - y * y)), &mut grads);
                }
                Op::Sigmoid(a) => {
                    acc(*a, zip_map(&g, out, |gv, y| gv * y * (1.0 - y)), &mut grads);
                }
                Op::LayerNorm {
                    x,
                    affine,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let dxhat = match affine {
                        Some((gamma, beta)) => {
                            let gm = self.value(*gamma);
                            let mut dgamma = Mat::zeros(1, cols);
                            let mut dbeta = Mat::zeros(1, cols);
                            let mut dxhat = Mat::zeros(rows, cols);
                            for r in 0..rows {
                                for c in 0..cols {
                                    let gv = g.get(r, c);
                                    dgamma.data_mut()[c] += gv * xhat.get(r, c);
                                    dbeta.data_mut()[c] += gv;
                                    dxhat.set(r, c, gv * gm.data()[c]);
                                }
                            }
                            acc(*gamma, dgamma, &mut grads);
                            acc(*beta, dbeta, &mut grads);
                            dxhat
                        }
                        None => g,
                    };
                    let mut dx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_d = dh.iter().sum::<f64>() / n;
                        let mean_dx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dh[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::Softmax(x) => {
                    let (rows, cols) = out.shape();
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = y[c] * (gr[c] - dot);
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        acc(*p, g.slice_cols(offset, w), &mut grads);
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut d = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        acc(*p, g.slice_rows(offset, h), &mut grads);
                        offset += h;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let src = self.value(*a);
                    let mut d = Mat::zeros(src.rows(), src.cols());
                    for (i, &idx) in indices.iter().enumerate() {
                        for (o, v) in d.row_mut(idx).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SelectRows { a, b, take_a } => {
                    let mut da = Mat::zeros(g.rows(), g.cols());
                    let mut db = Mat::zeros(g.rows(), g.cols());
                    for (i, &t) in take_a.iter().enumerate() {
                        let target = if t { &mut da } else { &mut db };
                        target.row_mut(i).copy_from_slice(g.row(i));
                    }
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::DeformSample {
                    values,
                    loc,
                    weights,
                } => {
                    let (v, l, w) = (self.value(*values), self.value(*loc), self.value(*weights));
                    let len = v.rows();
                    let scale = len.saturating_sub(1) as f64;
                    let mut dv = Mat::zeros(v.rows(), v.cols());
                    let mut dl = Mat::zeros(l.rows(), l.cols());
                    let mut dw = Mat::zeros(w.rows(), w.cols());
                    for q in 0..l.rows() {
                        let gq = g.row(q);
                        for k in 0..l.cols() {
                            let (lo, hi, f, interior) = sample_position(l.get(q, k), len);
                            let wk = w.get(q, k);
                            let (r0, r1) = (v.row(lo), v.row(hi));
                            let mut sample_dot = 0.0;
                            let mut slope_dot = 0.0;
                            for j in 0..gq.len() {
                                sample_dot += gq[j] * ((1.0 - f) * r0[j] + f * r1[j]);
                                slope_dot += gq[j] * (r1[j] - r0[j]);
                            }
                            dw.set(q, k, sample_dot);
                            if interior {
                                dl.set(q, k, wk * slope_dot * scale);
                            }
                            for (j, gv) in gq.iter().enumerate() {
                                dv.row_mut(lo)[j] += wk * (1.0 - f) * gv;
                                dv.row_mut(hi)[j] += wk * f * gv;
                            }
                        }
                    }
                    acc(*values, dv, &mut grads);
                    acc(*loc, dl, &mut grads);
                    acc(*weights, dw, &mut grads);
                }
                Op::NllSum {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let mut d = Mat::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        let scale = g.item() * weights[r];
                        if let Some(t) = *t {
                            for (o, p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *o = scale * p;
                            }
                            d.row_mut(r)[t] -= scale;
                        }
                    }
                    acc(*logits, d, &mut grads);
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    acc(*a, Mat::filled(src.rows(), src.cols(), g.item()), &mut grads);
                }
            }
        }

        let mut params = BTreeMap::new();
        for (name, v) in &self.bound {
            if let Some(g) = &grads[v.0] {
                params.insert((*name).to_string(), g.clone());
            }
        }
        Gradients { nodes: grads, params }
    }
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Mat::from_vec(a.rows(), a.cols(), data).expect("same shape")
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

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: BTreeMap<String, Mat>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    /// Parameter gradients keyed by name; parameters that did not influence
    /// the output are absent.
    pub fn params(&self) -> &BTreeMap<String, Mat> {
        &self.params
    }

    /// Gradients as a dense set matching `like`, with zeros for unused
    /// parameters.
    pub fn into_param_set(self, like: &ParamSet) -> ParamSet {
        let mut out = like.zeros_like();
        for (name, g) in self.params {
            if let Some(slot) = out.get_mut(&name) {
                *slot = g;
            }
        }
        out
    }
}
