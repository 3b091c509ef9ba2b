//! Parameterized layers recorded on a [`Graph`].
//!
//! Layers own only parameter *names*; values live in a [`ParamSet`] so that
//! gradients, optimizer state and checkpoints are all keyed the same way.

use rand::Rng;

use crate::autograd::{Graph, ParamSet, Var};
use crate::tensor::Mat;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Mat::from_vec(rows, cols, data).expect("sized")
}

/// Adds uniform noise in `[-scale, scale]` to every parameter.
pub fn perturb_all(params: &mut ParamSet, scale: f64, rng: &mut impl Rng) {
    for (_, m) in params.iter_mut() {
        for v in m.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        ps.insert(&self.w, xavier(self.in_dim, self.out_dim, rng));
        ps.insert(&self.b, Mat::zeros(1, self.out_dim));
    }

    pub fn init_zero(&self, ps: &mut ParamSet) {
        ps.insert(&self.w, Mat::zeros(self.in_dim, self.out_dim));
        ps.insert(&self.b, Mat::zeros(1, self.out_dim));
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> &str {
        &self.b
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
    dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            dim,
        }
    }

    pub fn init(&self, ps: &mut ParamSet) {
        ps.insert(&self.gamma, Mat::filled(1, self.dim, 1.0));
        ps.insert(&self.beta, Mat::zeros(1, self.dim));
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, Some((gamma, beta)), LAYER_NORM_EPS)
    }
}

/// Two-layer ReLU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            hidden: Linear::new(&format!("{prefix}.fc1"), dim, hidden),
            output: Linear::new(&format!("{prefix}.fc2"), hidden, dim),
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.hidden.init(ps, rng);
        self.output.init(ps, rng);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

/// Standard scaled dot-product multi-head attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            query: Linear::new(&format!("{prefix}.q"), dim, dim),
            key: Linear::new(&format!("{prefix}.k"), dim, dim),
            value: Linear::new(&format!("{prefix}.v"), dim, dim),
            output: Linear::new(&format!("{prefix}.o"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.query.init(ps, rng);
        self.key.init(ps, rng);
        self.value.init(ps, rng);
        self.output.init(ps, rng);
    }

    /// `mask` is row-major `queries × keys`; `false` hides a key. Returns the
    /// output and the per-head attention probability nodes.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        mask: Option<&[bool]>,
    ) -> (Var, Vec<Var>) {
        let dh = self.dim / self.heads;
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, keys);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax(s, mask.map(<[bool]>::to_vec));
            probs.push(p);
            outs.push(g.matmul(p, vh));
        }
        let cat = g.concat_cols(&outs);
        (self.output.forward(g, cat), probs)
    }
}

/// One-dimensional deformable attention: every query samples `points`
/// fractional locations per head around its reference point and mixes the
/// interpolated values with softmax weights.
#[derive(Clone, Debug)]
pub struct DeformableAttention {
    pub value: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub output: Linear,
    pub heads: usize,
    pub points: usize,
    dim: usize,
}

/// Intermediate nodes of a deformable attention call.
pub struct DeformableTrace {
    pub output: Var,
    /// `Q × K` attention weights, one node per head.
    pub weights: Vec<Var>,
    /// `Q × K` normalized sampling locations (before clamping), per head.
    pub locations: Vec<Var>,
}

impl DeformableAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize, points: usize) -> Self {
        DeformableAttention {
            value: Linear::new(&format!("{prefix}.value"), dim, dim),
            offsets: Linear::new(&format!("{prefix}.offsets"), dim, heads * points),
            weights: Linear::new(&format!("{prefix}.weights"), dim, heads * points),
            output: Linear::new(&format!("{prefix}.out"), dim, dim),
            heads,
            points,
            dim,
        }
    }

    /// Zero offsets and uniform weights at initialization.
    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.value.init(ps, rng);
        self.offsets.init_zero(ps);
        self.weights.init_zero(ps);
        self.output.init(ps, rng);
    }

    pub fn forward(&self, g: &mut Graph, query: Var, reference: &[f64], values: Var) -> Var {
        self.trace(g, query, reference, values).output
    }

    pub fn trace(&self, g: &mut Graph, query: Var, reference: &[f64], values: Var) -> DeformableTrace {
        let q_rows = g.value(query).rows();
        assert_eq!(reference.len(), q_rows, "one reference point per query");
        let dh = self.dim / self.heads;
        let k = self.points;
        let v = self.value.forward(g, values);
        let off = self.offsets.forward(g, query);
        let logits = self.weights.forward(g, query);
        let mut ref_mat = Mat::zeros(q_rows, k);
        for (q, &r) in reference.iter().enumerate() {
            ref_mat.row_mut(q).fill(r);
        }
        let refs = g.input(ref_mat);

        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        let mut locations = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off_h = g.slice_cols(off, h * k, k);
            let loc = g.add(refs, off_h);
            let lg = g.slice_cols(logits, h * k, k);
            let w = g.softmax(lg, None);
            let vh = g.slice_cols(v, h * dh, dh);
            outs.push(g.deform_sample(vh, loc, w));
            weights.push(w);
            locations.push(loc);
        }
        let cat = g.concat_cols(&outs);
        DeformableTrace {
            output: self.output.forward(g, cat),
            weights,
            locations,
        }
    }
}

/// Single-layer LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Linear,
    recurrent: String,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(prefix: &str, input_dim: usize, hidden: usize) -> Self {
        LstmCell {
            input: Linear::new(&format!("{prefix}.x"), input_dim, 4 * hidden),
            recurrent: format!("{prefix}.h.w"),
            hidden,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.input.init(ps, rng);
        ps.insert(&self.recurrent, xavier(self.hidden, 4 * self.hidden, rng));
        let bias = ps.get_mut(self.input.bias_name()).expect("just inserted");
        for c in self.hidden..2 * self.hidden {
            bias.set(0, c, 1.0);
        }
    }

    /// Returns `(h', c')`.
    pub fn forward(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hd = self.hidden;
        let gx = self.input.forward(g, x);
        let wh = g.param(&self.recurrent);
        let gh = g.matmul(h, wh);
        let gates = g.add(gx, gh);
        let i = g.slice_cols(gates, 0, hd);
        let f = g.slice_cols(gates, hd, hd);
        let cand = g.slice_cols(gates, 2 * hd, hd);
        let o = g.slice_cols(gates, 3 * hd, hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_next = g.add(keep, write);
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed);
        (h_next, c_next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[test]
    fn deformable_zero_offset_single_point_reads_reference_row() {
        let attn = DeformableAttention::new("a", 2, 1, 1);
        let mut ps = ParamSet::new();
        attn.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0));
        ps.insert(attn.value.weight_name(), identity(2));
        ps.insert(attn.output.weight_name(), identity(2));
        let values = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut g = Graph::with_params(&ps);
        let q = g.input(Mat::from_rows(&[vec![0.7, -0.3]]).unwrap());
        let v = g.input(values);
        let out = attn.forward(&mut g, q, &[0.5], v);
        assert_eq!(g.value(out).row(0), &[3.0, 4.0]);
    }

    #[test]
    fn fractional_location_interpolates_neighbours() {
        let mut g = Graph::new();
        let values = Mat::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![10.0], vec![4.0]]).unwrap();
        let v = g.input(values);
        // 2.5 / (L − 1) with L = 5
        let loc = g.input(Mat::scalar(2.5 / 4.0));
        let w = g.input(Mat::scalar(1.0));
        let out = g.deform_sample(v, loc, w);
        assert!((g.value(out).item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn lstm_shapes() {
        let cell = LstmCell::new("lstm", 3, 4);
        let mut ps = ParamSet::new();
        cell.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::with_params(&ps);
        let x = g.input(Mat::filled(2, 3, 0.5));
        let h = g.input(Mat::zeros(2, 4));
        let c = g.input(Mat::zeros(2, 4));
        let (h2, c2) = cell.forward(&mut g, x, h, c);
        assert_eq!(g.value(h2).shape(), (2, 4));
        assert_eq!(g.value(c2).shape(), (2, 4));
        assert!(g.value(h2).data().iter().all(|v| v.abs() < 1.0));
    }
}
