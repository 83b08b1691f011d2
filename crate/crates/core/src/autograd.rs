//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and whatever it needs for the backward pass. Token sequences are rows,
//! features are columns. Everything is single-threaded and deterministic.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

const NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which named parameters the tape tracks gradients for.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Trainable {
    #[default]
    All,
    None,
    Prefix(String),
}

impl Trainable {
    fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Prefix(p) => name.starts_with(p.as_str()),
        }
    }
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    qk_norm: bool,
    logit_scale: f64,
    qn: Mat,
    kn: Mat,
    q_norms: Mat,
    k_norms: Mat,
    probs: Vec<Mat>,
}

enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        normed: Mat,
        inv_std: Vec<f64>,
    },
    Attention(Box<AttentionCache>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    Gather(Var, Vec<usize>),
    SquaredError {
        pred: Var,
        target: Mat,
        row_weights: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Gradients of a scalar with respect to every tracked parameter.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    pub by_name: BTreeMap<String, Mat>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.by_name.get(name)
    }

    /// Accumulates `other` scaled by `weight` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => acc.scaled_add(weight, g),
                None => {
                    self.by_name.insert(name.clone(), g * weight);
                }
            }
        }
    }
}

/// Normalized query/key rows observed by one attention call.
pub struct AttentionProbe<'a> {
    pub queries: &'a Mat,
    pub keys: &'a Mat,
    pub heads: usize,
    pub qk_norm: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    trainable: Trainable,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A tape that tracks gradients for every parameter.
    pub fn new() -> Self {
        Self::with_trainable(Trainable::All)
    }

    /// A tape for forward-only evaluation.
    pub fn inference() -> Self {
        Self::with_trainable(Trainable::None)
    }

    pub fn with_trainable(trainable: Trainable) -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            trainable,
        }
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Records a named parameter. It is tracked only if the tape's
    /// [`Trainable`] filter includes the name.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        if self.trainable.includes(name) {
            self.push(value.clone(), Op::Param(name.to_string()), true)
        } else {
            self.push(value.clone(), Op::Input, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tracked)
    }

    /// `a · bᵀ`; linear weights are stored `(out, in)`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMulT(a, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), tracked)
    }

    /// Adds a `(1, n)` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a row vector");
        let value = self.value(a) + self.value(row);
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), tracked)
    }

    /// Multiplies every row of `a` elementwise by a `(1, n)` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a row vector");
        let value = self.value(a) * self.value(row);
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(value, Op::MulRow(a, row), tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, c), tracked)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let u = GELU_C * (x + GELU_K * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let tracked = self.tracked(a);
        self.push(value, Op::Gelu(a), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let tracked = self.tracked(a);
        self.push(value, Op::Tanh(a), tracked)
    }

    /// Row-wise layer normalization without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let input = self.value(x);
        let cols = input.ncols() as f64;
        let mut normed = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let tracked = self.tracked(x);
        self.push(
            normed.clone(),
            Op::LayerNorm { x, normed, inv_std },
            tracked,
        )
    }

    /// Multi-head softmax attention over rows. With `qk_norm`, each head's
    /// query and key vectors are projected to unit L2 norm and the logits
    /// use `sqrt(head_dim)` as temperature; otherwise the usual
    /// `1/sqrt(head_dim)` scaling applies.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, qk_norm: bool) -> Var {
        let (n_q, width) = self.value(q).dim();
        assert_eq!(self.value(k).dim(), self.value(v).dim());
        assert_eq!(self.value(k).ncols(), width);
        assert!(heads > 0 && width % heads == 0, "width must divide into heads");
        let head_dim = width / heads;
        let logit_scale = if qk_norm {
            (head_dim as f64).sqrt()
        } else {
            1.0 / (head_dim as f64).sqrt()
        };

        let (qn, q_norms) = if qk_norm {
            normalize_heads(self.value(q), heads)
        } else {
            (self.value(q).clone(), Mat::ones((n_q, heads)))
        };
        let (kn, k_norms) = if qk_norm {
            normalize_heads(self.value(k), heads)
        } else {
            (self.value(k).clone(), Mat::ones((self.value(k).nrows(), heads)))
        };

        let values = self.value(v);
        let mut out = Mat::zeros((n_q, width));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let mut scores = qn.slice(cols).dot(&kn.slice(cols).t());
            scores.mapv_inplace(|x| x * logit_scale);
            softmax_rows(&mut scores);
            out.slice_mut(cols).assign(&scores.dot(&values.slice(cols)));
            probs.push(scores);
        }

        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            qk_norm,
            logit_scale,
            qn,
            kn,
            q_norms,
            k_norms,
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)), tracked)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), tracked)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let tracked = self.tracked(a);
        self.push(value, Op::SliceRows(a, start, end), tracked)
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&t.row(r));
        }
        let tracked = self.tracked(table);
        self.push(value, Op::Gather(table, rows.to_vec()), tracked)
    }

    /// `Σ_r w_r Σ_c (pred − target)²` as a `(1, 1)` scalar.
    pub fn weighted_squared_error(&mut self, pred: Var, target: Mat, row_weights: Vec<f64>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "squared error shape mismatch");
        assert_eq!(row_weights.len(), p.nrows());
        let mut total = 0.0;
        for ((prow, trow), w) in p.rows().into_iter().zip(target.rows()).zip(&row_weights) {
            if *w == 0.0 {
                continue;
            }
            let sq: f64 = prow.iter().zip(trow).map(|(a, b)| (a - b) * (a - b)).sum();
            total += w * sq;
        }
        let tracked = self.tracked(pred);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::SquaredError {
                pred,
                target,
                row_weights,
            },
            tracked,
        )
    }

    /// Normalized query/key matrices of every attention call on this tape,
    /// in execution order.
    pub fn attention_probes(&self) -> Vec<AttentionProbe<'_>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention(c) => Some(AttentionProbe {
                    queries: &c.qn,
                    keys: &c.kn,
                    heads: c.heads,
                    qk_norm: c.qk_norm,
                }),
                _ => None,
            })
            .collect()
    }

    /// Back-propagates from a `(1, 1)` scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::ones((1, 1)));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    match out.by_name.get_mut(name) {
                        Some(acc) => *acc += &g,
                        None => {
                            out.by_name.insert(name.clone(), g);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        let da = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, da);
                    }
                    if self.tracked(*b) {
                        let db = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.tracked(*a) {
                        let da = g.dot(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.tracked(*b) {
                        let db = g.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.tracked(*row) {
                        let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, dr);
                    }
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    if self.tracked(*row) {
                        let dr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, dr);
                    }
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*row));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::Gelu(a) => {
                    let mut da = g;
                    Zip::from(&mut da).and(self.value(*a)).for_each(|d, &x| {
                        let u = GELU_C * (x + GELU_K * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *d *= 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let mut da = g;
                    Zip::from(&mut da)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, normed, inv_std } => {
                    let cols = normed.ncols() as f64;
                    let mut dx = g;
                    for ((mut drow, nrow), inv) in
                        dx.rows_mut().into_iter().zip(normed.rows()).zip(inv_std)
                    {
                        let mean_g = drow.sum() / cols;
                        let mean_gn = drow.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / cols;
                        Zip::from(&mut drow)
                            .and(&nrow)
                            .for_each(|d, &n| *d = inv * (*d - mean_g - n * mean_gn));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention(c) => self.attention_backward(c, &g, &mut grads),
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).nrows();
                        if self.tracked(*p) {
                            let slice = g.slice(s![offset..offset + rows, ..]).to_owned();
                            accumulate(&mut grads, *p, slice);
                        }
                        offset += rows;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let mut da = Mat::zeros(self.value(*a).raw_dim());
                    da.slice_mut(s![*start..*end, ..]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::Gather(table, rows) => {
                    let mut dt = Mat::zeros(self.value(*table).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dt.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SquaredError {
                    pred,
                    target,
                    row_weights,
                } => {
                    let upstream = g[[0, 0]];
                    let mut dp = self.value(*pred) - target;
                    for (mut row, w) in dp.rows_mut().into_iter().zip(row_weights) {
                        let f = 2.0 * w * upstream;
                        row.mapv_inplace(|v| v * f);
                    }
                    accumulate(&mut grads, *pred, dp);
                }
            }
        }
        out
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Mat, grads: &mut [Option<Mat>]) {
        let width = g.ncols();
        let head_dim = width / c.heads;
        let values = self.value(c.v);
        let mut dqn = Mat::zeros(c.qn.raw_dim());
        let mut dkn = Mat::zeros(c.kn.raw_dim());
        let mut dv = Mat::zeros(values.raw_dim());
        for h in 0..c.heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let p = &c.probs[h];
            let gh = g.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&gh));
            let dp = gh.dot(&values.slice(cols).t());
            let mut ds = dp;
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                Zip::from(&mut drow)
                    .and(&prow)
                    .for_each(|d, &pv| *d = pv * (*d - dot) * c.logit_scale);
            }
            dqn.slice_mut(cols).assign(&ds.dot(&c.kn.slice(cols)));
            dkn.slice_mut(cols).assign(&ds.t().dot(&c.qn.slice(cols)));
        }
        if c.qk_norm {
            denormalize_grad(&mut dqn, &c.qn, &c.q_norms, c.heads);
            denormalize_grad(&mut dkn, &c.kn, &c.k_norms, c.heads);
        }
        if self.tracked(c.q) {
            accumulate(grads, c.q, dqn);
        }
        if self.tracked(c.k) {
            accumulate(grads, c.k, dkn);
        }
        if self.tracked(c.v) {
            accumulate(grads, c.v, dv);
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, delta: Mat) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn normalize_heads(x: &Mat, heads: usize) -> (Mat, Mat) {
    let head_dim = x.ncols() / heads;
    let mut out = x.clone();
    let mut norms = Mat::zeros((x.nrows(), heads));
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        for h in 0..heads {
            let mut seg = row.slice_mut(s![h * head_dim..(h + 1) * head_dim]);
            let n = (seg.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            seg.mapv_inplace(|v| v / n);
            norms[[r, h]] = n;
        }
    }
    (out, norms)
}

// d/dx of x/|x| applied to an upstream gradient, per head segment.
fn denormalize_grad(grad: &mut Mat, normed: &Mat, norms: &Mat, heads: usize) {
    let head_dim = grad.ncols() / heads;
    for (r, (mut grow, nrow)) in grad.rows_mut().into_iter().zip(normed.rows()).enumerate() {
        for h in 0..heads {
            let range = h * head_dim..(h + 1) * head_dim;
            let nseg = nrow.slice(s![range.clone()]);
            let mut gseg = grow.slice_mut(s![range]);
            let dot: f64 = gseg.iter().zip(nseg).map(|(a, b)| a * b).sum();
            let inv = 1.0 / norms[[r, h]];
            Zip::from(&mut gseg)
                .and(&nseg)
                .for_each(|gv, &nv| *gv = (*gv - nv * dot) * inv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    // Central-difference oracle: builds the graph from the named params via
    // `f`, reduces to Σ (out ⊙ probe)², and compares every coordinate.
    fn check<F>(params: &[(&str, Mat)], f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |ps: &[(&str, Mat)], probe: Option<&Mat>| -> (f64, Gradients, Mat) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|(n, m)| g.param(n, m)).collect();
            let out = f(&mut g, &vars);
            let shape = g.value(out).raw_dim();
            let probe = probe.cloned().unwrap_or_else(|| Mat::ones(shape));
            let pv = g.input(probe.clone());
            let prod = g.mul(out, pv);
            let rows = g.value(prod).nrows();
            let zero = Mat::zeros(g.value(prod).raw_dim());
            let sq = g.weighted_squared_error(prod, zero, vec![1.0; rows]);
            let grads = g.backward(sq);
            (g.value(sq)[[0, 0]], grads, probe)
        };
        let shape_probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|(n, m)| g.param(n, m)).collect();
            let out = f(&mut g, &vars);
            random(&mut rng, g.value(out).nrows(), g.value(out).ncols())
        };
        let (_, grads, probe) = eval(params, Some(&shape_probe));
        let h = 1e-6;
        for (pi, (name, m)) in params.iter().enumerate() {
            let analytic = grads.get(name).expect("missing grad");
            for idx in 0..m.len() {
                let (r, c) = (idx / m.ncols(), idx % m.ncols());
                let mut plus = params.to_vec();
                plus[pi].1[[r, c]] += h;
                let mut minus = params.to_vec();
                minus[pi].1[[r, c]] -= h;
                let fd = (eval(&plus, Some(&probe)).0 - eval(&minus, Some(&probe)).0) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-4));
                assert!(err < 1e-5, "{name}[{r},{c}]: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn linear_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        let w = random(&mut rng, 5, 4);
        let b = random(&mut rng, 1, 5);
        check(&[("x", x), ("w", w), ("b", b)], |g, v| {
            let y = g.matmul_t(v[0], v[1]);
            let y = g.add_row(y, v[2]);
            let y = g.gelu(y);
            g.tanh(y)
        });
    }

    #[test]
    fn elementwise_and_row_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4);
        let r = random(&mut rng, 1, 4);
        let m = random(&mut rng, 4, 2);
        check(&[("a", a), ("b", b), ("r", r), ("m", m)], |g, v| {
            let x = g.mul(v[0], v[1]);
            let x = g.sub(x, v[1]);
            let x = g.mul_row(x, v[2]);
            let x = g.scale(x, 0.7);
            let y = g.add(x, v[0]);
            g.matmul(y, v[3])
        });
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 6);
        check(&[("x", x)], |g, v| g.layer_norm(v[0], 1e-6));
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 2, 3);
        let b = random(&mut rng, 3, 3);
        let table = random(&mut rng, 4, 3);
        check(&[("a", a), ("b", b), ("t", table)], |g, v| {
            let e = g.gather(v[2], &[3, 0, 3]);
            let c = g.concat_rows(&[v[0], v[1], e]);
            g.slice_rows(c, 1, 7)
        });
    }

    #[test]
    fn attention_gradients_with_and_without_qk_norm() {
        for qk_norm in [true, false] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let q = random(&mut rng, 5, 8);
            let k = random(&mut rng, 5, 8);
            let v = random(&mut rng, 5, 8);
            check(&[("q", q), ("k", k), ("v", v)], move |g, p| {
                g.attention(p[0], p[1], p[2], 2, qk_norm)
            });
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::inference();
        let q = g.input(random(&mut rng, 4, 4));
        let k = g.input(random(&mut rng, 4, 4));
        let v = g.input(Mat::ones((4, 4)));
        let out = g.attention(q, k, v, 2, true);
        for x in g.value(out).iter() {
            assert!((x - 1.0).abs() < 1e-12);
        }
        let probes = g.attention_probes();
        assert_eq!(probes.len(), 1);
        for row in probes[0].queries.rows() {
            for h in 0..2 {
                let n: f64 = row.slice(s![h * 2..h * 2 + 2]).iter().map(|v| v * v).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn untracked_params_get_no_gradient() {
        let mut g = Graph::with_trainable(Trainable::Prefix("lora.".into()));
        let w = g.param("base.w", &Mat::ones((2, 2)));
        let a = g.param("lora.a", &Mat::ones((2, 2)));
        let y = g.matmul(w, a);
        let loss = g.weighted_squared_error(y, Mat::zeros((2, 2)), vec![1.0, 1.0]);
        let grads = g.backward(loss);
        assert!(grads.get("base.w").is_none());
        assert!(grads.get("lora.a").is_some());
    }

    #[test]
    fn gradients_accumulate_with_weights() {
        let mut a = Gradients::default();
        let mut b = Gradients::default();
        b.by_name.insert("w".into(), Mat::ones((1, 2)));
        a.accumulate(&b, 0.5);
        a.accumulate(&b, 0.25);
        assert_eq!(a.get("w").unwrap()[[0, 1]], 0.75);
    }
}
