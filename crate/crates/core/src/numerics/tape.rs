//! Reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value. Nodes only
//! reference earlier nodes, so walking the node list backwards is a
//! reverse topological order and `backward` visits each node once.

use std::collections::BTreeMap;

use super::matrix::{pack_upper, sigmoid, softplus, unpack_upper, upper_len, Matrix};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    MeanRows(Var),
    RepeatRows(Var),
    Flatten(Var),
    PackUpper(Var),
    UnpackUpper(Var),
    PerRowMatMul(Var, Var),
    GaussianScore { input: Var, floor: f64 },
    GaussianKlSym { a: Var, b: Var, floor: f64 },
    SoftHistogram { input: Var, temperature: f64 },
    HistKlSym { p: Var, q: Var, eps: f64 },
    BceWithLogits { logits: Var, target: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Record of operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    named: BTreeMap<String, Matrix>,
    per_node: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of a registered parameter.
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.named.get(name)
    }

    /// Gradient with respect to any node; zero when the node does not reach the loss.
    pub fn of(&self, v: Var) -> Matrix {
        match &self.per_node[v.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(self.shapes[v.0].0, self.shapes[v.0].1),
        }
    }

    pub fn named(&self) -> &BTreeMap<String, Matrix> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Matrix> {
        self.named
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{op:?} produced a non-finite value")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Matrix) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let v = self.push(value, Op::Leaf)?;
        self.params.push((name.to_owned(), v));
        Ok(v)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(&self.value(b).transpose())?;
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b))
    }

    /// Adds the `1 × c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(dim_err!("add_row {:?} + {:?}", m.shape(), r.shape()));
        }
        let mut value = m.clone();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                value.set(i, j, m.get(i, j) + r.get(0, j));
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(Error::Contract("mean of an empty matrix".into()));
        }
        let value = Matrix::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).data().iter().map(|v| v * v).sum());
        self.push(value, Op::SumSquares(a))
    }

    /// Column means, `n × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(Error::Contract("mean_rows of an empty matrix".into()));
        }
        let mut out = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for (o, v) in out.iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
        let n = m.rows() as f64;
        let value = Matrix::row_vector(out.into_iter().map(|v| v / n).collect());
        self.push(value, Op::MeanRows(a))
    }

    /// Stacks `n` copies of a `1 × c` row.
    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let r = self.value(row);
        if r.rows() != 1 {
            return Err(dim_err!("repeat_rows needs a row vector, got {:?}", r.shape()));
        }
        let value = Matrix::from_vec(n, r.cols(), r.data().repeat(n))?;
        self.push(value, Op::RepeatRows(row))
    }

    /// Reshapes to a `1 × (rows·cols)` row, row-major.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::row_vector(self.value(a).data().to_vec());
        self.push(value, Op::Flatten(a))
    }

    pub fn pack_upper(&mut self, a: Var) -> Result<Var> {
        let value = pack_upper(self.value(a))?;
        self.push(value, Op::PackUpper(a))
    }

    pub fn unpack_upper(&mut self, r: Var, n: usize) -> Result<Var> {
        let value = unpack_upper(self.value(r), n)?;
        self.push(value, Op::UnpackUpper(r))
    }

    /// Row `i` of the output is `m[i] · W_i`, where `w` stacks one `d_in × d_out`
    /// block per row of `m` (`(n·d_in) × d_out`).
    pub fn per_row_matmul(&mut self, m: Var, w: Var) -> Result<Var> {
        let (mv, wv) = (self.value(m), self.value(w));
        let (n, d_in) = mv.shape();
        if wv.rows() != n * d_in {
            return Err(dim_err!("per_row_matmul {:?} with stack {:?}", mv.shape(), wv.shape()));
        }
        let d_out = wv.cols();
        let mut value = Matrix::zeros(n, d_out);
        for i in 0..n {
            for k in 0..d_in {
                let a = mv.get(i, k);
                let base = (i * d_in + k) * d_out;
                for j in 0..d_out {
                    value.data_mut()[i * d_out + j] += a * wv.data()[base + j];
                }
            }
        }
        self.push(value, Op::PerRowMatMul(m, w))
    }

    /// Score of a moment-fitted Gaussian over all entries of `a`:
    /// `-(e - mean) / max(var, floor)`, same shape as `a`.
    pub fn gaussian_score(&mut self, a: Var, floor: f64) -> Result<Var> {
        let m = self.value(a);
        if m.len() < 2 {
            return Err(Error::Contract("gaussian score needs at least 2 values".into()));
        }
        let (mu, var) = moments(m.data());
        let vf = var.max(floor);
        let value = m.map(|e| -(e - mu) / vf);
        self.push(value, Op::GaussianScore { input: a, floor })
    }

    /// `KL(N_a‖N_b) + KL(N_b‖N_a)` for moment fits of the entries of `a` and `b`,
    /// with variances floored at `floor`.
    pub fn gaussian_kl_sym(&mut self, a: Var, b: Var, floor: f64) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.is_empty() || mb.is_empty() {
            return Err(Error::Contract("gaussian KL of an empty sample".into()));
        }
        let (mu_a, va) = moments(ma.data());
        let (mu_b, vb) = moments(mb.data());
        let value = Matrix::scalar(gaussian_kl_sym_value(mu_a, va.max(floor), mu_b, vb.max(floor)));
        self.push(value, Op::GaussianKlSym { a, b, floor })
    }

    /// Soft histogram on `[0, 1]` with `bins` equal-width bins. Each sample spreads
    /// unit mass by a softmax over `-|x - center| / temperature`; output is the
    /// `1 × bins` average over samples.
    pub fn soft_histogram(&mut self, a: Var, bins: usize, temperature: f64) -> Result<Var> {
        if bins < 2 || !(temperature > 0.0) {
            return Err(Error::Parameter(format!("soft histogram bins={bins} temperature={temperature}")));
        }
        let m = self.value(a);
        if m.is_empty() {
            return Err(Error::Contract("histogram of an empty sample".into()));
        }
        let mut hist = vec![0.0; bins];
        for &x in m.data() {
            for (h, w) in hist.iter_mut().zip(soft_assign(x, bins, temperature)) {
                *h += w;
            }
        }
        let n = m.len() as f64;
        let value = Matrix::row_vector(hist.into_iter().map(|h| h / n).collect());
        self.push(value, Op::SoftHistogram { input: a, temperature })
    }

    /// Symmetric KL between two probability vectors after eps-smoothing and renormalization.
    pub fn hist_kl_sym(&mut self, p: Var, q: Var, eps: f64) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() || pv.rows() != 1 {
            return Err(dim_err!("hist_kl_sym {:?} vs {:?}", pv.shape(), qv.shape()));
        }
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("eps must be > 0, got {eps}")));
        }
        let value = Matrix::scalar(smoothed_kl_sym(pv.data(), qv.data(), eps));
        self.push(value, Op::HistKlSym { p, q, eps })
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`, with
    /// probabilities clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Matrix) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::Contract(format!("bce logits {:?} vs target {:?}", z.shape(), target.shape())));
        }
        let value = Matrix::scalar(bce_value(z.data(), target.data()));
        self.push(value, Op::BceWithLogits { logits, target: target.clone() })
    }

    /// Gradients of the scalar `loss` with respect to every node and registered parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!("loss must be 1x1, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let named = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads[v.0].clone().unwrap_or_else(|| Matrix::zeros(shapes[v.0].0, shapes[v.0].1));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { named, per_node: grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul(&val(*b).transpose())?)?;
                accumulate(grads, *b, val(*a).transpose().matmul(g)?)?;
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, g.matmul(val(*b))?)?;
                accumulate(grads, *b, g.transpose().matmul(val(*a))?)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone())?;
                let mut col = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (c, v) in col.iter_mut().zip(g.row(i)) {
                        *c += v;
                    }
                }
                accumulate(grads, *row, Matrix::row_vector(col))?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y)?)?;
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y)?)?;
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s))?,
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))?)?,
            Op::Relu(a) => {
                accumulate(grads, *a, g.zip_map(val(*a), |x, z| if z > 0.0 { x } else { 0.0 })?)?
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.item()))?;
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.item() / (r * c) as f64))?;
            }
            Op::SumSquares(a) => accumulate(grads, *a, val(*a).scale(2.0 * g.item()))?,
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let data = g.data().iter().map(|v| v / r as f64).collect::<Vec<_>>().repeat(r);
                accumulate(grads, *a, Matrix::from_vec(r, c, data)?)?;
            }
            Op::RepeatRows(row) => {
                let mut col = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (c, v) in col.iter_mut().zip(g.row(i)) {
                        *c += v;
                    }
                }
                accumulate(grads, *row, Matrix::row_vector(col))?;
            }
            Op::Flatten(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::from_vec(r, c, g.data().to_vec())?)?;
            }
            Op::PackUpper(a) => {
                let n = val(*a).rows();
                let mut out = Matrix::zeros(n, n);
                let mut k = 0;
                for i in 0..n {
                    for j in i + 1..n {
                        out.set(i, j, g.data()[k]);
                        k += 1;
                    }
                }
                accumulate(grads, *a, out)?;
            }
            Op::UnpackUpper(r) => {
                let n = g.rows();
                let mut out = Vec::with_capacity(upper_len(n));
                for i in 0..n {
                    for j in i + 1..n {
                        out.push(g.get(i, j) + g.get(j, i));
                    }
                }
                accumulate(grads, *r, Matrix::row_vector(out))?;
            }
            Op::PerRowMatMul(m, w) => {
                let (mv, wv) = (val(*m), val(*w));
                let (n, d_in) = mv.shape();
                let d_out = wv.cols();
                let mut gm = Matrix::zeros(n, d_in);
                let mut gw = Matrix::zeros(wv.rows(), d_out);
                for i in 0..n {
                    let gi = g.row(i);
                    for k in 0..d_in {
                        let base = (i * d_in + k) * d_out;
                        let w_row = &wv.data()[base..base + d_out];
                        gm.data_mut()[i * d_in + k] = w_row.iter().zip(gi).map(|(a, b)| a * b).sum();
                        let a = mv.get(i, k);
                        for (o, &gj) in gw.data_mut()[base..base + d_out].iter_mut().zip(gi) {
                            *o += a * gj;
                        }
                    }
                }
                accumulate(grads, *m, gm)?;
                accumulate(grads, *w, gw)?;
            }
            Op::GaussianScore { input, floor } => {
                let e = val(*input);
                let n = e.len() as f64;
                let (mu, var) = moments(e.data());
                let vf = var.max(*floor);
                let g_mean = g.mean();
                let mut out = e.map(|_| 0.0);
                let cross: f64 = g.data().iter().zip(e.data()).map(|(gi, ei)| gi * (ei - mu)).sum();
                let var_active = var > *floor;
                for (o, (&gj, &ej)) in out.data_mut().iter_mut().zip(g.data().iter().zip(e.data())) {
                    *o = -(gj - g_mean) / vf;
                    if var_active {
                        *o += cross / (vf * vf) * 2.0 * (ej - mu) / n;
                    }
                }
                accumulate(grads, *input, out)?;
            }
            Op::GaussianKlSym { a, b, floor } => {
                let (ea, eb) = (val(*a), val(*b));
                let (mu_a, va) = moments(ea.data());
                let (mu_b, vb) = moments(eb.data());
                let (fa, fb) = (va.max(*floor), vb.max(*floor));
                let delta = mu_a - mu_b;
                let d_mu = delta / fb + delta / fa;
                let d_va = if va > *floor { 1.0 / (2.0 * fb) - (fb + delta * delta) / (2.0 * fa * fa) } else { 0.0 };
                let d_vb = if vb > *floor { 1.0 / (2.0 * fa) - (fa + delta * delta) / (2.0 * fb * fb) } else { 0.0 };
                let scale = g.item();
                let na = ea.len() as f64;
                let nb = eb.len() as f64;
                accumulate(grads, *a, ea.map(|x| scale * (d_mu / na + d_va * 2.0 * (x - mu_a) / na)))?;
                accumulate(grads, *b, eb.map(|x| scale * (-d_mu / nb + d_vb * 2.0 * (x - mu_b) / nb)))?;
            }
            Op::SoftHistogram { input, temperature } => {
                let e = val(*input);
                let bins = g.cols();
                let n = e.len() as f64;
                let out = e.map(|x| {
                    let w = soft_assign(x, bins, *temperature);
                    let centers = (0..bins).map(|b| (b as f64 + 0.5) / bins as f64);
                    // d softmax_b / dx = w_b (s_b - sum_c w_c s_c), s_b = d logit_b / dx
                    let s: Vec<f64> = centers.map(|c| -(x - c).signum() / temperature).collect();
                    let s_bar: f64 = w.iter().zip(&s).map(|(a, b)| a * b).sum();
                    w.iter().zip(&s).zip(g.data()).map(|((wb, sb), gb)| gb * wb * (sb - s_bar)).sum::<f64>() / n
                });
                accumulate(grads, *input, out)?;
            }
            Op::HistKlSym { p, q, eps } => {
                let (pv, qv) = (val(*p), val(*q));
                let bins = pv.len() as f64;
                let z = 1.0 + bins * eps;
                let ps: Vec<f64> = pv.data().iter().map(|v| (v + eps) / z).collect();
                let qs: Vec<f64> = qv.data().iter().map(|v| (v + eps) / z).collect();
                // L = sum (p - q)(ln p - ln q); dL/dp = ln p - ln q + 1 - q/p
                let s = g.item() / z;
                let gp = ps.iter().zip(&qs).map(|(a, b)| s * (a.ln() - b.ln() + 1.0 - b / a)).collect();
                let gq = ps.iter().zip(&qs).map(|(a, b)| s * (b.ln() - a.ln() + 1.0 - a / b)).collect();
                accumulate(grads, *p, Matrix::row_vector(gp))?;
                accumulate(grads, *q, Matrix::row_vector(gq))?;
            }
            Op::BceWithLogits { logits, target } => {
                let z = val(*logits);
                let k = z.len() as f64;
                let out = z.zip_map(target, |zi, ti| g.item() * (sigmoid(zi) - ti) / k)?;
                accumulate(grads, *logits, out)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Mean and population variance.
pub fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

/// `KL(N(mu_a, va)‖N(mu_b, vb)) + KL(N(mu_b, vb)‖N(mu_a, va))`; the log terms cancel.
pub fn gaussian_kl_sym_value(mu_a: f64, va: f64, mu_b: f64, vb: f64) -> f64 {
    let d2 = (mu_a - mu_b).powi(2);
    (va + d2) / (2.0 * vb) + (vb + d2) / (2.0 * va) - 1.0
}

fn soft_assign(x: f64, bins: usize, temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> =
        (0..bins).map(|b| -(x - (b as f64 + 0.5) / bins as f64).abs() / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Symmetric KL of two probability vectors after `(p + eps) / (1 + bins·eps)` smoothing.
pub fn smoothed_kl_sym(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let z = 1.0 + p.len() as f64 * eps;
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let (a, b) = ((a + eps) / z, (b + eps) / z);
            (a - b) * (a.ln() - b.ln())
        })
        .sum()
}

const BCE_CLAMP: f64 = 1e-12;

pub(crate) fn bce_value(z: &[f64], t: &[f64]) -> f64 {
    let lo = BCE_CLAMP.ln();
    let hi = (-BCE_CLAMP).ln_1p();
    let total: f64 = z
        .iter()
        .zip(t)
        .map(|(&zi, &ti)| {
            let log_p = (-softplus(-zi)).clamp(lo, hi);
            let log_q = (-softplus(zi)).clamp(lo, hi);
            -(ti * log_p + (1.0 - ti) * log_q)
        })
        .sum();
    total / z.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let a = t.param("a", Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_param_gets_zero() {
        let mut t = Tape::new();
        let a = t.param("a", Matrix::filled(2, 3, 1.5)).unwrap();
        t.param("unused", Matrix::filled(3, 2, 4.0)).unwrap();
        let loss = t.sum(a).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get("unused").unwrap(), &Matrix::zeros(3, 2));
        assert_eq!(g.get("a").unwrap(), &Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut t = Tape::new();
        let theta = t.param("theta", Matrix::from_vec(2, 5, (0..10).map(f64::from).collect()).unwrap()).unwrap();
        let loss = t.mean(theta).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get("theta").unwrap().data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut t = Tape::new();
        t.param("w", Matrix::zeros(1, 1)).unwrap();
        assert!(t.param("w", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn shared_node_accumulates() {
        // loss = sum(a * a) via two uses of a
        let mut t = Tape::new();
        let a = t.param("a", Matrix::row_vector(vec![1.0, -2.0])).unwrap();
        let sq = t.mul(a, a).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get("a").unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn nan_is_rejected_at_push() {
        let mut t = Tape::new();
        assert!(matches!(t.constant(Matrix::scalar(f64::NAN)), Err(Error::Numeric(_))));
    }

    #[test]
    fn kl_sym_closed_form() {
        // mu equal, sigma 1 vs 2: ln2 + 1/8 - 1/2 + ln(1/2) + 2 - 1/2
        assert!((gaussian_kl_sym_value(0.0, 1.0, 0.0, 4.0) - 1.125).abs() < 1e-15);
        assert_eq!(gaussian_kl_sym_value(0.3, 2.0, 0.3, 2.0), 0.0);
    }

    #[test]
    fn soft_assign_is_a_distribution() {
        for x in [0.0, 0.2, 0.51, 1.0, 1.7, -0.3] {
            let w = soft_assign(x, 16, 0.01);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
