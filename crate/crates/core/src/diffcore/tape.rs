//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so creation order is already a topological order and
//! [`Tape::backward`] walks it in reverse, visiting each node once.

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    MulConst {
        x: Var,
        factor: Vec<f64>,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows {
        x: Var,
        exclude_diag: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        n_heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `c[m×n] (+)= a[m×k] · b[k×n]` where `a` and `b` are strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be a matrix, got {s:?}"))),
    }
}

/// Numerically stable softmax of a slice at temperature 1.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Records a trainable input; [`Tape::grad`] is populated for it by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it participated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| {
            Tensor::new(self.value(v).shape().to_vec(), g.to_vec())
                .expect("gradient shape matches value")
        })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.map(x, |v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// Adds a `[D]` bias to every row of an `[N, D]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = matrix_dims(self.value(x), "add_bias input")?;
        if self.value(bias).shape() != [d] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match width {d}",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (o, bj) in row.iter_mut().zip(&b) {
                *o += bj;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// `a · b` (or `a · bᵀ` when `trans_b`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul lhs")?;
        let (br, bc) = matrix_dims(self.value(b), "matmul rhs")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims {k} vs {kb} (trans_b={trans_b})"
            )));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if trans_b {
            gemm(m, k, n, ad, k, 1, bd, 1, k, &mut out, false);
        } else {
            gemm(m, k, n, ad, k, 1, bd, n, 1, &mut out, false);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    /// Selects rows of a matrix by index (embedding lookup, [CLS] pooling).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = matrix_dims(self.value(src), "gather source")?;
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&s[i * c..(i + 1) * c]);
        }
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (_, c) = matrix_dims(self.value(*first), "concat part")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = matrix_dims(self.value(p), "concat part")?;
            if pc != c {
                return Err(Error::Shape(format!("concat widths {c} vs {pc}")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "mul_const factor has {} entries for {} values",
                factor.len(),
                self.value(x).numel()
            )));
        }
        let t = self.value(x);
        let data = t.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst { x, factor }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        });
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with learned `[D]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, d) = matrix_dims(self.value(x), "layer_norm input")?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::Shape("layer_norm gain/bias width".into()));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![r, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales every row to unit L2 norm. A zero row is a hard error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, d) = matrix_dims(self.value(x), "normalize_rows input")?;
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xs[i * d..(i + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {n}; cosine similarity is undefined"
                )));
            }
            for j in 0..d {
                out[i * d + j] = row[j] / n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![r, d], out)?,
            Op::NormalizeRows { x, norms },
            rg,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Log-softmax over the last dimension. With `exclude_diag` the input
    /// must be square and entry `(i, i)` is left out of row `i`'s
    /// normalizer; excluded entries are reported as 0 and carry no gradient.
    pub fn log_softmax_rows(&mut self, x: Var, exclude_diag: bool) -> Result<Var> {
        let (r, c) = matrix_dims(self.value(x), "log_softmax input")?;
        if exclude_diag && r != c {
            return Err(Error::Shape(format!(
                "diagonal exclusion needs a square matrix, got {r}x{c}"
            )));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let kept = row
                .iter()
                .enumerate()
                .filter(|(j, _)| !(exclude_diag && *j == i))
                .map(|(_, v)| *v);
            let lse = log_sum_exp(kept);
            for j in 0..c {
                if !(exclude_diag && j == i) {
                    out[i * c + j] = row[j] - lse;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LogSoftmaxRows { x, exclude_diag },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits_r)[labels_r]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = matrix_dims(self.value(logits), "cross_entropy logits")?;
        if labels.len() != r {
            return Err(Error::Shape(format!(
                "{} labels for {r} logit rows",
                labels.len()
            )));
        }
        if r == 0 {
            return Err(Error::EmptyBatch("cross entropy over zero rows".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let xs = self.value(logits).data();
        let mut probs = xs.to_vec();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &xs[i * c..(i + 1) * c];
            total += log_sum_exp(row.iter().copied()) - row[y];
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / r as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ weights ⊙ x` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "{} weights for {} values",
                weights.len(),
                self.value(x).numel()
            )));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, w)| a * w)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[T, D]`; each `(start, len)` segment attends only
    /// within itself, so padding never needs to be materialized.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        n_heads: usize,
    ) -> Result<Var> {
        let (t, d) = matrix_dims(self.value(q), "attention q")?;
        if self.value(k).shape() != [t, d] || self.value(v).shape() != [t, d] {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible into {n_heads} heads")));
        }
        if let Some(s) = segments.iter().find(|(s, l)| s + l > t) {
            return Err(Error::Index(format!("segment {s:?} exceeds {t} rows")));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; t * d];
        let mut probs = Vec::with_capacity(
            segments.iter().map(|(_, l)| l * l).sum::<usize>() * n_heads,
        );
        let mut scores = Vec::new();
        for &(start, len) in segments {
            for h in 0..n_heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qd[(start + i) * d + off..(start + i) * d + off + dh];
                    scores.clear();
                    for j in 0..len {
                        let kj = &kd[(start + j) * d + off..(start + j) * d + off + dh];
                        scores.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
                    }
                    softmax_in_place(&mut scores);
                    let o = &mut out[(start + i) * d + off..(start + i) * d + off + dh];
                    for (j, p) in scores.iter().enumerate() {
                        let vj = &vd[(start + j) * d + off..(start + j) * d + off + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += p * vv;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![t, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                n_heads,
                probs,
            },
            rg,
        ))
    }

    /// `softmax(z / temperature)` over the last dimension.
    pub fn softmax(&mut self, z: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let scaled = self.scale(z, 1.0 / temperature);
        Ok(self.softmax_rows(scaled))
    }

    /// Cosine similarity of two nonzero vectors, as a scalar.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (nu, nv) = (self.value(u).numel(), self.value(v).numel());
        if nu != nv {
            return Err(Error::Shape(format!("cosine of lengths {nu} and {nv}")));
        }
        let u2 = self.reshape(u, &[1, nu])?;
        let v2 = self.reshape(v, &[1, nv])?;
        let un = self.normalize_rows(u2)?;
        let vn = self.normalize_rows(v2)?;
        let s = self.matmul(un, vn, true)?;
        self.reshape(s, &[])
    }

    /// `-log softmax(logits)[label]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let c = self.value(logits).numel();
        let row = self.reshape(logits, &[1, c])?;
        self.cross_entropy_rows(row, &[label])
    }

    /// Propagates gradients from a scalar `loss` to every node that requires them.
    ///
    /// Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(ga, 1.0, g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                axpy(gb, 1.0, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(ga, 1.0, g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                axpy(gb, -1.0, g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, gi), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *d += gi * bv;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, gi), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *d += gi * av;
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                axpy(gx, *s, g);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) | Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                if g.len() == 1 && gx.len() != 1 {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                } else {
                    axpy(gx, 1.0, g);
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                axpy(gx, 1.0, g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let d = gb.len();
                for row in g.chunks(d.max(1)) {
                    axpy(gb, 1.0, row);
                }
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let sa = nodes[a.0].value.shape();
            let (m, k) = (sa[0], sa[1]);
            let n = node.value.shape()[1];
            let (ad, bd) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                if *trans_b {
                    // dA = G · B, B is [n, k]
                    gemm(m, n, k, g, n, 1, bd, k, 1, ga, true);
                } else {
                    // dA = G · Bᵀ, B is [k, n]
                    gemm(m, n, k, g, n, 1, bd, 1, n, ga, true);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                if *trans_b {
                    // dB = Gᵀ · A, [n, k]
                    gemm(n, m, k, g, 1, n, ad, k, 1, gb, true);
                } else {
                    // dB = Aᵀ · G, [k, n]
                    gemm(k, m, n, ad, 1, k, g, n, 1, gb, true);
                }
            }
        }
        Op::GatherRows { src, idx } => {
            let c = node.value.cols();
            if let Some(gs) = slot(nodes, grads, *src) {
                for (r, &row) in idx.iter().enumerate() {
                    axpy(&mut gs[row * c..(row + 1) * c], 1.0, &g[r * c..(r + 1) * c]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = nodes[p.0].value.numel();
                if let Some(gp) = slot(nodes, grads, *p) {
                    axpy(gp, 1.0, &g[off..off + n]);
                }
                off += n;
            }
        }
        Op::MulConst { x, factor } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, gi), f) in gx.iter_mut().zip(g).zip(factor) {
                    *d += gi * f;
                }
            }
        }
        Op::Gelu(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, gi), &v) in gx.iter_mut().zip(g).zip(val(*x)) {
                    let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dv = 0.5 * (1.0 + th)
                        + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *d += gi * dv;
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = node.value.cols();
            let gamma = val(*gain);
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for gr in g.chunks(d) {
                    axpy(gb, 1.0, gr);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dh = vec![0.0; d];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dh[j] = gr[j] * gamma[j];
                    }
                    let s1: f64 = dh.iter().sum();
                    let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let dx = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dx[j] += is / d as f64 * (d as f64 * dh[j] - s1 - hr[j] * s2);
                    }
                }
            }
        }
        Op::NormalizeRows { x, norms } => {
            let d = node.value.cols();
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let c = node.value.cols();
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((dx, yr), gr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmaxRows { x, exclude_diag } => {
            let c = node.value.cols();
            let o = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for r in 0..node.value.rows() {
                    let keep = |j: usize| !(*exclude_diag && j == r);
                    let gr = &g[r * c..(r + 1) * c];
                    let gsum: f64 = (0..c).filter(|&j| keep(j)).map(|j| gr[j]).sum();
                    for j in (0..c).filter(|&j| keep(j)) {
                        gx[r * c + j] += gr[j] - o[r * c + j].exp() * gsum;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = nodes[logits.0].value.cols();
            let scale = g[0] / labels.len() as f64;
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let t = if j == y { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - t);
                    }
                }
            }
        }
        Op::WeightedSum { x, weights } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                axpy(gx, g[0], weights);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            segments,
            n_heads,
            probs,
        } => {
            let d = node.value.cols();
            let dh = d / n_heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd) = (val(*q), val(*k), val(*v));
            let mut dq = vec![0.0; qd.len()];
            let mut dk = vec![0.0; kd.len()];
            let mut dv = vec![0.0; vd.len()];
            let mut dp = Vec::new();
            let mut off_p = 0;
            for &(start, len) in segments {
                for h in 0..*n_heads {
                    let off = h * dh;
                    for i in 0..len {
                        let ri = (start + i) * d + off;
                        let p = &probs[off_p..off_p + len];
                        off_p += len;
                        let gi = &g[ri..ri + dh];
                        dp.clear();
                        for (j, pj) in p.iter().enumerate() {
                            let rj = (start + j) * d + off;
                            dp.push(gi.iter().zip(&vd[rj..rj + dh]).map(|(a, b)| a * b).sum::<f64>());
                            axpy(&mut dv[rj..rj + dh], *pj, gi);
                        }
                        let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for (j, pj) in p.iter().enumerate() {
                            let ds = pj * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let rj = (start + j) * d + off;
                            let (qi, kj) = (&qd[ri..ri + dh], &kd[rj..rj + dh]);
                            axpy(&mut dq[ri..ri + dh], ds, kj);
                            axpy(&mut dk[rj..rj + dh], ds, qi);
                        }
                    }
                }
            }
            for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(gv) = slot(nodes, grads, var) {
                    axpy(gv, 1.0, &buf);
                }
            }
        }
    }
}
