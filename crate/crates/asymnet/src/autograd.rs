//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is a define-by-run graph: every operation appends a node and
//! returns a [`TensorId`]. Calling [`Tape::backward`] on a scalar node fills
//! the `grad` buffers of every `requires_grad` leaf by walking the nodes in
//! exact reverse insertion order. A tape is a single-owner unit; build a
//! fresh one per forward pass.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("layernorm needs dimension >= 2, got {0}")]
    LayerNormDim(usize),
    #[error("values length {got} does not match shape product {want}")]
    BadLength { got: usize, want: usize },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Sigmoid(TensorId),
    Relu(TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    /// Broadcast-add a row vector to every row of a matrix.
    AddRow(TensorId, TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        // saved forward context, one entry per row
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(TensorId),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(values.len(), numel(&shape));
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if values.len() != numel(shape) {
            return Err(AutogradError::BadLength {
                got: values.len(),
                want: numel(shape),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AutogradError::NonFinite("leaf"));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives a gradient (masks, fixed matrices, inputs).
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, values, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn require_equal_shapes(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(AutogradError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<TensorId> {
        self.require_equal_shapes(a, b, what)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, values, rg, op))
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, rg, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn add_scalar(&mut self, a: TensorId, s: f64) -> TensorId {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: f64) -> TensorId {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.nodes[a.0].values.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![total], rg, Op::Sum(a))
    }

    /// `a` is `m x k`, `b` is `k x n`; returns `m x n`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutogradError::ShapeMismatch(format!(
                "matmul: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bj) in orow.iter_mut().zip(brow) {
                    *o += aip * bj;
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 {
            return Err(AutogradError::ShapeMismatch(format!("transpose: {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = av[r * n + c];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![n, m], out, rg, Op::Transpose(a)))
    }

    /// Adds row vector `row` (shape `[n]` or `[1, n]`) to every row of `x` (`m x n`).
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let sx = self.nodes[x.0].shape.clone();
        let n_row = numel(&self.nodes[row.0].shape);
        if sx.len() != 2 || sx[1] != n_row {
            return Err(AutogradError::ShapeMismatch(format!(
                "add_row: {sx:?} + row of {n_row}"
            )));
        }
        let (m, n) = (sx[0], sx[1]);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(self.nodes[x.0].values[i * n + j] + self.nodes[row.0].values[j]);
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[row.0].requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::AddRow(x, row)))
    }

    /// Row-wise layer normalization of `x` (`[d]` or `[m, d]`), then affine
    /// transform by `gain` and `bias` (both `[d]`).
    pub fn layernorm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let sx = self.nodes[x.0].shape.clone();
        let (rows, d) = match sx.len() {
            1 => (1, sx[0]),
            2 => (sx[0], sx[1]),
            _ => return Err(AutogradError::ShapeMismatch(format!("layernorm: {sx:?}"))),
        };
        if d < 2 {
            return Err(AutogradError::LayerNormDim(d));
        }
        if numel(&self.nodes[gain.0].shape) != d || numel(&self.nodes[bias.0].shape) != d {
            return Err(AutogradError::ShapeMismatch(
                "layernorm: gain/bias length".into(),
            ));
        }
        if eps <= 0.0 {
            return Err(AutogradError::NonFinite("layernorm eps"));
        }
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &self.nodes[x.0].values[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xr[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * self.nodes[gain.0].values[j] + self.nodes[bias.0].values[j];
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gain.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        Ok(self.push(
            sx,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max-subtraction. `logits` is `[batch, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let s = self.nodes[logits.0].shape.clone();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(AutogradError::ShapeMismatch(format!(
                "softmax_cross_entropy: logits {s:?}, {} labels",
                labels.len()
            )));
        }
        let (b, c) = (s[0], s[1]);
        for &l in labels {
            if l >= c {
                return Err(AutogradError::LabelOutOfRange { label: l, classes: c });
            }
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &self.nodes[logits.0].values[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[r * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                probs[r * c + j] /= denom;
            }
            loss -= probs[r * c + labels[r]].ln();
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(AutogradError::NonFinite("softmax_cross_entropy"));
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        let node = &mut self.nodes[id.0];
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Propagates `d(root)/d(leaf)` into every `requires_grad` leaf.
    /// Repeated calls accumulate; use [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if numel(&self.nodes[root.0].shape) != 1 {
            return Err(AutogradError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        // local adjoints for this pass; leaf grads accumulate across passes
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.accumulate(TensorId(i), &g);
                continue;
            }
            let add_to = |adj: &mut Vec<Option<Vec<f64>>>, id: TensorId, delta: Vec<f64>| {
                let slot = adj[id.0].get_or_insert_with(|| vec![0.0; delta.len()]);
                for (s, d) in slot.iter_mut().zip(&delta) {
                    *s += d;
                }
            };
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    add_to(&mut adj, a, g.clone());
                    add_to(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    add_to(&mut adj, a, g.clone());
                    add_to(&mut adj, b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].values).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> = g.iter().zip(&self.nodes[a.0].values).map(|(g, v)| g * v).collect();
                    add_to(&mut adj, a, da);
                    add_to(&mut adj, b, db);
                }
                Op::Neg(a) => {
                    let a = *a;
                    add_to(&mut adj, a, g.iter().map(|v| -v).collect());
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let dv: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[i].values)
                        .map(|(g, &y)| g * y * (1.0 - y))
                        .collect();
                    add_to(&mut adj, a, dv);
                }
                Op::Relu(a) => {
                    let a = *a;
                    // subgradient 0 at x == 0
                    let dv: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_to(&mut adj, a, dv);
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    add_to(&mut adj, a, g);
                }
                Op::MulScalar(a, s) => {
                    let (a, s) = (*a, *s);
                    add_to(&mut adj, a, g.iter().map(|v| v * s).collect());
                }
                Op::Sum(a) => {
                    let a = *a;
                    let n = self.nodes[a.0].values.len();
                    add_to(&mut adj, a, vec![g[0]; n]);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    // dA = g . B^T
                    let bv = &self.nodes[b.0].values;
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[r * n + j] * bv[p * n + j];
                            }
                            da[r * k + p] = acc;
                        }
                    }
                    // dB = A^T . g
                    let av = &self.nodes[a.0].values;
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let arp = av[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += arp * g[r * n + j];
                            }
                        }
                    }
                    add_to(&mut adj, a, da);
                    add_to(&mut adj, b, db);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut da = vec![0.0; m * n];
                    for r in 0..n {
                        for c in 0..m {
                            da[c * n + r] = g[r * m + c];
                        }
                    }
                    add_to(&mut adj, a, da);
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let mut drow = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            drow[j] += g[r * n + j];
                        }
                    }
                    add_to(&mut adj, x, g);
                    add_to(&mut adj, row, drow);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let d = *self.nodes[i].shape.last().unwrap();
                    let rows = self.nodes[i].values.len() / d;
                    let gv = self.nodes[gain.0].values.clone();
                    let mut dx = vec![0.0; rows * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_gh = 0.0;
                        let mut mean_ghh = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gv[j];
                            mean_gh += gh;
                            mean_ghh += gh * hr[j];
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                        }
                        mean_gh /= d as f64;
                        mean_ghh /= d as f64;
                        for j in 0..d {
                            let gh = gr[j] * gv[j];
                            dx[r * d + j] = inv_std[r] * (gh - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                    add_to(&mut adj, x, dx);
                    add_to(&mut adj, gain, dgain);
                    add_to(&mut adj, bias, dbias);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut dl = probs.clone();
                    for (r, &lbl) in labels.iter().enumerate() {
                        dl[r * c + lbl] -= 1.0;
                    }
                    for v in dl.iter_mut() {
                        *v *= scale;
                    }
                    add_to(&mut adj, logits, dl);
                }
            }
        }
        Ok(())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar function, the independent
    /// gradient oracle used throughout this module's tests.
    pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g.push((fp - fm) / (2.0 * h));
        }
        g
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    fn rand_vals(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = t.constant(&[2, 1], vec![3.0, -1.0]).unwrap();
        let y = t.matmul(i2, x).unwrap();
        assert_eq!(t.values(y), &[3.0, -1.0]);
    }

    #[test]
    fn matmul_hand_sum() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.values(y), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_dim_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let av = rand_vals(12, 7);
        let bv = rand_vals(8, 8);
        let mut t = Tape::new();
        let a = t.leaf(&[3, 4], av.clone(), true).unwrap();
        let b = t.leaf(&[4, 2], bv.clone(), true).unwrap();
        let y = t.matmul(a, b).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();

        let fd_a = finite_diff(
            |v| {
                let mut t = Tape::new();
                let a = t.constant(&[3, 4], v.to_vec()).unwrap();
                let b = t.constant(&[4, 2], bv.clone()).unwrap();
                let y = t.matmul(a, b).unwrap();
                t.values(y).iter().sum()
            },
            &av,
            1e-5,
        );
        assert!(max_rel_err(t.grad(a).unwrap(), &fd_a) < 1e-6);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(&[1], vec![0.0]).unwrap();
        let y = t.sigmoid(x);
        assert_eq!(t.values(y), &[0.5]);
    }

    #[test]
    fn relu_difference_recovers_input() {
        // relu(x) - relu(-x) = x
        let mut t = Tape::new();
        let x = t.constant(&[1], vec![2.0]).unwrap();
        let nx = t.neg(x);
        let a = t.relu(x);
        let b = t.relu(nx);
        let y = t.sub(a, b).unwrap();
        assert_eq!(t.values(y), &[2.0]);
    }

    #[test]
    fn mul_backward_product_rule() {
        let mut t = Tape::new();
        let a = t.leaf(&[1], vec![3.0], true).unwrap();
        let b = t.leaf(&[1], vec![5.0], true).unwrap();
        let y = t.mul(a, b).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[5.0]);
        assert_eq!(t.grad(b).unwrap(), &[3.0]);
    }

    #[test]
    fn layernorm_zero_variance() {
        let mut t = Tape::new();
        let x = t.constant(&[4], vec![1.0; 4]).unwrap();
        let g = t.constant(&[4], vec![1.0; 4]).unwrap();
        let b = t.constant(&[4], vec![0.0; 4]).unwrap();
        let y = t.layernorm(x, g, b, 1e-5).unwrap();
        for &v in t.values(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_unit_variance_pair() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![1.0, -1.0]).unwrap();
        let g = t.constant(&[2], vec![1.0, 1.0]).unwrap();
        let b = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = t.layernorm(x, g, b, 1e-12).unwrap();
        assert!((t.values(y)[0] - 1.0).abs() < 1e-5);
        assert!((t.values(y)[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layernorm_rejects_d1() {
        let mut t = Tape::new();
        let x = t.constant(&[1], vec![1.0]).unwrap();
        let g = t.constant(&[1], vec![1.0]).unwrap();
        let b = t.constant(&[1], vec![0.0]).unwrap();
        assert!(t.layernorm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn layernorm_grad_matches_finite_differences() {
        let xv = rand_vals(8, 11);
        let gv = rand_vals(8, 12);
        let bv = rand_vals(8, 13);
        let mut t = Tape::new();
        let x = t.leaf(&[8], xv.clone(), true).unwrap();
        let g = t.leaf(&[8], gv.clone(), true).unwrap();
        let b = t.leaf(&[8], bv.clone(), true).unwrap();
        let y = t.layernorm(x, g, b, 1e-5).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();

        let eval = |xs: &[f64], gs: &[f64], bs: &[f64]| {
            let mut t = Tape::new();
            let x = t.constant(&[8], xs.to_vec()).unwrap();
            let g = t.constant(&[8], gs.to_vec()).unwrap();
            let b = t.constant(&[8], bs.to_vec()).unwrap();
            let y = t.layernorm(x, g, b, 1e-5).unwrap();
            t.values(y).iter().sum::<f64>()
        };
        let fd_x = finite_diff(|v| eval(v, &gv, &bv), &xv, 1e-5);
        let fd_g = finite_diff(|v| eval(&xv, v, &bv), &gv, 1e-5);
        assert!(max_rel_err(t.grad(x).unwrap(), &fd_x) < 1e-5);
        assert!(max_rel_err(t.grad(g).unwrap(), &fd_g) < 1e-5);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let l = t.constant(&[1, 10], vec![0.7; 10]).unwrap();
        let y = t.softmax_cross_entropy(l, &[3]).unwrap();
        assert!((t.values(y)[0] - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct() {
        let mut t = Tape::new();
        let l = t.constant(&[1, 3], vec![60.0, 0.0, 0.0]).unwrap();
        let y = t.softmax_cross_entropy(l, &[0]).unwrap();
        assert!(t.values(y)[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut t = Tape::new();
        let l = t.constant(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(t.softmax_cross_entropy(l, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let lv = rand_vals(12, 21);
        let labels = vec![0usize, 2, 1, 2];
        let mut t = Tape::new();
        let l = t.leaf(&[4, 3], lv.clone(), true).unwrap();
        let y = t.softmax_cross_entropy(l, &labels).unwrap();
        t.backward(y).unwrap();
        let fd = finite_diff(
            |v| {
                let mut t = Tape::new();
                let l = t.constant(&[4, 3], v.to_vec()).unwrap();
                let y = t.softmax_cross_entropy(l, &labels).unwrap();
                t.values(y)[0]
            },
            &lv,
            1e-5,
        );
        assert!(max_rel_err(t.grad(l).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn backward_of_sum_of_linear_map() {
        // root = sum(W . x) with x fixed: grad(W)[i][j] = x[j]
        let mut t = Tape::new();
        let w = t.leaf(&[2, 3], vec![0.5; 6], true).unwrap();
        let x = t.constant(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.matmul(w, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_or_no_grad() {
        let mut t = Tape::new();
        let a = t.leaf(&[1], vec![1.0], true).unwrap();
        let b = t.leaf(&[1], vec![1.0], true).unwrap();
        let y = t.mul_scalar(a, 2.0);
        t.backward(y).unwrap();
        assert!(t.grad(b).is_none() || t.grad(b).unwrap() == [0.0]);
    }

    #[test]
    fn three_layer_mlp_grads_match_finite_differences() {
        // composite scalar loss through matmul + relu + layernorm + CE
        let dims = [(4usize, 5usize), (4, 4), (3, 4)];
        let xv = rand_vals(10, 31); // batch 2 x 5
        let labels = vec![1usize, 0];
        let params: Vec<Vec<f64>> = dims
            .iter()
            .enumerate()
            .map(|(i, (o, inp))| rand_vals(o * inp, 40 + i as u64))
            .collect();

        let eval = |flat: &[f64]| {
            let mut off = 0;
            let mut ps = Vec::new();
            for (o, inp) in dims {
                ps.push(flat[off..off + o * inp].to_vec());
                off += o * inp;
            }
            let mut t = Tape::new();
            let mut h = t.constant(&[2, 5], xv.clone()).unwrap();
            for (i, (o, inp)) in dims.iter().enumerate() {
                let w = t.constant(&[*inp, *o], transpose(&ps[i], *o, *inp)).unwrap();
                h = t.matmul(h, w).unwrap();
                if i + 1 < dims.len() {
                    h = t.relu(h);
                }
            }
            let loss = t.softmax_cross_entropy(h, &labels).unwrap();
            t.values(loss)[0]
        };

        let flat: Vec<f64> = params.concat();
        let fd = finite_diff(eval, &flat, 1e-5);

        // same graph, gradients via backward
        let mut t = Tape::new();
        let mut h = t.constant(&[2, 5], xv.clone()).unwrap();
        let mut ws = Vec::new();
        for (i, (o, inp)) in dims.iter().enumerate() {
            let w = t.leaf(&[*inp, *o], transpose(&params[i], *o, *inp), true).unwrap();
            ws.push(w);
            h = t.matmul(h, w).unwrap();
            if i + 1 < dims.len() {
                h = t.relu(h);
            }
        }
        let loss = t.softmax_cross_entropy(h, &labels).unwrap();
        t.backward(loss).unwrap();
        let mut got = Vec::new();
        for (i, (o, inp)) in dims.iter().enumerate() {
            // transpose back to (o x inp) layout to compare against fd
            got.extend(transpose(t.grad(ws[i]).unwrap(), *inp, *o));
        }
        assert!(max_rel_err(&got, &fd) < 1e-4);
    }

    fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = m[r * cols + c];
            }
        }
        out
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let a = t.leaf(&[2, 2], rand_vals(4, 99), true).unwrap();
            let b = t.leaf(&[2, 2], rand_vals(4, 98), true).unwrap();
            let m = t.matmul(a, b).unwrap();
            let r = t.relu(m);
            let s = t.sum(r);
            t.backward(s).unwrap();
            (t.grad(a).unwrap().to_vec(), t.grad(b).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }
}
