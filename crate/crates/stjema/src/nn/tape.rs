//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every tensor on the tape is an `Array2<f64>`; row vectors are `1×d`,
//! column vectors `d×1`, scalars `1×1`. A forward pass appends nodes to
//! the tape; [`Tape::backward`] walks the recorded operations in reverse
//! and accumulates adjoints for every node flagged as requiring
//! gradients. Constants (data, masks, frozen parameters) are inserted
//! with [`Tape::constant`] and never receive gradients, which is how the
//! stop-gradient contract for the target encoder is enforced
//! structurally.
//!
//! Shape mismatches are programmer errors and panic, mirroring
//! `ndarray`'s own behaviour on `dot`.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    /// Hadamard product.
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    /// `1×1` scalar node times a tensor node.
    ScalarMul { scalar: usize, tensor: usize },
    /// Add a `1×d` row vector to every row of an `n×d` matrix.
    AddRow { matrix: usize, row: usize },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Gelu(usize),
    /// Row-wise layer norm over the feature axis with `1×d` gain/bias.
    LayerNorm { input: usize, gain: usize, bias: usize },
    ConcatCols(usize, usize),
    /// Sum of all entries, producing a `1×1` scalar.
    Sum(usize),
    /// Mean squared error against a constant target, restricted to a
    /// binary mask and normalized by `denom`.
    MaskedMse { pred: usize, target: Array2<f64>, mask: Array2<f64>, denom: f64 },
    /// Binary cross-entropy on probabilities (clipped) against a constant
    /// target, restricted to a binary mask and normalized by `denom`.
    MaskedBce { pred: usize, target: Array2<f64>, mask: Array2<f64>, denom: f64, clip: f64 },
    /// `−ln softmax(logits)[class]` for a `1×c` logit row.
    SoftmaxCrossEntropy { logits: usize, class: usize },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node as a plain float.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar_value on non-scalar node");
        a[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Insert a tensor that participates in gradients (a trainable leaf).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        let ng = self.needs(a.0);
        self.push(v, Op::Transpose(a.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        let ng = self.needs(a.0);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    /// Multiply a tensor by a `1×1` scalar node.
    pub fn scalar_mul(&mut self, scalar: Var, tensor: Var) -> Var {
        assert_eq!(self.nodes[scalar.0].value.dim(), (1, 1), "scalar_mul: scalar must be 1×1");
        let s = self.nodes[scalar.0].value[(0, 0)];
        let v = self.nodes[tensor.0].value.mapv(|x| s * x);
        let ng = self.needs(scalar.0) || self.needs(tensor.0);
        self.push(v, Op::ScalarMul { scalar: scalar.0, tensor: tensor.0 }, ng)
    }

    /// Broadcast-add a `1×d` row to every row of an `n×d` matrix.
    pub fn add_row(&mut self, matrix: Var, row: Var) -> Var {
        let m = &self.nodes[matrix.0].value;
        let r = &self.nodes[row.0].value;
        assert_eq!(r.nrows(), 1, "add_row: row operand must be 1×d");
        assert_eq!(m.ncols(), r.ncols(), "add_row: column mismatch");
        let v = m + &r.row(0);
        let ng = self.needs(matrix.0) || self.needs(row.0);
        self.push(v, Op::AddRow { matrix: matrix.0, row: row.0 }, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let ng = self.needs(a.0);
        self.push(v, Op::Sigmoid(a.0), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let ng = self.needs(a.0);
        self.push(v, Op::Tanh(a.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a.0);
        self.push(v, Op::Relu(a.0), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu);
        let ng = self.needs(a.0);
        self.push(v, Op::Gelu(a.0), ng)
    }

    /// Layer norm over the feature axis (each row normalized), with
    /// learnable `1×d` gain and bias.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        assert_eq!(g.dim(), (1, x.ncols()), "layer_norm: gain must be 1×d");
        assert_eq!(b.dim(), (1, x.ncols()), "layer_norm: bias must be 1×d");
        let mut v = Array2::zeros(x.raw_dim());
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let (mean, var) = row_mean_var(row.as_slice().unwrap());
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..x.ncols() {
                v[(i, j)] = (row[j] - mean) * inv * g[(0, j)] + b[(0, j)];
            }
        }
        let ng = self.needs(input.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push(v, Op::LayerNorm { input: input.0, gain: gain.0, bias: bias.0 }, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[b.0].value;
        assert_eq!(x.nrows(), y.nrows(), "concat_cols: row mismatch");
        let mut v = Array2::zeros((x.nrows(), x.ncols() + y.ncols()));
        v.slice_mut(ndarray::s![.., ..x.ncols()]).assign(x);
        v.slice_mut(ndarray::s![.., x.ncols()..]).assign(y);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::ConcatCols(a.0, b.0), ng)
    }

    /// Sum of all entries as a `1×1` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let ng = self.needs(a.0);
        self.push(v, Op::Sum(a.0), ng)
    }

    /// `Σ mask ⊙ (pred − target)² / denom` as a `1×1` scalar.
    pub fn masked_mse(&mut self, pred: Var, target: &Array2<f64>, mask: &Array2<f64>, denom: f64) -> Var {
        let p = &self.nodes[pred.0].value;
        assert_eq!(p.dim(), target.dim(), "masked_mse: target shape mismatch");
        assert_eq!(p.dim(), mask.dim(), "masked_mse: mask shape mismatch");
        assert!(denom > 0.0, "masked_mse: denom must be positive");
        let mut acc = 0.0;
        for ((pv, tv), mv) in p.iter().zip(target.iter()).zip(mask.iter()) {
            let d = pv - tv;
            acc += mv * d * d;
        }
        let v = Array2::from_elem((1, 1), acc / denom);
        let ng = self.needs(pred.0);
        self.push(
            v,
            Op::MaskedMse { pred: pred.0, target: target.clone(), mask: mask.clone(), denom },
            ng,
        )
    }

    /// Masked mean binary cross-entropy on probabilities, clipped to
    /// `[clip, 1−clip]`.
    pub fn masked_bce(
        &mut self,
        pred: Var,
        target: &Array2<f64>,
        mask: &Array2<f64>,
        denom: f64,
        clip: f64,
    ) -> Var {
        let p = &self.nodes[pred.0].value;
        assert_eq!(p.dim(), target.dim(), "masked_bce: target shape mismatch");
        assert_eq!(p.dim(), mask.dim(), "masked_bce: mask shape mismatch");
        assert!(denom > 0.0, "masked_bce: denom must be positive");
        assert!(clip > 0.0 && clip < 0.5, "masked_bce: clip out of range");
        let mut acc = 0.0;
        for ((pv, tv), mv) in p.iter().zip(target.iter()).zip(mask.iter()) {
            if *mv == 0.0 {
                continue;
            }
            let pc = pv.clamp(clip, 1.0 - clip);
            acc += mv * (-(tv * pc.ln()) - (1.0 - tv) * (1.0 - pc).ln());
        }
        let v = Array2::from_elem((1, 1), acc / denom);
        let ng = self.needs(pred.0);
        self.push(
            v,
            Op::MaskedBce { pred: pred.0, target: target.clone(), mask: mask.clone(), denom, clip },
            ng,
        )
    }

    /// Cross-entropy of a `1×c` logit row against an integer class.
    pub fn softmax_cross_entropy(&mut self, logits: Var, class: usize) -> Var {
        let l = &self.nodes[logits.0].value;
        assert_eq!(l.nrows(), 1, "softmax_cross_entropy: logits must be 1×c");
        assert!(class < l.ncols(), "softmax_cross_entropy: class out of range");
        let row: Vec<f64> = l.row(0).to_vec();
        let lse = log_sum_exp(&row);
        let v = Array2::from_elem((1, 1), lse - row[class]);
        let ng = self.needs(logits.0);
        self.push(v, Op::SoftmaxCrossEntropy { logits: logits.0, class }, ng)
    }

    /// Backpropagate from a `1×1` loss node. Returns one adjoint slot per
    /// tape node; only nodes reachable from gradient-requiring leaves are
    /// populated.
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], idx: usize, delta: Array2<f64>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g * &self.nodes[*b].value);
                self.accumulate(grads, *b, g * &self.nodes[*a].value);
            }
            Op::MatMul(a, b) => {
                self.accumulate(grads, *a, g.dot(&self.nodes[*b].value.t()));
                self.accumulate(grads, *b, self.nodes[*a].value.t().dot(g));
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.t().to_owned());
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.mapv(|x| c * x));
            }
            Op::ScalarMul { scalar, tensor } => {
                let s = self.nodes[*scalar].value[(0, 0)];
                let t = &self.nodes[*tensor].value;
                let ds = (g * t).sum();
                self.accumulate(grads, *scalar, Array2::from_elem((1, 1), ds));
                self.accumulate(grads, *tensor, g.mapv(|x| s * x));
            }
            Op::AddRow { matrix, row } => {
                self.accumulate(grads, *matrix, g.clone());
                let col_sums = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *row, col_sums);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                self.accumulate(grads, *a, g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                self.accumulate(grads, *a, g * &x.mapv(gelu_derivative));
            }
            Op::LayerNorm { input, gain, bias } => {
                self.backward_layer_norm(i, *input, *gain, *bias, g, grads);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.ncols();
                self.accumulate(grads, *a, g.slice(ndarray::s![.., ..ca]).to_owned());
                self.accumulate(grads, *b, g.slice(ndarray::s![.., ca..]).to_owned());
            }
            Op::Sum(a) => {
                let s = g[(0, 0)];
                let shape = self.nodes[*a].value.raw_dim();
                self.accumulate(grads, *a, Array2::from_elem(shape, s));
            }
            Op::MaskedMse { pred, target, mask, denom } => {
                let s = g[(0, 0)];
                let p = &self.nodes[*pred].value;
                let d = (p - target) * mask * (2.0 * s / denom);
                self.accumulate(grads, *pred, d);
            }
            Op::MaskedBce { pred, target, mask, denom, clip } => {
                let s = g[(0, 0)];
                let p = &self.nodes[*pred].value;
                let mut d = Array2::zeros(p.raw_dim());
                for ((idx, pv), (tv, mv)) in
                    p.indexed_iter().zip(target.iter().zip(mask.iter()))
                {
                    if *mv == 0.0 || *pv < *clip || *pv > 1.0 - *clip {
                        continue;
                    }
                    d[idx] = s * mv * (pv - tv) / (pv * (1.0 - pv)) / denom;
                }
                self.accumulate(grads, *pred, d);
            }
            Op::SoftmaxCrossEntropy { logits, class } => {
                let s = g[(0, 0)];
                let l = &self.nodes[*logits].value;
                let row: Vec<f64> = l.row(0).to_vec();
                let lse = log_sum_exp(&row);
                let mut d = Array2::zeros(l.raw_dim());
                for (j, lj) in row.iter().enumerate() {
                    let p = (lj - lse).exp();
                    d[(0, j)] = s * (p - if j == *class { 1.0 } else { 0.0 });
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }

    fn backward_layer_norm(
        &self,
        out: usize,
        input: usize,
        gain: usize,
        bias: usize,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let x = &self.nodes[input].value;
        let gn = &self.nodes[gain].value;
        let d = x.ncols() as f64;
        let mut dx = Array2::zeros(x.raw_dim());
        let mut dgain = Array2::zeros((1, x.ncols()));
        let mut dbias = Array2::zeros((1, x.ncols()));
        let _ = &self.nodes[out];
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let (mean, var) = row_mean_var(row.as_slice().unwrap());
            let inv = 1.0 / (var + LN_EPS).sqrt();
            // dxhat, then the two reduction terms of the standard LN backward
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            let mut dxhat = vec![0.0; x.ncols()];
            for j in 0..x.ncols() {
                let xhat = (row[j] - mean) * inv;
                let dxh = g[(i, j)] * gn[(0, j)];
                dxhat[j] = dxh;
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xhat;
                dgain[(0, j)] += g[(i, j)] * xhat;
                dbias[(0, j)] += g[(i, j)];
            }
            for j in 0..x.ncols() {
                let xhat = (row[j] - mean) * inv;
                dx[(i, j)] = inv * (dxhat[j] - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
            }
        }
        self.accumulate(grads, input, dx);
        self.accumulate(grads, gain, dgain);
        self.accumulate(grads, bias, dbias);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

fn row_mean_var(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, var)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
