//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`]
//! walks the record in exact reverse, accumulating gradients into every node
//! that (transitively) depends on a trainable leaf. One tape is strictly
//! single-writer; independent tapes may run in parallel.

use crate::error::TensorError;
use crate::tensor::{matmul_into, matmul_transa_into, matmul_transb_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a[n x k] @ b[m x k]^T
    MatMulTransB(Var, Var),
    Add(Var, Var),
    /// x[n x d] + row[d] broadcast over rows
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Silu(Var),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    SumAll(Var),
    /// Mean over elements of stable binary cross entropy between logits and
    /// fixed 0/1 targets.
    BceWithLogitsMean {
        logits: Var,
        targets: Vec<f64>,
    },
    /// Sum over elements of smooth-L1 applied to (pred - target).
    SmoothL1Sum {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; `backward` will produce its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn shape_err(op: &'static str, expected: String, got: String) -> TensorError {
        TensorError::ShapeMismatch { op, expected, got }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, m) = (self.value(b).rows(), self.value(b).cols());
        if k != k2 {
            return Err(Self::shape_err(
                "matmul",
                format!("inner dim {k}"),
                format!("{k2}"),
            ));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[n, m], out).expect("matmul output shape"),
            Op::MatMul(a, b),
            needs,
        ))
    }

    /// `a @ b^T` where `a` is n x k and `b` is m x k.
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = (self.value(a).rows(), self.value(a).cols());
        let (m, k2) = (self.value(b).rows(), self.value(b).cols());
        if k != k2 {
            return Err(Self::shape_err(
                "matmul_transb",
                format!("inner dim {k}"),
                format!("{k2}"),
            ));
        }
        let mut out = vec![0.0; n * m];
        matmul_transb_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[n, m], out).expect("matmul_transb output shape"),
            Op::MatMulTransB(a, b),
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err(
                "add",
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&shape, data).expect("add output shape"),
            Op::Add(a, b),
            needs,
        ))
    }

    /// Broadcast-add a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let d = self.value(x).cols();
        if self.value(row).len() != d {
            return Err(Self::shape_err(
                "add_row",
                format!("row of {d}"),
                format!("{}", self.value(row).len()),
            ));
        }
        let n = self.value(x).rows();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for (j, v) in self.value(x).row(i).iter().enumerate() {
                data.push(v + self.value(row).data()[j]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(
            Tensor::from_vec(&shape, data).expect("add_row output shape"),
            Op::AddRow(x, row),
            needs,
        ))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&shape, data).expect("scale output shape"),
            Op::Scale(x, s),
            needs,
        )
    }

    /// `x @ w + b` for x[n x d_in], w[d_in x d_out], b[d_out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, m) = (self.value(x).rows(), self.value(x).cols());
        if m == 0 {
            return Err(Self::shape_err("softmax_rows", "m >= 1".into(), "0".into()));
        }
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = self.value(x).row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[n, m], data).expect("softmax output shape"),
            Op::SoftmaxRows(x),
            needs,
        ))
    }

    /// Per-row standardization followed by an affine map with `gamma`/`beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Self::shape_err(
                "layer_norm",
                format!("gamma/beta of {d}"),
                format!(
                    "{}/{}",
                    self.value(gamma).len(),
                    self.value(beta).len()
                ),
            ));
        }
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = self.value(x).row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                data.push(self.value(gamma).data()[j] * xhat + self.value(beta).data()[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(&[n, d], data).expect("layer_norm output shape"),
            Op::LayerNorm { x, gamma, beta, eps },
            needs,
        ))
    }

    /// SiLU activation x * sigmoid(x), the FFN nonlinearity.
    pub fn silu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&shape, data).expect("silu output shape"),
            Op::Silu(x),
            needs,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (n, m) = (self.value(x).rows(), self.value(x).cols());
        if start + len > m {
            return Err(Self::shape_err(
                "slice_cols",
                format!("within {m} columns"),
                format!("{start}..{}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&self.value(x).row(i)[start..start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[n, len], data).expect("slice output shape"),
            Op::SliceCols { x, start, len },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat_cols", ">= 1 part".into(), "0".into()));
        }
        let n = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("{n} rows"),
                    format!("{}", self.value(p).rows()),
                ));
            }
        }
        let m: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_vec(&[n, m], data).expect("concat output shape"),
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// Numerically stable mean binary cross entropy over logits.
    pub fn bce_with_logits_mean(
        &mut self,
        logits: Var,
        targets: &[f64],
    ) -> Result<Var, TensorError> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(Self::shape_err(
                "bce_with_logits_mean",
                format!("{n} targets"),
                format!("{}", targets.len()),
            ));
        }
        let mut total = 0.0;
        for (&z, &y) in self.value(logits).data().iter().zip(targets) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::BceWithLogitsMean {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Sum of smooth-L1 over all components of (pred - target).
    pub fn smooth_l1_sum(&mut self, pred: Var, target: &Tensor) -> Result<Var, TensorError> {
        if self.value(pred).shape() != target.shape() {
            return Err(Self::shape_err(
                "smooth_l1_sum",
                format!("{:?}", target.shape()),
                format!("{:?}", self.value(pred).shape()),
            ));
        }
        let mut total = 0.0;
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let d = p - t;
            total += if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            };
        }
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SmoothL1Sum {
                pred,
                target: target.data().to_vec(),
            },
            needs,
        ))
    }

    /// Backpropagate from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = self.nodes.iter().map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().expect("grad present");
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.value(*a).rows(), self.value(*a).cols());
                let m = self.value(*b).cols();
                if self.needs(*a) {
                    // dA = g @ B^T
                    let mut da = vec![0.0; n * k];
                    matmul_transb_into(g.data(), self.value(*b).data(), &mut da, n, m, k);
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(grads, *a, Tensor::from_vec(&shape, da).unwrap());
                }
                if self.needs(*b) {
                    // dB = A^T @ g
                    let mut db = vec![0.0; k * m];
                    matmul_transa_into(self.value(*a).data(), g.data(), &mut db, n, k, m);
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_vec(&shape, db).unwrap());
                }
            }
            Op::MatMulTransB(a, b) => {
                // C = A @ B^T with A[n x k], B[m x k]
                let (n, k) = (self.value(*a).rows(), self.value(*a).cols());
                let m = self.value(*b).rows();
                if self.needs(*a) {
                    // dA = g @ B
                    let mut da = vec![0.0; n * k];
                    matmul_into(g.data(), self.value(*b).data(), &mut da, n, m, k);
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(grads, *a, Tensor::from_vec(&shape, da).unwrap());
                }
                if self.needs(*b) {
                    // dB = g^T @ A
                    let mut db = vec![0.0; m * k];
                    matmul_transa_into(g.data(), self.value(*a).data(), &mut db, n, m, k);
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_vec(&shape, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*row) {
                    let d = self.value(*row).len();
                    let mut dr = vec![0.0; d];
                    for i in 0..g.rows() {
                        for (j, v) in g.row(i).iter().enumerate() {
                            dr[j] += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::from_vec(&shape, dr).unwrap());
                }
            }
            Op::Scale(x, s) => {
                let data = g.data().iter().map(|v| v * s).collect();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(&shape, data).unwrap());
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let (n, m) = (y.rows(), y.cols());
                let mut dx = Vec::with_capacity(n * m);
                for i in 0..n {
                    let y_row = y.row(i);
                    let g_row = g.row(i);
                    let dot: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                    dx.extend(y_row.iter().zip(g_row).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(&shape, dx).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let (n, d) = (xv.rows(), xv.cols());
                let gv = self.value(*gamma);
                let mut dx = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    let row = xv.row(i);
                    let g_row = g.row(i);
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = g_row
                        .iter()
                        .zip(gv.data())
                        .map(|(gj, gam)| gj * gam)
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dgamma[j] += g_row[j] * xhat[j];
                        dbeta[j] += g_row[j];
                        dx[i * d + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, d], dx).unwrap());
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::from_vec(&gshape, dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec(&bshape, dbeta).unwrap());
            }
            Op::Silu(x) => {
                let data = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    })
                    .collect();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(&shape, data).unwrap());
            }
            Op::SliceCols { x, start, len } => {
                let (n, m) = (self.value(*x).rows(), self.value(*x).cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..*len {
                        dx[i * m + start + j] = g.at(i, j);
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(&shape, dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            dp.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        let shape = self.value(p).shape().to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(&shape, dp).unwrap());
                    }
                    offset += w;
                }
            }
            Op::SumAll(x) => {
                let s = g.item();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, s));
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let s = g.item();
                let n = targets.len() as f64;
                let data = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| s * (sigmoid(z) - y) / n)
                    .collect();
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::from_vec(&shape, data).unwrap());
            }
            Op::SmoothL1Sum { pred, target } => {
                let s = g.item();
                let data = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let d = p - t;
                        s * d.clamp(-1.0, 1.0)
                    })
                    .collect();
                let shape = self.value(*pred).shape().to_vec();
                self.accumulate(grads, *pred, Tensor::from_vec(&shape, data).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let s = t.sum_all(x);
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = t.matmul_transb(x, x).unwrap(); // [1x1] = x . x
        let s = t.sum_all(sq);
        let grads = t.backward(s).unwrap();
        let g = grads.get(x).unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            t.backward(x),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn bce_logit_zero_is_ln2() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let l = t.bce_with_logits_mean(z, &[1.0, 0.0]).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
