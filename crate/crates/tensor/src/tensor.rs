use crate::error::TensorError;

/// Dense row-major tensor of 64-bit floats.
///
/// Most of the network runs on rank-2 tensors (token matrices); images and
/// feature maps use rank-3 `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::BadData {
                op: "from_vec",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Single element of a scalar (length-1) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let c = self.cols();
        self.data[row * c + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain (untaped) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: format!("[{n}x{k}] @ [{k}x_]"),
                got: format!("[{k2}x{m}]"),
            });
        }
        let mut out = vec![0.0; n * m];
        matmul_into(&self.data, &other.data, &mut out, n, k, m);
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }
}

/// out[n x m] += a[n x k] @ b[k x m]; `out` must be zeroed by the caller.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// out[n x m] += a[n x k] @ b[m x k]^T.
pub(crate) fn matmul_transb_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    n: usize,
    k: usize,
    m: usize,
) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * m + j] += acc;
        }
    }
}

/// out[k x m] += a[n x k]^T @ b[n x m].
pub(crate) fn matmul_transa_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    n: usize,
    k: usize,
    m: usize,
) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let o_row = &mut out[p * m..(p + 1) * m];
            for (o, &b_ij) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_ij;
            }
        }
    }
}
