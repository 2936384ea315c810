//! Dense row-major tensors of `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};

/// A dense tensor with row-major storage.
///
/// Scalars are represented with shape `[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::shape(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(AutodiffError::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", values.len()),
            ));
        }
        Ok(Self { shape, values })
    }

    /// Builds a rank-2 tensor from rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let values = rows.iter().flatten().copied().collect();
        Self::new(vec![r, c], values).expect("non-empty rows")
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![v; n],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let cols = self.last_dim();
        self.values[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.last_dim();
        &self.values[r * cols..(r + 1) * cols]
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(AutodiffError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transposed(&self) -> Self {
        let (r, c) = self.dims2().expect("transpose needs rank 2");
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            values: out,
        }
    }

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self
            .dims2()
            .ok_or_else(|| AutodiffError::shape("matmul", "left operand must be rank 2"))?;
        let (k2, n) = other
            .dims2()
            .ok_or_else(|| AutodiffError::shape("matmul", "right operand must be rank 2"))?;
        if k != k2 {
            return Err(AutodiffError::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.values, &other.values, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            values: out,
        })
    }
}

// All three kernels accumulate into `out` (beta = 1) and differ only in the
// strides used to read the operands.

/// `out += a[m,k] * b[k,n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k, 1), b, (n, 1), out, m, k, n);
}

/// `out += a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k, 1), b, (1, k), out, m, k, n);
}

/// `out += a[k,m]^T * b[k,n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (1, m), b, (n, 1), out, m, k, n);
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the assertion above bounds every index reachable through the
    // given dimensions and strides.
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
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn transposed_helpers_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.0, -2.0]]);
        let mut nt = vec![0.0; 4];
        matmul_nt_into(a.values(), b.values(), &mut nt, 2, 3, 2);
        let expect = a.matmul(&b.transposed()).unwrap();
        assert_eq!(nt, expect.values());

        let mut tn = vec![0.0; 9];
        matmul_tn_into(a.values(), b.values(), &mut tn, 3, 2, 3);
        let expect = a.transposed().matmul(&b).unwrap();
        assert_eq!(tn, expect.values());
    }
}
