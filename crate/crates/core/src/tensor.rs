//! Dense row-major tensors and the raw kernels the tape is built on.
//!
//! The scalar type is a build-wide switch: `f64` by default, `f32` with the
//! `f32` cargo feature.

use crate::error::{Error, Result};

#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Size in bytes of one stored scalar.
pub const SCALAR_BYTES: usize = std::mem::size_of::<Scalar>();

/// Dense N-dimensional array with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
    pub grad: Option<Vec<Scalar>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Scalar>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    /// Scalar (rank-0 stored as shape `[1]`).
    pub fn scalar(value: Scalar) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_rows(rows: &[&[Scalar]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("dims2", &self.shape, &[0, 0])),
        }
    }

    /// Number of vectors along the last axis and the last extent.
    pub fn rows_last(&self) -> (usize, usize) {
        let last = *self.shape.last().unwrap_or(&1);
        (self.data.len() / last.max(1), last)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), numel);
        }
        Ok(self)
    }

    pub fn item(&self) -> Result<Scalar> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn row(&self, i: usize) -> &[Scalar] {
        let (_, c) = self.rows_last();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            Layout::N,
            &other.data,
            Layout::N,
            &mut out,
            0.0,
        );
        Tensor::new(&[m, n], out)
    }
}

/// Storage layout of a gemm operand relative to its logical shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored as the logical row-major matrix.
    N,
    /// Stored row-major as the transpose of the logical matrix.
    T,
}

/// `c = beta * c + a · b` with `a` logically `m×k` and `b` logically `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Scalar],
    la: Layout,
    b: &[Scalar],
    lb: Layout,
    c: &mut [Scalar],
    beta: Scalar,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = match la {
        Layout::N => (k as isize, 1),
        Layout::T => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::N => (n as isize, 1),
        Layout::T => (1, k as isize),
    };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // buffers whose lengths are asserted on entry.
    unsafe {
        raw_gemm(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as backend_gemm;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as backend_gemm;

#[allow(clippy::too_many_arguments)]
unsafe fn raw_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: *const Scalar,
    rsa: isize,
    csa: isize,
    b: *const Scalar,
    rsb: isize,
    csb: isize,
    beta: Scalar,
    c: *mut Scalar,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    backend_gemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[Scalar], r: usize, c: usize) -> Vec<Scalar> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn identity_matmul() {
        let i2 = Tensor::eye(2);
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(i2.matmul(&x).unwrap().data(), x.data());
    }

    #[test]
    fn dot_product_matmul() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_layouts_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<Scalar> = (0..m * k).map(|i| (i as Scalar * 0.37).sin()).collect();
        let b: Vec<Scalar> = (0..k * n).map(|i| (i as Scalar * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (aa, la) in [(&a, Layout::N), (&at, Layout::T)] {
            for (bb, lb) in [(&b, Layout::N), (&bt, Layout::T)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, la, bb, lb, &mut c, 0.0);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        gemm(1, 2, 1, &a, Layout::N, &b, Layout::N, &mut c, 1.0);
        assert_eq!(c[0], 21.0);
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }
}
