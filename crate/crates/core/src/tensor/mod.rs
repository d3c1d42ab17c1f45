//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the plain value container (row-major data plus an optional
//! gradient slot); [`graph::Graph`] is the computation tape that records
//! operations and replays them backwards. Parameters live outside the graph
//! as `Tensor`s and are bound into it fresh for every forward/backward pass.

pub mod gradcheck;
pub mod graph;
pub mod special;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. The gradient slot is populated by pulling
/// gradients out of a [`graph::Graph`] after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::Parameter(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// 2D convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parameter("ragged row lengths".into()));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self::from_vec(vec![m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows when interpreted as 2D.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when interpreted as 2D.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::from_usize_exact(self.numel())
    }
}

/// `C[m,n] = A[m,p] · B[p,n]`
pub(crate) fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, p: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        for k in 0..p {
            let aik = a[i * p + k];
            let brow = &b[k * n..(k + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// `C[m,n] = A · Bᵀ` with `A` stored `[m,p]` and `B` stored `[n,p]`.
pub(crate) fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, p: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let mut s = F::zero();
            for k in 0..p {
                s += arow[k] * brow[k];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `C[p,n] = Aᵀ · B` with `A` stored `[m,p]`, `B` stored `[m,n]`.
pub(crate) fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, p: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); p * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            let crow = &mut c[k * n..(k + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_extents() {
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn matmul_kernels_agree() {
        // A [2,3], B [3,2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let nn = matmul_nn(&a, &b, 2, 3, 2);
        assert_eq!(nn, vec![58.0, 64.0, 139.0, 154.0]);

        // Bᵀ stored as [2,3]
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let nt = matmul_nt(&a, &bt, 2, 3, 2);
        assert_eq!(nt, nn);

        // Aᵀ·B with A [2,3] and B [2,2]: result [3,2]
        let b2 = [7.0, 8.0, 9.0, 10.0];
        let tn = matmul_tn(&a, &b2, 2, 3, 2);
        assert_eq!(tn, vec![43.0, 48.0, 59.0, 66.0, 75.0, 84.0]);
    }
}
