use nalgebra::{DMatrix, DVector};

use crate::Scalar;

/// Compressed sparse rows; used for the matrix-vector products inside the
/// iteration loop.
#[derive(Clone, Debug)]
pub(crate) struct Csr<T: Scalar> {
    pub nrows: usize,
    pub ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    pub fn from_dense(m: &DMatrix<T>) -> Self {
        let mut indptr = Vec::with_capacity(m.nrows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != T::zero() {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            indptr,
            indices,
            values,
        }
    }

    /// `out = A x`
    pub fn mul_into(&self, x: &DVector<T>, out: &mut DVector<T>) {
        for i in 0..self.nrows {
            let mut acc = T::zero();
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            out[i] = acc;
        }
    }

    /// `out = A' y`
    pub fn tmul_into(&self, y: &DVector<T>, out: &mut DVector<T>) {
        out.fill(T::zero());
        for i in 0..self.nrows {
            let yi = y[i];
            if yi == T::zero() {
                continue;
            }
            for k in self.indptr[i]..self.indptr[i + 1] {
                out[self.indices[k]] += self.values[k] * yi;
            }
        }
    }

    pub fn mul(&self, x: &DVector<T>) -> DVector<T> {
        let mut out = DVector::zeros(self.nrows);
        self.mul_into(x, &mut out);
        out
    }

    pub fn tmul(&self, y: &DVector<T>) -> DVector<T> {
        let mut out = DVector::zeros(self.ncols);
        self.tmul_into(y, &mut out);
        out
    }
}

#[inline]
pub(crate) fn norm_inf<T: Scalar>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}
