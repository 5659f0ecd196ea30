//! Row-major dense tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// `[rows.len(), cols]` matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension for matrices.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// `[r, c]` with columns from `self` followed by columns of `other`.
    pub fn concat_cols(&self, other: &Tensor<T>) -> Result<Self> {
        if self.rows() != other.rows() {
            return Err(Error::Shape(format!(
                "concat_cols rows {} vs {}",
                self.rows(),
                other.rows()
            )));
        }
        let (ca, cb) = (self.cols(), other.cols());
        let mut out = Self::zeros(&[self.rows(), ca + cb]);
        for i in 0..self.rows() {
            let row = out.row_mut(i);
            row[..ca].copy_from_slice(self.row(i));
            row[ca..].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    /// Splits columns at `at`.
    pub fn split_cols(&self, at: usize) -> (Self, Self) {
        let c = self.cols();
        let r = self.rows();
        let mut a = Self::zeros(&[r, at]);
        let mut b = Self::zeros(&[r, c - at]);
        for i in 0..r {
            a.row_mut(i).copy_from_slice(&self.row(i)[..at]);
            b.row_mut(i).copy_from_slice(&self.row(i)[at..]);
        }
        (a, b)
    }

    /// Stacks rows of `self` on top of rows of `other`.
    pub fn concat_rows(&self, other: &Tensor<T>) -> Result<Self> {
        if self.cols() != other.cols() && !self.is_empty() && !other.is_empty() {
            return Err(Error::Shape("concat_rows column mismatch".into()));
        }
        let cols = if self.is_empty() { other.cols() } else { self.cols() };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let rows = data.len() / cols.max(1);
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut out = Self::zeros(&[idx.len(), c]);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }
}

/// `a [n,k] @ b [k,m]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape(format!("matmul [{n},{k}] x [{k2},{m}]")));
    }
    let mut out = Tensor::zeros(&[n, m]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..n {
        let orow = &mut od[i * m..(i + 1) * m];
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ b` for `a [n,k]`, `b [n,m]`, giving `[k,m]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = (a.rows(), a.cols());
    let (n2, m) = (b.rows(), b.cols());
    if n != n2 {
        return Err(Error::Shape(format!("matmul_tn [{n},{k}]ᵀ x [{n2},{m}]")));
    }
    let mut out = Tensor::zeros(&[k, m]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for r in 0..n {
        let brow = &bd[r * m..(r + 1) * m];
        for (p, &av) in ad[r * k..(r + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut od[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a [n,k] @ bᵀ` for `b [m,k]`, giving `[n,m]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = (a.rows(), a.cols());
    let (m, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape(format!("matmul_nt [{n},{k}] x [{m},{k2}]ᵀ")));
    }
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            let brow = b.row(j);
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out.data_mut()[i * m + j] = s;
        }
    }
    Ok(out)
}
