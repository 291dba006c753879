use serde::{Deserialize, Serialize};

use super::NnError;
use crate::scalar::Scalar;

/// Dense row-major tensor of rank 0 to 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, NnError> {
        if shape.len() > 3 {
            return Err(NnError::Shape {
                op: "tensor",
                detail: format!("rank {} exceeds 3", shape.len()),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// `[rows.len(), cols]` matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NnError::Shape {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Self::from_vec(&[rows.len(), cols], rows.concat())
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

    /// Rows and columns of a rank-2 tensor (rank 1 is a single row).
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n, m] => (*n, *m),
            [m] => (1, *m),
            [] => (1, 1),
            s => (s[0], s[1..].iter().product()),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, m) = self.dims2();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        let (_, m) = self.dims2();
        self.data[i * m + j]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NnError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// `a [n,k] x b [k,m]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (n, k) = a.dims2();
    let (k2, m) = b.dims2();
    if k != k2 {
        return Err(NnError::Shape {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = vec![T::zero(); n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Tensor::from_vec(&[n, m], out)
}

/// `a^T [k,n]^T x b [k,m]` = `[n,m]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, n) = a.dims2();
    let (_, m) = b.dims2();
    let mut out = vec![T::zero(); n * m];
    let (ad, bd) = (a.data(), b.data());
    for p in 0..k {
        let brow = &bd[p * m..(p + 1) * m];
        for i in 0..n {
            let api = ad[p * n + i];
            if api == T::zero() {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + api * bv;
            }
        }
    }
    Tensor { shape: vec![n, m], data: out }
}

/// `a [n,k] x b^T [m,k]^T` = `[n,m]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, k) = a.dims2();
    let (m, _) = b.dims2();
    let mut out = vec![T::zero(); n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor { shape: vec![n, m], data: out }
}
