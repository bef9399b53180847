//! Dense row-major tensors over a [`Real`] scalar.
//!
//! Rank 1 and rank 2 are the only shapes the stack needs. Every operation
//! that produces a tensor checks the result for NaN/Inf: non-finite values
//! are an error state, never silently propagated.

use crate::num::Real;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Broadcast relationship for an elementwise op.
///
/// Shapes must be equal, or one operand is a length-`c` vector applied to
/// every row of an `[r, c]` matrix (broadcast along the leading dim).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    Equal,
    /// rhs is a row vector broadcast over lhs rows
    RhsRow,
    /// lhs is a row vector broadcast over rhs rows
    LhsRow,
}

pub fn broadcast_plan(lhs: &[usize], rhs: &[usize], op: &'static str) -> TensorResult<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Equal);
    }
    let cols = |s: &[usize]| match s {
        [c] => Some(*c),
        [1, c] => Some(*c),
        _ => None,
    };
    if let (&[_, c], Some(v)) = (lhs, cols(rhs)) {
        if c == v {
            return Ok(Broadcast::RhsRow);
        }
    }
    if let (Some(v), &[_, c]) = (cols(lhs), rhs) {
        if c == v {
            return Ok(Broadcast::LhsRow);
        }
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> TensorResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::LengthMismatch {
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

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> TensorResult<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::Contract {
                    op: "from_rows",
                    msg: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows/cols of a rank-2 tensor; a rank-1 tensor counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.as_slice() {
            [_, _] => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.as_slice() {
            [_, c] => *c,
            [n] => *n,
            _ => 0,
        }
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn at(&self, i: usize) -> S {
        self.data[i]
    }

    pub fn at2(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, i: usize, v: S) {
        self.data[i] = v;
    }

    pub fn set2(&mut self, r: usize, c: usize, v: S) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> TensorResult<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::LengthMismatch {
                op: "reshaped",
                len: self.data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn offset(&self, c: S) -> Self {
        self.map(|v| v + c)
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> S {
        if self.data.is_empty() {
            S::zero()
        } else {
            self.sum() / S::of(self.data.len() as f64)
        }
    }

    pub fn dot(&self, other: &Self) -> TensorResult<S> {
        if self.len() != other.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b))
    }

    /// Elementwise combine with leading-dim broadcast.
    pub fn zip(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> TensorResult<Self> {
        let plan = broadcast_plan(&self.shape, &other.shape, op)?;
        let out = match plan {
            Broadcast::Equal => Tensor {
                shape: self.shape.clone(),
                data: self
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            },
            Broadcast::RhsRow => {
                let c = other.data.len();
                Tensor {
                    shape: self.shape.clone(),
                    data: self
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &a)| f(a, other.data[i % c]))
                        .collect(),
                }
            }
            Broadcast::LhsRow => {
                let c = self.data.len();
                Tensor {
                    shape: other.shape.clone(),
                    data: other
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &b)| f(self.data[i % c], b))
                        .collect(),
                }
            }
        };
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> TensorResult<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> TensorResult<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> TensorResult<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn transpose(&self) -> TensorResult<Self> {
        match *self.shape.as_slice() {
            [r, c] => {
                let mut out = Tensor::zeros(&[c, r]);
                for i in 0..r {
                    for j in 0..c {
                        out.data[j * r + i] = self.data[i * c + j];
                    }
                }
                Ok(out)
            }
            [n] => self.reshaped(&[n, 1]),
            _ => Err(TensorError::Contract {
                op: "transpose",
                msg: format!("unsupported rank {}", self.rank()),
            }),
        }
    }

    /// Matrix product. `[m,k]·[k,n] -> [m,n]`; `[m,k]·[k] -> [m]`.
    pub fn matmul(&self, other: &Self) -> TensorResult<Self> {
        let (m, k) = match self.shape.as_slice() {
            &[m, k] => (m, k),
            _ => {
                return Err(TensorError::Contract {
                    op: "matmul",
                    msg: "lhs must be rank 2".into(),
                })
            }
        };
        match *other.shape.as_slice() {
            [k2, n] => {
                if k != k2 {
                    return Err(TensorError::ShapeMismatch {
                        op: "matmul",
                        lhs: self.shape.clone(),
                        rhs: other.shape.clone(),
                    });
                }
                let mut out = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for p in 0..k {
                        let a = self.data[i * k + p];
                        if a == S::zero() {
                            continue;
                        }
                        let row = &other.data[p * n..(p + 1) * n];
                        let dst = &mut out.data[i * n..(i + 1) * n];
                        for (d, &b) in dst.iter_mut().zip(row) {
                            *d = *d + a * b;
                        }
                    }
                }
                Ok(out)
            }
            [k2] => {
                if k != k2 {
                    return Err(TensorError::ShapeMismatch {
                        op: "matmul",
                        lhs: self.shape.clone(),
                        rhs: other.shape.clone(),
                    });
                }
                let mut out = Tensor::zeros(&[m]);
                for i in 0..m {
                    let row = &self.data[i * k..(i + 1) * k];
                    let mut acc = S::zero();
                    for (&a, &b) in row.iter().zip(&other.data) {
                        acc = acc + a * b;
                    }
                    out.data[i] = acc;
                }
                Ok(out)
            }
            _ => Err(TensorError::Contract {
                op: "matmul",
                msg: "rhs must be rank 1 or 2".into(),
            }),
        }
    }

    /// Outer product of two rank-1 tensors: `[m] ⊗ [n] -> [m,n]`.
    pub fn outer(&self, other: &Self) -> TensorResult<Self> {
        if self.rank() != 1 || other.rank() != 1 {
            return Err(TensorError::Contract {
                op: "outer",
                msg: "operands must be rank 1".into(),
            });
        }
        let (m, n) = (self.len(), other.len());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                out.data[i * n + j] = self.data[i] * other.data[j];
            }
        }
        Ok(out)
    }

    /// Sum over rows, producing a length-`cols` vector.
    pub fn sum_rows(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c]);
        for i in 0..r {
            for j in 0..c {
                out.data[j] = out.data[j] + self.data[i * c + j];
            }
        }
        out
    }

    pub fn widen_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.widen()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn matmul_identity() {
        let i2 = T::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = T::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = T::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = T::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let a = T::zeros(&[2, 3]);
        let b = T::zeros(&[2, 2]);
        assert!(matches!(
            a.matmul(&b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn broadcast_row_over_matrix() {
        let m = T::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = T::from_vec(&[2], vec![10.0, 100.0]).unwrap();
        let out = m.mul(&v).unwrap();
        assert_eq!(out.as_slice(), &[10.0, 200.0, 30.0, 400.0]);
    }

    #[test]
    fn elementwise_hand_example() {
        let a = T::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = T::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().as_slice(), &[3.0, 8.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = T::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let att = a.transpose().unwrap().transpose().unwrap();
        assert_eq!(a, att);
    }

    #[test]
    fn generic_f32_kernel_smoke() {
        let a = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[11.0f32]);
    }
}
