//! Dense row-major arrays of `f64`.
//!
//! Every exported constructor rejects non-finite values, so anything that
//! leaves this module is guaranteed NaN/Inf free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::BadShape {
                op: "RealArray::new",
                expected: format!("product {} == data length {}", n, data.len()),
                got: shape,
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "RealArray::new",
                expected: "positive dimensions".into(),
                got: shape,
            });
        }
        let arr = RealArray { shape, data };
        arr.check_finite("RealArray::new")?;
        Ok(arr)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        RealArray {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        RealArray {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        RealArray {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::BadShape {
                    op: "RealArray::from_rows",
                    expected: format!("rows of equal length {}", c),
                    got: vec![r, row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        RealArray::new(vec![r, c], data)
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a length-1 array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on array of length {}", self.data.len());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.ndim(), 2, "rows() on {}-d array", self.ndim());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.ndim(), 2, "cols() on {}-d array", self.ndim());
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Same data, different shape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        RealArray::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        RealArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &RealArray, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(RealArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &RealArray) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &RealArray) -> f64 {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `c = a @ b` for 2-d arrays, plain ikj loop.
pub fn matmul_raw(a: &RealArray, b: &RealArray) -> Result<RealArray> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::BadShape {
            op: "matmul",
            expected: "2-d operands".into(),
            got: if a.ndim() != 2 { a.shape().to_vec() } else { b.shape().to_vec() },
        });
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    RealArray::new(vec![m, n], out)
}

pub fn transpose_raw(a: &RealArray) -> RealArray {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.at(i, j);
        }
    }
    RealArray {
        shape: vec![n, m],
        data: out,
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_raw(a: &RealArray) -> RealArray {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = a.row_slice(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    RealArray {
        shape: vec![m, n],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(RealArray::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(RealArray::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(RealArray::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let i = RealArray::eye(2);
        let v = RealArray::new(vec![2, 1], vec![2.0, 3.0]).unwrap();
        let out = matmul_raw(&i, &v).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_dot_by_hand() {
        let a = RealArray::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = RealArray::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let out = matmul_raw(&a, &b).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = RealArray::zeros(&[2, 3]);
        let b = RealArray::zeros(&[4, 2]);
        let err = matmul_raw(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform() {
        let a = RealArray::zeros(&[1, 3]);
        let s = softmax_rows_raw(&a);
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}
