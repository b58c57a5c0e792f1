use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arithmetic precision of a run.
///
/// Values are always held as `f64`; in `F32` mode every stored result is
/// rounded to the nearest `f32`, which gives single-precision semantics
/// while sharing one code path with the 64-bit gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => v as f32 as f64,
            Dtype::F64 => v,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == Dtype::F32 {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading axes (the tensor viewed as a matrix).
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn rounded(mut self, dtype: Dtype) -> Tensor {
        dtype.round_slice(&mut self.data);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose", format!("rank {}", self.shape.len())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        super::kernels::matmul(self, other, false, false)
    }

    /// Rows selected by index, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::shape("gather_rows", format!("row {i} of {r}")));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), c, out)
    }

    /// Mean along `axis` of a rank-2 tensor; the reduced axis is kept with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("mean_axis")?;
        match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(self.row(i)) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                Tensor::matrix(1, c, out)
            }
            1 => {
                let out = (0..r)
                    .map(|i| self.row(i).iter().sum::<f64>() / c as f64)
                    .collect();
                Tensor::matrix(r, 1, out)
            }
            _ => Err(Error::shape("mean_axis", format!("axis {axis}"))),
        }
    }

    /// Population variance along `axis` of a rank-2 tensor.
    pub fn var_axis(&self, axis: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("var_axis")?;
        let mean = self.mean_axis(axis)?;
        match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (j, x) in self.row(i).iter().enumerate() {
                        let d = x - mean.data[j];
                        out[j] += d * d;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                Tensor::matrix(1, c, out)
            }
            _ => {
                let out = (0..r)
                    .map(|i| {
                        let m = mean.data[i];
                        self.row(i).iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64
                    })
                    .collect();
                Tensor::matrix(r, 1, out)
            }
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn f32_rounding() {
        let x = 0.1f64;
        assert_eq!(Dtype::F32.round(x), 0.1f32 as f64);
        assert_eq!(Dtype::F64.round(x), 0.1);
    }

    #[test]
    fn mean_and_var() {
        let t = Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(t.mean_axis(0).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(t.mean_axis(1).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(t.var_axis(0).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(t.var_axis(1).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor::matrix(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(t.check_finite("x"), Err(Error::NonFinite(_))));
    }
}
