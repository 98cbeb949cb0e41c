//! Dense row-major `f64` arrays and a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain value type with the eager kernels the model needs.
//! [`Tape`] records those kernels as a Wengert list so a scalar output can be
//! differentiated with respect to every leaf marked as a parameter.

mod ops;
mod tape;

pub use ops::{grouped_attention_forward, AttentionForward};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Floor applied to row norms before dividing.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(
                op,
                format!("expected a matrix, got shape {s:?}"),
            )),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Selects rows by index (indices may repeat).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2("select_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::dim("select_rows", format!("row {i} out of {r}")));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), c], data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}] inner extents differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = other.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("[{m}x{k}] x [{n}x{k2}]ᵀ inner extents differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, n) = other.dims2("matmul_tn")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_tn",
                format!("[{k}x{m}]ᵀ x [{k2}x{n}] inner extents differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("softmax_rows")?;
        let mut out = self.data.clone();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![r, c], out)
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("log_softmax_rows")?;
        let mut out = self.data.clone();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Tensor::new(vec![r, c], out)
    }

    /// Divides each row by `max(‖row‖, NORM_FLOOR)`; zero rows stay zero.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("l2_normalize_rows")?;
        let mut out = self.data.clone();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = row
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        Tensor::new(vec![r, c], out)
    }

    pub fn sum_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("sum_rows")?;
        if r == 0 {
            return Err(Error::dim("sum_rows", "no rows"));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Ok(Tensor::vector(out))
    }

    pub fn mean_rows(&self) -> Result<Tensor> {
        let (r, _) = self.dims2("mean_rows")?;
        if r == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let s = self.sum_rows()?;
        Ok(s.map(|v| v / r as f64))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let z = m(&[&[0.0, 0.0]]).matmul(&m(&[&[5.0], &[7.0]])).unwrap();
        assert_eq!(z.data(), &[0.0]);
        let p = a.matmul(&m(&[&[5.0, 6.0], &[7.0, 8.0]])).unwrap();
        assert_eq!(p.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = m(&[&[1.0, 2.0]]).matmul(&m(&[&[1.0, 2.0]])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn transposed_products_agree() {
        let a = m(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = m(&[&[0.5, 2.0, 1.0], &[-1.0, 0.0, 2.0]]);
        let nt = a.matmul_nt(&b).unwrap();
        assert_eq!(nt, a.matmul(&b.transpose().unwrap()).unwrap());
        let tn = a.matmul_tn(&b).unwrap();
        assert_eq!(tn, a.transpose().unwrap().matmul(&b).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let s = m(&[&[0.0, 0.0, 0.0]]).softmax_rows().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = m(&[&[1000.0, 1000.0]]).softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = m(&[&[0.0, 3f64.ln()]]).softmax_rows().unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn normalize_examples() {
        let n = m(&[&[3.0, 4.0]]).l2_normalize_rows().unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-15 && (n.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(
            m(&[&[1.0, 0.0]]).l2_normalize_rows().unwrap().data(),
            &[1.0, 0.0]
        );
        assert_eq!(
            m(&[&[0.0, 0.0]]).l2_normalize_rows().unwrap().data(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn row_reductions() {
        assert_eq!(
            m(&[&[2.0, 4.0], &[4.0, 8.0]]).mean_rows().unwrap().data(),
            &[3.0, 6.0]
        );
        assert_eq!(
            m(&[&[1.0, 1.0], &[2.0, 2.0]]).sum_rows().unwrap().data(),
            &[3.0, 3.0]
        );
        assert_eq!(m(&[&[1.5, -2.0]]).mean_rows().unwrap().data(), &[1.5, -2.0]);
        let empty = Tensor::new(vec![0, 2], vec![]).unwrap();
        assert!(matches!(empty.mean_rows(), Err(Error::Dimension { .. })));
    }

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
