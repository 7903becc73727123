//! Dense row-major tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable value: a shape plus shared row-major `f64`
//! storage. Every public constructor and operation checks that the result is
//! finite, so a NaN or overflow surfaces at the operation that produced it
//! instead of corrupting a training run silently.
//!
//! [`tape::GradTape`] records primitive operations during a forward pass and
//! replays them in reverse to accumulate adjoints (see the module docs there
//! for the backward-call policy).

pub mod gradcheck;
pub mod tape;

use std::sync::Arc;

use crate::error::{dim_error, Error, Result};

/// Immutable dense tensor of `f64` values in row-major order.
///
/// Cloning is cheap: the storage is reference-counted.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating that `data.len()` matches the shape product,
    /// every extent is positive, and all values are finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::Input(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        let t = Tensor {
            shape,
            data: Arc::new(data),
        };
        t.ensure_finite("new")?;
        Ok(t)
    }

    /// Internal constructor for results whose finiteness must still be
    /// checked by the caller via [`Tensor::ensure_finite`].
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; numel])
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![v; numel])
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_parts(vec![n, n], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..numel).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single value of a scalar (numel-1) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_matrix(&self) -> bool {
        self.rank() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub(crate) fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            let idx = self.data.iter().position(|v| !v.is_finite()).unwrap();
            Err(Error::Contract(format!(
                "non-finite value {} at flat index {idx} produced by {op}",
                self.data[idx]
            )))
        }
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_error(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor::from_parts(self.shape.clone(), data);
        t.ensure_finite(op)?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let t = Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| v * c).collect());
        t.ensure_finite("scale")?;
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect());
        t.ensure_finite("map")?;
        Ok(t)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Standard matrix product. Both operands must be rank 2 with agreeing
    /// inner extents.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.cols() != other.rows() {
            return Err(dim_error("matmul", &self.shape, &other.shape));
        }
        let out = kernels::matmul(
            &self.data,
            self.rows(),
            self.cols(),
            &other.data,
            other.cols(),
        );
        let t = Tensor::from_parts(vec![self.rows(), other.cols()], out);
        t.ensure_finite("matmul")?;
        Ok(t)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::Input(format!(
                "transpose requires a matrix, got shape {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    /// Row-wise softmax with per-row max subtraction, so arbitrarily large
    /// logits cannot overflow.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::Input(format!(
                "softmax_rows requires a matrix, got shape {:?}",
                self.shape
            )));
        }
        self.ensure_finite("softmax_rows input")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            kernels::softmax_row(self.row(i), &mut out[i * n..(i + 1) * n]);
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Scale every row to unit Euclidean norm. Rows with norm below `floor`
    /// are divided by `floor` instead (a zero row stays zero).
    pub fn l2_normalize_rows(&self, floor: f64) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::Input(format!(
                "l2_normalize_rows requires a matrix, got shape {:?}",
                self.shape
            )));
        }
        if floor <= 0.0 {
            return Err(Error::Input(format!(
                "l2_normalize_rows floor must be positive, got {floor}"
            )));
        }
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = self.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let div = if norm < floor { floor } else { norm };
            for j in 0..n {
                out[i * n + j] = row[j] / div;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Rank-3 tensors only: the `b`-th rank-2 slice along the first axis.
    pub fn slice2(&self, b: usize) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::Input(format!(
                "slice2 requires a rank-3 tensor, got shape {:?}",
                self.shape
            )));
        }
        let (l, d) = (self.shape[1], self.shape[2]);
        if b >= self.shape[0] {
            return Err(Error::Input(format!(
                "slice index {b} out of range for extent {}",
                self.shape[0]
            )));
        }
        let data = self.data[b * l * d..(b + 1) * l * d].to_vec();
        Ok(Tensor::from_parts(vec![l, d], data))
    }

    /// Stack rank-2 tensors of identical shape into a rank-3 tensor.
    pub fn stack(slices: &[Tensor]) -> Result<Tensor> {
        if slices.is_empty() {
            return Err(Error::Input("stack of zero tensors".into()));
        }
        let shape = slices[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Input(format!(
                "stack requires rank-2 slices, got shape {shape:?}"
            )));
        }
        let mut data = Vec::with_capacity(slices.len() * slices[0].numel());
        for s in slices {
            s.check_same_shape(slices[0], "stack")?;
            data.extend_from_slice(s.data());
        }
        Ok(Tensor::from_parts(
            vec![slices.len(), shape[0], shape[1]],
            data,
        ))
    }

    /// Lossy narrowing to `f32`, used by the browser demo to keep payloads
    /// small. The engine itself computes in 64-bit.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Shared numeric kernels used by both value-level ops and the tape.
pub(crate) mod kernels {
    /// `a` is m×k row-major, `b` is k×n row-major; returns m×n.
    pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        out
    }

    /// m×k times the transpose of n×k, giving m×n.
    pub fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// Transpose of m×k times k'=m rows... specifically: aᵀ(k×m) @ b(m×n).
    pub fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        out
    }

    pub fn softmax_row(row: &[f64], out: &mut [f64]) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }

    /// log(Σ exp(row)) with max shift.
    pub fn logsumexp(row: &[f64]) -> f64 {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        max + s.ln()
    }

    /// Numerically stable log(1 + e^x).
    pub fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let i2 = Tensor::eye(2);
        let out = i2.matmul(&i2).unwrap();
        assert_eq!(out, i2);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_shifted() {
        let x = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let s = x.softmax_rows().unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap();
        let s = big.softmax_rows().unwrap();
        assert!(s.data()[0] > 1.0 - 1e-12 && s.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let s = x.softmax_rows().unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, &v) in s.data().iter().enumerate() {
            let direct = ((j as f64) + 1.0).exp() / z;
            assert!((v - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_345() {
        let x = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let n = x.l2_normalize_rows(1e-12).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-15);
        assert!((n.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let x = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let n = x.l2_normalize_rows(1e-12).unwrap();
        assert_eq!(n.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        let a = Tensor::matrix(1, 1, vec![1e308]).unwrap();
        assert!(a.matmul(&Tensor::matrix(1, 1, vec![1e308]).unwrap()).is_err());
    }

    #[test]
    fn stack_and_slice_roundtrip() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.slice2(0).unwrap(), a);
        assert_eq!(s.slice2(1).unwrap(), b);
    }
}
