//! Dense row-major f64 tensors.
//!
//! Storage supports any rank; the math methods operate on rank-2 views since
//! every model computation here is a sequence of matrix ops. The same slice
//! kernels back both these forward-only methods and the autodiff graph, so a
//! value computed either way is bit-identical.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha20Rng;

use crate::{rng, shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Accumulated gradient, same length as `data`. Present only while a
    /// training loop is harvesting gradients for this tensor.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![x],
            grad: None,
        }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha20Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: rng::normal_vec(rng, n, std),
            grad: None,
        }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows/cols of a rank-1 or rank-2 tensor; rank-1 counts as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            r => Err(shape_err!("expected rank <= 2, got rank {r}")),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let (_, cols) = self.dims2().expect("at2 on rank > 2");
        self.data[i * cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.dims2().expect("row on rank > 2");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Allocate (or clear) the gradient buffer.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul(&self.data, &other.data, &mut out.data, m, k, n);
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = Tensor::zeros(&[n, m]);
        kernels::transpose(&self.data, &mut out.data, m, n);
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err!("add {:?} vs {:?}", self.shape, other.shape));
        }
        let mut out = self.clone();
        out.grad = None;
        for (a, b) in out.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err!("sub {:?} vs {:?}", self.shape, other.shape));
        }
        let mut out = self.clone();
        out.grad = None;
        for (a, b) in out.data.iter_mut().zip(other.data.iter()) {
            *a -= b;
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let mut out = self.clone();
        out.grad = None;
        out.data.iter_mut().for_each(|x| *x *= s);
        out
    }

    /// Row-wise softmax. Entries of `-inf` get probability zero; a row of all
    /// `-inf` is rejected.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = Tensor::zeros(&self.shape);
        kernels::softmax_rows(&self.data, &mut out.data, m, n)?;
        Ok(out)
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = Tensor::zeros(&self.shape);
        kernels::log_softmax_rows(&self.data, &mut out.data, m, n)?;
        Ok(out)
    }

    /// Per-row layer normalization with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if gamma.numel() != n || beta.numel() != n {
            return Err(shape_err!(
                "layer_norm width {n} vs gamma {} beta {}",
                gamma.numel(),
                beta.numel()
            ));
        }
        let mut out = Tensor::zeros(&self.shape);
        kernels::layer_norm(&self.data, &gamma.data, &beta.data, eps, m, n, &mut out.data);
        Ok(out)
    }

    /// GELU (tanh approximation) applied elementwise.
    pub fn gelu(&self) -> Tensor {
        let mut out = self.clone();
        out.grad = None;
        out.data.iter_mut().for_each(|x| *x = kernels::gelu(*x));
        out
    }

    /// Rows scaled to unit L2 norm; `eps` guards zero rows.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = Tensor::zeros(&self.shape);
        kernels::l2_normalize_rows(&self.data, eps, m, n, &mut out.data);
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }
}

/// Raw slice kernels shared by [`Tensor`] and the autodiff graph.
pub(crate) mod kernels {
    use super::*;
    use crate::fm;

    /// c += a @ b with a: m x k, b: k x n.
    pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// c += a^T @ b with a: m x k, b: m x n, c: k x n.
    pub fn matmul_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// c += a @ b^T with a: m x k, b: n x k, c: m x n.
    pub fn matmul_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (av, bv) in arow.iter().zip(brow.iter()) {
                    acc += av * bv;
                }
                c[i * n + j] += acc;
            }
        }
    }

    pub fn transpose(a: &[f64], out: &mut [f64], m: usize, n: usize) {
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
    }

    pub fn softmax_rows(x: &[f64], out: &mut [f64], m: usize, n: usize) -> Result<()> {
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::Numerical(String::from(
                    "softmax row with every entry -inf",
                )));
            }
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row.iter()) {
                let e = if v == f64::NEG_INFINITY {
                    0.0
                } else {
                    fm::exp(v - mx)
                };
                *o = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        Ok(())
    }

    pub fn log_softmax_rows(x: &[f64], out: &mut [f64], m: usize, n: usize) -> Result<()> {
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let lse = fm::logsumexp(row);
            if !lse.is_finite() {
                return Err(Error::Numerical(String::from(
                    "log_softmax row with non-finite logsumexp",
                )));
            }
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row.iter()) {
                *o = v - lse;
            }
        }
        Ok(())
    }

    pub fn layer_norm(
        x: &[f64],
        gamma: &[f64],
        beta: &[f64],
        eps: f64,
        m: usize,
        n: usize,
        out: &mut [f64],
    ) {
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let (mean, rstd) = layer_norm_stats(row, eps);
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
            }
        }
    }

    pub fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let mut var = 0.0;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        (mean, 1.0 / fm::sqrt(var + eps))
    }

    /// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(x: f64) -> f64 {
        let u = GELU_A * (x + GELU_B * x * x * x);
        0.5 * x * (1.0 + fm::tanh(u))
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let u = GELU_A * (x + GELU_B * x * x * x);
        let t = fm::tanh(u);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
    }

    const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const GELU_B: f64 = 0.044715;

    pub fn l2_normalize_rows(x: &[f64], eps: f64, m: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let norm = row_norm(row).max(eps);
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
    }

    pub fn row_norm(row: &[f64]) -> f64 {
        let mut s = 0.0;
        for &v in row {
            s += v * v;
        }
        fm::sqrt(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at2(i, p) * b.at2(p, j);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let s = crate::rng::Streams::new(11);
        let mut rng = s.stream("t");
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 5, 5), (7, 2, 9), (1, 8, 3)] {
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let got = a.matmul(&b).unwrap();
            let want = naive_matmul(&a, &b);
            for (g, w) in got.data().iter().zip(want.data().iter()) {
                assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_handle_neg_inf() {
        let x = Tensor::from_vec(
            &[2, 3],
            alloc::vec![1.0, 2.0, 3.0, f64::NEG_INFINITY, 0.0, 0.0],
        )
        .unwrap();
        let p = x.softmax_rows().unwrap();
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.at2(1, 0), 0.0);
        assert!((p.at2(1, 1) - 0.5).abs() < 1e-12);
        let all_masked = Tensor::from_vec(&[1, 2], alloc::vec![f64::NEG_INFINITY; 2]).unwrap();
        assert!(all_masked.softmax_rows().is_err());
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let s = crate::rng::Streams::new(3);
        let mut rng = s.stream("ln");
        let x = Tensor::randn(&[4, 16], 2.5, &mut rng);
        let gamma = Tensor::full(&[16], 1.0);
        let beta = Tensor::zeros(&[16]);
        let y = x.layer_norm(&gamma, &beta, 1e-6).unwrap();
        for i in 0..4 {
            let row = y.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(kernels::gelu(0.0), 0.0);
        assert!((kernels::gelu(3.0) - 2.9964).abs() < 1e-3);
        let h = 1e-6;
        for &x in &[-2.0, -0.5, 0.3, 1.7] {
            let fd = (kernels::gelu(x + h) - kernels::gelu(x - h)) / (2.0 * h);
            assert!((kernels::gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let x = Tensor::from_vec(&[2, 2], alloc::vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let y = x.l2_normalize_rows(1e-12).unwrap();
        assert!((kernels::row_norm(y.row(0)) - 1.0).abs() < 1e-12);
        assert_eq!(y.row(1), &[0.0, 0.0]);
    }
}
