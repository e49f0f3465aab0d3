use rand::Rng;

use super::NumericsError;

/// Dense row-major `f64` tensor. The empty shape `[]` is a scalar holding one
/// element; otherwise `data.len()` equals the product of the dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NumericsError> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(NumericsError::InvalidShape {
                op: "new",
                shape: shape.to_vec(),
                why: "element count does not match shape",
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Uniform values in `[lo, hi)`, consumed from `rng` in row-major order.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| lo + rng.random::<f64>() * (hi - lo)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), NumericsError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
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
    ) -> Result<Tensor, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor, NumericsError> {
        let want: usize = shape.iter().product();
        if want != self.data.len() {
            return Err(NumericsError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                why: "element count does not match shape",
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Sum of squares of every element.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    // ── matrix products ────────────────────────────────────────────────

    /// `A · B`. When `b` is 2-D it acts as a weight shared over all leading
    /// dimensions of `a`; otherwise both operands carry identical leading
    /// batch dimensions.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor, NumericsError> {
        if b.shape.len() == 2 {
            let (k, n) = (b.shape[0], b.shape[1]);
            if self.shape.is_empty() || *self.shape.last().unwrap() != k {
                return Err(NumericsError::ShapeMismatch {
                    op: "matmul",
                    lhs: self.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let rows = self.data.len() / k;
            let mut out = vec![0.0; rows * n];
            mm_acc(&self.data, &b.data, rows, k, n, &mut out);
            let mut shape = self.shape.clone();
            *shape.last_mut().unwrap() = n;
            return Ok(Tensor { shape, data: out });
        }
        let (pre, m, k) = split_matrix_dims("matmul", &self.shape)?;
        let (pre_b, kb, n) = split_matrix_dims("matmul", &b.shape)?;
        if pre != pre_b || k != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let batch: usize = pre.iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            mm_acc(
                &self.data[i * m * k..(i + 1) * m * k],
                &b.data[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = pre.to_vec();
        shape.push(m);
        shape.push(n);
        Ok(Tensor { shape, data: out })
    }

    /// `A · Bᵀ` over the last two dimensions, with the same sharing rule for
    /// 2-D `b` as [`Tensor::matmul`].
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor, NumericsError> {
        if b.shape.len() == 2 {
            let (n, k) = (b.shape[0], b.shape[1]);
            if self.shape.is_empty() || *self.shape.last().unwrap() != k {
                return Err(NumericsError::ShapeMismatch {
                    op: "matmul_nt",
                    lhs: self.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let rows = self.data.len() / k;
            let mut out = vec![0.0; rows * n];
            mm_nt(&self.data, &b.data, rows, k, n, &mut out);
            let mut shape = self.shape.clone();
            *shape.last_mut().unwrap() = n;
            return Ok(Tensor { shape, data: out });
        }
        let (pre, m, k) = split_matrix_dims("matmul_nt", &self.shape)?;
        let (pre_b, n, kb) = split_matrix_dims("matmul_nt", &b.shape)?;
        if pre != pre_b || k != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let batch: usize = pre.iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            mm_nt(
                &self.data[i * m * k..(i + 1) * m * k],
                &b.data[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = pre.to_vec();
        shape.push(m);
        shape.push(n);
        Ok(Tensor { shape, data: out })
    }

    /// `Aᵀ · B` over the last two dimensions. With 2-D operands `[r,m]` and
    /// `[r,n]` this contracts the row dimension, which is exactly the shape
    /// needed for weight gradients.
    pub fn matmul_tn(&self, b: &Tensor) -> Result<Tensor, NumericsError> {
        let (pre, r, m) = split_matrix_dims("matmul_tn", &self.shape)?;
        let (pre_b, rb, n) = split_matrix_dims("matmul_tn", &b.shape)?;
        if pre != pre_b || r != rb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let batch: usize = pre.iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            mm_tn(
                &self.data[i * r * m..(i + 1) * r * m],
                &b.data[i * r * n..(i + 1) * r * n],
                r,
                m,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = pre.to_vec();
        shape.push(m);
        shape.push(n);
        Ok(Tensor { shape, data: out })
    }

    /// Reduce by summation until the shape equals `suffix`, which must be a
    /// trailing suffix of this tensor's shape. Inverse of a broadcast add.
    pub fn sum_to_suffix(&self, suffix: &[usize]) -> Result<Tensor, NumericsError> {
        if !is_suffix(suffix, &self.shape) {
            return Err(NumericsError::ShapeMismatch {
                op: "sum_to_suffix",
                lhs: self.shape.clone(),
                rhs: suffix.to_vec(),
            });
        }
        let inner: usize = suffix.iter().product();
        let mut out = vec![0.0; inner.max(1)];
        if inner == 0 {
            return Tensor::new(suffix, out);
        }
        for chunk in self.data.chunks(inner) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Tensor::new(suffix, out)
    }
}

fn split_matrix_dims<'s>(
    op: &'static str,
    shape: &'s [usize],
) -> Result<(&'s [usize], usize, usize), NumericsError> {
    if shape.len() < 2 {
        return Err(NumericsError::InvalidShape {
            op,
            shape: shape.to_vec(),
            why: "needs at least two dimensions",
        });
    }
    let m = shape[shape.len() - 2];
    let n = shape[shape.len() - 1];
    Ok((&shape[..shape.len() - 2], m, n))
}

pub(crate) fn is_suffix(suffix: &[usize], shape: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

fn mm_tn(a: &[f64], b: &[f64], r: usize, m: usize, n: usize, out: &mut [f64]) {
    for row in 0..r {
        let arow = &a[row * m..(row + 1) * m];
        let brow = &b[row * n..(row + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
