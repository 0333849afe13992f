//! Dense row-major f64 tensors (rank ≤ 4) with the handful of kernels the
//! model needs. No broadcasting beyond what the ops in `tape` require.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != shape {:?} product {}",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
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
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar extraction; panics on non-singleton tensors.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
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

    pub fn add_in_place(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// General axis permutation (transpose).
    pub fn permuted(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        if perm.len() != r {
            return Err(Error::ShapeMismatch("permutation length != rank".into()));
        }
        let mut seen = vec![false; r];
        for &p in perm {
            if p >= r || seen[p] {
                return Err(Error::ShapeMismatch("invalid permutation".into()));
            }
            seen[p] = true;
        }
        let old_shape = &self.shape;
        let new_shape: Vec<usize> = perm.iter().map(|&p| old_shape[p]).collect();
        let old_strides = self.strides();
        let new_in_old: Vec<usize> = perm.iter().map(|&p| old_strides[p]).collect();
        let mut data = vec![0.0; self.data.len()];
        let mut idx = vec![0usize; r];
        for out in data.iter_mut() {
            let mut off = 0;
            for d in 0..r {
                off += idx[d] * new_in_old[d];
            }
            *out = self.data[off];
            for d in (0..r).rev() {
                idx[d] += 1;
                if idx[d] < new_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor {
            shape: new_shape,
            data,
        })
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// c += a @ b for row-major 2-D slices. ikj loop order keeps the inner loop
/// contiguous in both b and c.
pub fn mm2_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c += a @ bᵀ where a is m×k and b is n×k.
pub fn mm2_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c += aᵀ @ b where a is k×m and b is k×n.
pub fn mm2_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Shapes accepted by the batched matmul: either equal batch dims, or a
/// rank-2 rhs shared across the batch (the linear-layer case).
pub fn matmul_shapes(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul needs rank >= 2, got {a:?} x {b:?}"
        )));
    }
    let m = a[a.len() - 2];
    let k = a[a.len() - 1];
    let shared_rhs = b.len() == 2 && a.len() > 2;
    if shared_rhs {
        if b[0] != k {
            return Err(Error::ShapeMismatch(format!("matmul {a:?} x {b:?}")));
        }
        let n = b[1];
        let mut out = a[..a.len() - 2].to_vec();
        out.push(m);
        out.push(n);
        return Ok((out, m, k, n, true));
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] || b[b.len() - 2] != k {
        return Err(Error::ShapeMismatch(format!("matmul {a:?} x {b:?}")));
    }
    let n = b[b.len() - 1];
    let mut out = a[..a.len() - 2].to_vec();
    out.push(m);
    out.push(n);
    Ok((out, m, k, n, false))
}

pub fn matmul_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (out_shape, m, k, n, shared) = matmul_shapes(a.shape(), b.shape())?;
    let batches: usize = out_shape[..out_shape.len() - 2].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    for bi in 0..batches {
        let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bsl = if shared {
            b.data()
        } else {
            &b.data()[bi * k * n..(bi + 1) * k * n]
        };
        mm2_acc(asl, bsl, &mut out.data_mut()[bi * m * n..(bi + 1) * m * n], m, k, n);
    }
    Ok(out)
}
