//! Reverse-mode autodiff on a flat tape.
//!
//! Vars are indices into the tape; ops push a value plus a backward closure
//! that routes the output gradient to the op's inputs. Inputs always precede
//! outputs on the tape, so a single reverse sweep visits every node after all
//! of its consumers.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::value::{matmul_shapes, mm2_acc, mm2_nt_acc, mm2_tn_acc, strides_of, Tensor};
use crate::error::{Error, Result};

/// Policy for reduction rows whose mask is entirely zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyRow {
    /// Reject the whole op.
    Error,
    /// Emit exact zeros for that row (and zero gradient).
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

type BackFn = Box<dyn Fn(&Tensor, &mut dyn FnMut(usize, Tensor))>;

#[derive(Default)]
pub struct Tape {
    values: RefCell<Vec<Rc<Tensor>>>,
    backs: RefCell<Vec<Option<BackFn>>>,
}

/// Per-var gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Gradient of `v`, densified to zeros if the var was unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

fn accum(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_in_place(&t),
        None => *slot = Some(t),
    }
}

/// Flat index map realizing a right-aligned broadcast of `small` onto `big`:
/// `out[i]` is the flat index into `small` for flat index `i` of `big`.
fn bcast_map(big: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if small.len() > big.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask rank {} exceeds operand rank {}",
            small.len(),
            big.len()
        )));
    }
    let pad = big.len() - small.len();
    let mut padded = vec![1usize; pad];
    padded.extend_from_slice(small);
    for (d, (&bd, &sd)) in big.iter().zip(&padded).enumerate() {
        if sd != bd && sd != 1 {
            return Err(Error::ShapeMismatch(format!(
                "broadcast dim {d}: {sd} vs {bd}"
            )));
        }
    }
    let s_strides = strides_of(&padded);
    let total: usize = big.iter().product();
    let mut map = vec![0usize; total];
    let mut idx = vec![0usize; big.len()];
    for m in map.iter_mut() {
        let mut off = 0;
        for d in 0..big.len() {
            if padded[d] != 1 {
                off += idx[d] * s_strides[d];
            }
        }
        *m = off;
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            if idx[d] < big[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(map)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, back: Option<BackFn>) -> Var {
        let mut values = self.values.borrow_mut();
        let id = values.len();
        values.push(Rc::new(value));
        self.backs.borrow_mut().push(back);
        Var { id }
    }

    /// Register an input tensor. Leaves receive gradients but have no parents.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.values.borrow()[v.id])
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.values.borrow()[v.id].shape().to_vec()
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x + y)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.id, g.clone());
                sink(b.id, g.clone());
            })),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x - y)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.id, g.clone());
                sink(b.id, g.map(|x| -x));
            })),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.id, g.zip_map(&vb, |gv, y| gv * y).expect("saved shape"));
                sink(b.id, g.zip_map(&va, |gv, x| gv * x).expect("saved shape"));
            })),
        ))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        self.push(
            va.map(|x| x * c),
            Some(Box::new(move |g, sink| sink(a.id, g.map(|x| x * c)))),
        )
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        self.push(
            va.map(|x| x + c),
            Some(Box::new(move |g, sink| sink(a.id, g.clone()))),
        )
    }

    /// `x + b` where `b` has the shape of x's last axis.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = *vx.shape().last().ok_or_else(|| {
            Error::ShapeMismatch("add_bias on rank-0 operand".into())
        })?;
        if vb.shape() != [n] {
            return Err(Error::ShapeMismatch(format!(
                "bias {:?} vs last dim {}",
                vb.shape(),
                n
            )));
        }
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.id, g.clone());
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                sink(b.id, Tensor::from_vec(db));
            })),
        ))
    }

    /// Elementwise product with a constant tensor, broadcast right-aligned.
    /// No gradient flows to the mask.
    pub fn mul_mask(&self, a: Var, mask: &Tensor) -> Result<Var> {
        let va = self.value(a);
        let map = bcast_map(va.shape(), mask.shape())?;
        let mdata = Rc::new(mask.data().to_vec());
        let mut out = (*va).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= mdata[map[i]];
        }
        let map = Rc::new(map);
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dg = g.clone();
                for (i, d) in dg.data_mut().iter_mut().enumerate() {
                    *d *= mdata[map[i]];
                }
                sink(a.id, dg);
            })),
        ))
    }

    // ---- shape ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let out = va.reshaped(shape)?;
        let old_shape = va.shape().to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.id, g.reshaped(&old_shape).expect("same length"));
            })),
        ))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let out = va.permuted(perm)?;
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.id, g.permuted(&inv).expect("inverse permutation"));
            })),
        ))
    }

    /// Reorder/select rows along axis 0. Indices may repeat; gradients
    /// accumulate into the source rows.
    pub fn gather0(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if va.rank() == 0 {
            return Err(Error::ShapeMismatch("gather0 on rank-0 operand".into()));
        }
        let rows = va.shape()[0];
        let row_len: usize = va.shape()[1..].iter().product();
        for &i in idx {
            if i >= rows {
                return Err(Error::ShapeMismatch(format!(
                    "gather0 index {i} out of {rows} rows"
                )));
            }
        }
        let mut shape = va.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * row_len);
        for &i in idx {
            data.extend_from_slice(&va.data()[i * row_len..(i + 1) * row_len]);
        }
        let out = Tensor::new(shape, data)?;
        let idx = Rc::new(idx.to_vec());
        let src_shape = va.shape().to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = Tensor::zeros(&src_shape);
                for (oi, &si) in idx.iter().enumerate() {
                    let dst = &mut da.data_mut()[si * row_len..(si + 1) * row_len];
                    let src = &g.data()[oi * row_len..(oi + 1) * row_len];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                sink(a.id, da);
            })),
        ))
    }

    pub fn concat_last(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of zero tensors".into()));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let lead = vals[0].shape()[..vals[0].rank().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            if v.rank() == 0 || v.shape()[..v.rank() - 1] != lead[..] {
                return Err(Error::ShapeMismatch(
                    "concat operands disagree on leading dims".into(),
                ));
            }
            widths.push(*v.shape().last().unwrap());
        }
        let total_w: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut shape = lead.clone();
        shape.push(total_w);
        let mut data = Vec::with_capacity(rows * total_w);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let widths = Rc::new(widths);
        let mut part_shapes: Vec<Vec<usize>> = Vec::new();
        for &w in widths.iter() {
            let mut s = lead.clone();
            s.push(w);
            part_shapes.push(s);
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut offset = 0usize;
                for (pi, &w) in widths.iter().enumerate() {
                    let mut dp = Tensor::zeros(&part_shapes[pi]);
                    for r in 0..rows {
                        let src = &g.data()[r * total_w + offset..r * total_w + offset + w];
                        dp.data_mut()[r * w..(r + 1) * w].copy_from_slice(src);
                    }
                    sink(ids[pi], dp);
                    offset += w;
                }
            })),
        ))
    }

    pub fn slice_last(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let w = *va
            .shape()
            .last()
            .ok_or_else(|| Error::ShapeMismatch("slice of rank-0 operand".into()))?;
        if start + len > w {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{} out of last dim {w}",
                start + len
            )));
        }
        let rows = va.len() / w;
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * w + start..r * w + start + len]);
        }
        let out = Tensor::new(shape, data)?;
        let src_shape = va.shape().to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = Tensor::zeros(&src_shape);
                for r in 0..rows {
                    da.data_mut()[r * w + start..r * w + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                sink(a.id, da);
            })),
        ))
    }

    // ---- matmul ----

    /// Batched matmul. Either both operands carry identical batch dims, or
    /// the rhs is rank-2 and shared across the batch (linear-layer case, with
    /// gradient accumulation over the batch).
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (out_shape, m, k, n, shared) = matmul_shapes(va.shape(), vb.shape())?;
        let batches: usize = out_shape[..out_shape.len() - 2].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        for bi in 0..batches {
            let asl = &va.data()[bi * m * k..(bi + 1) * m * k];
            let bsl = if shared {
                vb.data()
            } else {
                &vb.data()[bi * k * n..(bi + 1) * k * n]
            };
            mm2_acc(asl, bsl, &mut out.data_mut()[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let a_shape = va.shape().to_vec();
        let b_shape = vb.shape().to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                // dA = dC @ Bᵀ
                let mut da = Tensor::zeros(&a_shape);
                for bi in 0..batches {
                    let gsl = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let bsl = if shared {
                        vb.data()
                    } else {
                        &vb.data()[bi * k * n..(bi + 1) * k * n]
                    };
                    // (m×n) @ (k×n)ᵀ → m×k
                    mm2_nt_acc(gsl, bsl, &mut da.data_mut()[bi * m * k..(bi + 1) * m * k], m, n, k);
                }
                sink(a.id, da);
                // dB = Aᵀ @ dC, accumulated over the batch when shared
                let mut db = Tensor::zeros(&b_shape);
                for bi in 0..batches {
                    let asl = &va.data()[bi * m * k..(bi + 1) * m * k];
                    let gsl = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let dsl = if shared {
                        db.data_mut()
                    } else {
                        &mut db.data_mut()[bi * k * n..(bi + 1) * k * n]
                    };
                    mm2_tn_acc(asl, gsl, dsl, k, m, n);
                }
                sink(b.id, db);
            })),
        ))
    }

    // ---- nonlinearities ----

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(
                    a.id,
                    g.zip_map(&va, |gv, x| if x > 0.0 { gv } else { 0.0 })
                        .expect("saved shape"),
                );
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| 1.0 / (1.0 + (-x).exp()));
        let s = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(
                    a.id,
                    g.zip_map(&s, |gv, sv| gv * sv * (1.0 - sv)).expect("saved shape"),
                );
            })),
        )
    }

    pub fn ln(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(f64::ln);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.id, g.zip_map(&va, |gv, x| gv / x).expect("saved shape"));
            })),
        )
    }

    /// Clamp to [lo, hi]; gradient passes wherever the input is inside the
    /// closed interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.clamp(lo, hi));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(
                    a.id,
                    g.zip_map(&va, |gv, x| if (lo..=hi).contains(&x) { gv } else { 0.0 })
                        .expect("saved shape"),
                );
            })),
        )
    }

    // ---- softmax family ----

    pub fn softmax(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let ones = Tensor::full(va.shape(), 1.0);
        self.masked_softmax(a, &ones, EmptyRow::Error)
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// nonzero; masked positions get weight exactly 0. The mask broadcasts
    /// right-aligned onto the operand shape and receives no gradient.
    pub fn masked_softmax(&self, a: Var, mask: &Tensor, empty: EmptyRow) -> Result<Var> {
        let va = self.value(a);
        let n = *va
            .shape()
            .last()
            .ok_or_else(|| Error::ShapeMismatch("softmax on rank-0 operand".into()))?;
        let map = bcast_map(va.shape(), mask.shape())?;
        let rows = va.len() / n;
        let mut out = Tensor::zeros(va.shape());
        for r in 0..rows {
            let x = &va.data()[r * n..(r + 1) * n];
            let valid: Vec<bool> = (0..n).map(|j| mask.data()[map[r * n + j]] != 0.0).collect();
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in valid.iter().enumerate() {
                if v && x[j] > mx {
                    mx = x[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                match empty {
                    EmptyRow::Error => {
                        return Err(Error::AllMasked(format!("softmax row {r} fully masked")))
                    }
                    EmptyRow::Zero => continue,
                }
            }
            let dst = &mut out.data_mut()[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                if valid[j] {
                    let e = (x[j] - mx).exp();
                    dst[j] = e;
                    sum += e;
                }
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let s = Rc::new(out.clone());
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                // dx = (g − ⟨g, s⟩) * s per row; masked entries have s = 0 so
                // the same formula zeroes them, and all-masked rows give 0.
                let mut dx = Tensor::zeros(s.shape());
                for r in 0..rows {
                    let gv = &g.data()[r * n..(r + 1) * n];
                    let sv = &s.data()[r * n..(r + 1) * n];
                    let dot: f64 = gv.iter().zip(sv).map(|(&gg, &ss)| gg * ss).sum();
                    let dst = &mut dx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        dst[j] = (gv[j] - dot) * sv[j];
                    }
                }
                sink(a.id, dx);
            })),
        ))
    }

    // ---- layer norm ----

    /// Layer norm over the last axis with learned affine parameters.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::ShapeMismatch("layer_norm on rank-0 operand".into()))?;
        if vg.shape() != [n] || vb.shape() != [n] {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm affine {:?}/{:?} vs feature dim {n}",
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = vx.len() / n;
        let mut out = Tensor::zeros(vx.shape());
        let mut xhat = Tensor::zeros(vx.shape());
        let mut inv_s = vec![0.0; rows];
        for r in 0..rows {
            let xr = &vx.data()[r * n..(r + 1) * n];
            let mu = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_s[r] = is;
            let xh = &mut xhat.data_mut()[r * n..(r + 1) * n];
            let o = &mut out.data_mut()[r * n..(r + 1) * n];
            for j in 0..n {
                xh[j] = (xr[j] - mu) * is;
                o[j] = xh[j] * vg.data()[j] + vb.data()[j];
            }
        }
        let xhat = Rc::new(xhat);
        let inv_s = Rc::new(inv_s);
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = Tensor::zeros(xhat.shape());
                for r in 0..rows {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let xh = &xhat.data()[r * n..(r + 1) * n];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * vg.data()[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= n as f64;
                    mean_dxh_xh /= n as f64;
                    let dst = &mut dx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        let dxh = gr[j] * vg.data()[j];
                        dst[j] = inv_s[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                sink(x.id, dx);
                sink(gamma.id, Tensor::from_vec(dgamma));
                sink(beta.id, Tensor::from_vec(dbeta));
            })),
        ))
    }

    // ---- masked reductions ----

    /// Max over `axis` restricted to positions where `mask` (same shape as
    /// the operand) is nonzero. Gradient flows only to the argmax; ties go to
    /// the lowest index along the axis.
    pub fn masked_max(&self, a: Var, axis: usize, mask: &Tensor, empty: EmptyRow) -> Result<Var> {
        let va = self.value(a);
        if mask.shape() != va.shape() {
            return Err(Error::ShapeMismatch(format!(
                "masked_max mask {:?} vs operand {:?}",
                mask.shape(),
                va.shape()
            )));
        }
        if axis >= va.rank() {
            return Err(Error::ShapeMismatch(format!(
                "masked_max axis {axis} out of rank {}",
                va.rank()
            )));
        }
        let shape = va.shape().to_vec();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut out = Tensor::zeros(&out_shape);
        let mut argmax = vec![usize::MAX; out.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                for t in 0..axis_len {
                    let flat = (o * axis_len + t) * inner + i;
                    if mask.data()[flat] != 0.0 && va.data()[flat] > best {
                        best = va.data()[flat];
                        best_at = flat;
                    }
                }
                let oi = o * inner + i;
                if best_at == usize::MAX {
                    match empty {
                        EmptyRow::Error => {
                            return Err(Error::AllMasked(format!(
                                "masked_max: no valid entries at output {oi}"
                            )))
                        }
                        EmptyRow::Zero => continue,
                    }
                }
                out.data_mut()[oi] = best;
                argmax[oi] = best_at;
            }
        }
        let argmax = Rc::new(argmax);
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = Tensor::zeros(&shape);
                for (oi, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        da.data_mut()[src] += g.data()[oi];
                    }
                }
                sink(a.id, da);
            })),
        ))
    }

    // ---- dropout ----

    /// Inverted dropout; `p == 0` is the identity (no tape node). Train-only —
    /// inference paths simply never call it.
    pub fn dropout(&self, a: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if p == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
        }
        let va = self.value(a);
        let keep = 1.0 - p;
        let gains: Vec<f64> = (0..va.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let gains = Rc::new(gains);
        let mut out = (*va).clone();
        for (o, &k) in out.data_mut().iter_mut().zip(gains.iter()) {
            *o *= k;
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dg = g.clone();
                for (d, &k) in dg.data_mut().iter_mut().zip(gains.iter()) {
                    *d *= k;
                }
                sink(a.id, dg);
            })),
        ))
    }

    // ---- reductions to scalar ----

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let s: f64 = va.data().iter().sum();
        let shape = va.shape().to_vec();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g, sink| {
                sink(a.id, Tensor::full(&shape, g.item()));
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len() as f64;
        let s: f64 = va.data().iter().sum();
        let shape = va.shape().to_vec();
        self.push(
            Tensor::scalar(s / n),
            Some(Box::new(move |g, sink| {
                sink(a.id, Tensor::full(&shape, g.item() / n));
            })),
        )
    }

    // ---- backward ----

    /// Reverse sweep from `root`, seeded with ones. Returns per-var gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let n = self.len();
        if root.id >= n {
            return Err(Error::ShapeMismatch("backward root not on this tape".into()));
        }
        let values = self.values.borrow();
        let backs = self.backs.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(values[root.id].shape(), 1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &backs[id] {
                debug_assert_eq!(g.shape(), values[id].shape());
                let (before, _) = grads.split_at_mut(id);
                back(&g, &mut |pid, contribution| {
                    debug_assert!(pid < id, "tape must be topologically ordered");
                    accum(&mut before[pid], contribution);
                });
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
impl Tape {
    /// Identity forward with a deliberately doubled backward — negative
    /// control proving gradcheck catches wrong gradients.
    pub fn identity_with_wrong_gradient(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(
            (*va).clone(),
            Some(Box::new(move |g, sink| sink(a.id, g.map(|x| 2.0 * x)))),
        )
    }
}
