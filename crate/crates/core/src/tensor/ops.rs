//! Elementwise, reduction and shape operations.

use std::sync::Arc;

use super::{alloc, numel, Tensor};
use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Exact (erf-based) GeLU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * (-0.5 * x * x).exp() * INV_SQRT_2PI
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Number of times `b` repeats inside `a` when `b`'s shape is a suffix of `a`'s.
fn suffix_repeat(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    Some(numel(a) / numel(b))
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Tensor {
    fn unary(&self, name: &'static str, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(name, out, self.shape().to_vec(), vec![self.clone()], move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x.iter().zip(ctx.output))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Tensor {
        self.unary("silu", silu, |x, _| silu_grad(x))
    }

    pub fn gelu(&self) -> Tensor {
        self.unary("gelu", gelu, |x, _| gelu_grad(x))
    }

    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op("scale", out, self.shape().to_vec(), vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.iter().map(|g| g * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op("add_scalar", out, self.shape().to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    fn binary(&self, other: &Tensor, op: Binary) -> Result<Tensor> {
        let (a, b) = (self, other);
        let Some(rep) = suffix_repeat(a.shape(), b.shape()) else {
            if !matches!(op, Binary::Sub) && suffix_repeat(b.shape(), a.shape()).is_some() {
                return b.binary(a, op);
            }
            return Err(Error::dim(format!(
                "cannot broadcast {:?} against {:?}",
                a.shape(),
                b.shape()
            )));
        };
        let n = b.numel();
        let out: Vec<f64> = {
            let (ad, bd) = (a.data(), b.data());
            ad.iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[i % n];
                    match op {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                    }
                })
                .collect()
        };
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        Ok(Tensor::from_op(
            name,
            out,
            a.shape().to_vec(),
            vec![a.clone(), b.clone()],
            move |ctx| {
                let g = ctx.grad;
                let reduce = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
                    let mut acc = vec![0.0; n];
                    for r in 0..rep {
                        for (j, slot) in acc.iter_mut().enumerate() {
                            *slot += f(r * n + j);
                        }
                    }
                    acc
                };
                match op {
                    Binary::Add | Binary::Sub => {
                        let ga = ctx.wants(0).then(|| g.to_vec());
                        let gb = ctx.wants(1).then(|| {
                            let s = if matches!(op, Binary::Sub) { -1.0 } else { 1.0 };
                            let mut acc = if rep == 1 { g.to_vec() } else { reduce(&|i| g[i]) };
                            if s < 0.0 {
                                acc.iter_mut().for_each(|v| *v = -*v);
                            }
                            acc
                        });
                        vec![ga, gb]
                    }
                    Binary::Mul => {
                        let ga = ctx.wants(0).then(|| {
                            let bd = ctx.inputs[1].data();
                            g.iter().enumerate().map(|(i, g)| g * bd[i % n]).collect()
                        });
                        let gb = ctx.wants(1).then(|| {
                            let ad = ctx.inputs[0].data();
                            reduce(&|i| g[i] * ad[i])
                        });
                        vec![ga, gb]
                    }
                }
            },
        ))
    }

    /// Elementwise sum; `other` may also have a shape that is a suffix of `self`'s.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Sub)
    }

    /// Elementwise (Hadamard) product with suffix broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Mul)
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![s], vec![], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean(&self, axis: isize) -> Result<Tensor> {
        let ax = self.axis(axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), ax);
        let mut out = vec![0.0; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..n {
                    let row = &x[(o * n + i) * inner..(o * n + i + 1) * inner];
                    for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = self.shape().to_vec();
        shape.remove(ax);
        Ok(Tensor::from_op("mean", out, shape, vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..n {
                    for k in 0..inner {
                        g[(o * n + i) * inner + k] = ctx.grad[o * inner + k] * inv;
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: isize) -> Result<Tensor> {
        let ax = self.axis(axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), ax);
        let mut out = self.to_vec();
        for o in 0..outer {
            for k in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + k;
                let m = (0..n).map(|i| out[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (out[idx(i)] - m).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    out[idx(i)] /= z;
                }
            }
        }
        Ok(Tensor::from_op("softmax", out, self.shape().to_vec(), vec![self.clone()], move |ctx| {
            let (g, y) = (ctx.grad, ctx.output);
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for k in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + k;
                    let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                    for i in 0..n {
                        gx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.dim(-1)?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm over {:?} needs scale/shift of shape [{d}], got {:?} and {:?}",
                self.shape(),
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / d;
        let mut xhat = self.to_vec();
        let mut rstd = vec![0.0; rows];
        for (r, row) in xhat.chunks_mut(d).enumerate() {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            row.iter_mut().for_each(|v| *v = (*v - mu) * s);
        }
        let out: Vec<f64> = {
            let (gm, bt) = (gamma.data(), beta.data());
            xhat.iter()
                .enumerate()
                .map(|(i, v)| v * gm[i % d] + bt[i % d])
                .collect()
        };
        let xhat = Arc::new(xhat);
        Ok(Tensor::from_op(
            "layer_norm",
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |ctx| {
                let g = ctx.grad;
                let gx = ctx.wants(0).then(|| {
                    let gm = ctx.inputs[1].data();
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gm[j];
                            m1 += gh;
                            m2 += gh * xr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (gr[j] * gm[j] - m1 - xr[j] * m2);
                        }
                    }
                    gx
                });
                let gg = ctx.wants(1).then(|| {
                    let mut acc = vec![0.0; d];
                    for (i, (g, x)) in g.iter().zip(xhat.iter()).enumerate() {
                        acc[i % d] += g * x;
                    }
                    acc
                });
                let gb = ctx.wants(2).then(|| {
                    let mut acc = vec![0.0; d];
                    for (i, g) in g.iter().enumerate() {
                        acc[i % d] += g;
                    }
                    acc
                });
                vec![gx, gg, gb]
            },
        ))
    }

    /// Reverse the order of elements along `axis`.
    pub fn flip(&self, axis: isize) -> Result<Tensor> {
        let ax = self.axis(axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), ax);
        let flip_data = move |src: &[f64]| {
            let mut out = alloc::zeroed(src.len());
            for o in 0..outer {
                for i in 0..n {
                    let s = (o * n + i) * inner;
                    let t = (o * n + (n - 1 - i)) * inner;
                    out[t..t + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
            out
        };
        let out = flip_data(&self.data());
        Ok(Tensor::from_op("flip", out, self.shape().to_vec(), vec![self.clone()], move |ctx| {
            vec![Some(flip_data(ctx.grad))]
        }))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Tensor> {
        let ax = self.axis(axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), ax);
        if len == 0 || start + len > n {
            return Err(Error::dim(format!(
                "narrow {start}..{} out of range for axis {ax} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                let s = (o * n + start) * inner;
                out.extend_from_slice(&x[s..s + len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[ax] = len;
        Ok(Tensor::from_op("narrow", out, shape, vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let s = (o * n + start) * inner;
                g[s..s + len * inner]
                    .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }))
    }

    /// Split the last dimension into two equal halves.
    pub fn split_last_in_two(&self) -> Result<(Tensor, Tensor)> {
        let d = self.dim(-1)?;
        if d % 2 != 0 {
            return Err(Error::dim(format!(
                "cannot split odd last dimension of {:?} in two",
                self.shape()
            )));
        }
        Ok((self.narrow(-1, 0, d / 2)?, self.narrow(-1, d / 2, d / 2)?))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: isize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let ax = first.axis(axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == ax || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "cannot concatenate {:?} with {:?} along axis {ax}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), ax);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[ax]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let datas: Vec<_> = parts.iter().map(Tensor::data).collect();
            for o in 0..outer {
                for (d, &l) in datas.iter().zip(&lens) {
                    out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[ax] = total;
        Ok(Tensor::from_op("concat", out, shape, parts.to_vec(), move |ctx| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &l) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&ctx.grad[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op("reshape", self.to_vec(), shape.to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        }))
    }

    /// Reorder dimensions: output dimension `i` is input dimension `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..r).collect::<Vec<_>>() {
            return Err(Error::dim(format!(
                "{perm:?} is not a permutation of the axes of {:?}",
                self.shape()
            )));
        }
        let shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(&self.data(), &shape, perm);
        let mut inverse = vec![0; r];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op("permute", out, out_shape, vec![self.clone()], move |ctx| {
            vec![Some(permute_data(ctx.grad, &grad_shape, &inverse))]
        }))
    }

    pub fn transpose(&self, a: isize, b: isize) -> Result<Tensor> {
        let (a, b) = (self.axis(a)?, self.axis(b)?);
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Zero every row (slice over the last axis) whose flag in `keep` is false.
    pub fn mask_rows(&self, keep: &[bool]) -> Result<Tensor> {
        let d = self.dim(-1)?;
        if keep.len() * d != self.numel() {
            return Err(Error::dim(format!(
                "row mask of length {} does not match {:?}",
                keep.len(),
                self.shape()
            )));
        }
        let mut out = self.to_vec();
        for (row, &k) in out.chunks_mut(d).zip(keep) {
            if !k {
                row.fill(0.0);
            }
        }
        let keep = keep.to_vec();
        Ok(Tensor::from_op("mask_rows", out, self.shape().to_vec(), vec![self.clone()], move |ctx| {
            let mut g = ctx.grad.to_vec();
            for (row, &k) in g.chunks_mut(d).zip(&keep) {
                if !k {
                    row.fill(0.0);
                }
            }
            vec![Some(g)]
        }))
    }

    /// Gather rows of `table` ([V, D]) by token id; output shape is `ids_shape ++ [D]`.
    pub fn embedding(table: &Tensor, ids: &[usize], ids_shape: &[usize]) -> Result<Tensor> {
        if table.rank() != 2 {
            return Err(Error::dim(format!(
                "embedding table must be [V, D], got {:?}",
                table.shape()
            )));
        }
        if numel(ids_shape) != ids.len() {
            return Err(Error::dim(format!(
                "{} ids do not fill shape {ids_shape:?}",
                ids.len()
            )));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of size {v}"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        {
            let t = table.data();
            for &i in ids {
                out.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let ids = ids.to_vec();
        Ok(Tensor::from_op("embedding", out, shape, vec![table.clone()], move |ctx| {
            let mut g = vec![0.0; v * d];
            for (r, &i) in ids.iter().enumerate() {
                for (acc, x) in g[i * d..(i + 1) * d].iter_mut().zip(&ctx.grad[r * d..(r + 1) * d]) {
                    *acc += x;
                }
            }
            vec![Some(g)]
        }))
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let mut strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = alloc::zeroed(src.len());
    if r == 0 {
        out.copy_from_slice(src);
        return out;
    }
    // walk the output in order, carrying the source offset along
    let last = r - 1;
    let (n_last, s_last) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; r];
    let mut base = 0usize;
    let mut o = 0;
    while o < out.len() {
        for j in 0..n_last {
            out[o + j] = src[base + j * s_last];
        }
        o += n_last;
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
