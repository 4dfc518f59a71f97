use super::{alloc, Tensor};
use crate::error::{Error, Result};

/// `c (m×n) = op(a) · op(b) (+ c when accumulate)`, row-major slices.
///
/// `a_t` / `b_t` read the operand as its transpose, i.e. `a` is stored `k×m`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are at least as long as the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Matrix product over the last two axes.
    ///
    /// `self` is `[.., M, K]`. `other` is either `[K, P]` (shared across all
    /// leading batch dimensions) or `[.., K, P]` with identical batch dimensions.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, other);
        let mismatch = || {
            Error::dim(format!(
                "matmul shape mismatch: {:?} · {:?}",
                a.shape(),
                b.shape()
            ))
        };
        if a.rank() < 2 || b.rank() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let (kb, p) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let a_batch = &a.shape()[..a.rank() - 2];
        let mut out_shape = a_batch.to_vec();
        out_shape.extend([m, p]);

        if b.rank() == 2 {
            // one gemm over all leading rows
            let rows = a.numel() / k;
            let mut out = alloc::zeroed(rows * p);
            gemm(rows, k, p, &a.data(), false, &b.data(), false, &mut out, false);
            return Ok(Tensor::from_op(
                "matmul",
                out,
                out_shape,
                vec![a.clone(), b.clone()],
                move |ctx| {
                    let g = ctx.grad;
                    let ga = ctx.wants(0).then(|| {
                        let mut ga = alloc::zeroed(rows * k);
                        gemm(rows, p, k, g, false, &ctx.inputs[1].data(), true, &mut ga, false);
                        ga
                    });
                    let gb = ctx.wants(1).then(|| {
                        let mut gb = alloc::zeroed(k * p);
                        gemm(k, rows, p, &ctx.inputs[0].data(), true, g, false, &mut gb, false);
                        gb
                    });
                    vec![ga, gb]
                },
            ));
        }

        if a_batch != &b.shape()[..b.rank() - 2] {
            return Err(mismatch());
        }
        let batch: usize = a_batch.iter().product();
        let mut out = alloc::zeroed(batch * m * p);
        {
            let (ad, bd) = (a.data(), b.data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    p,
                    &ad[i * m * k..],
                    false,
                    &bd[i * k * p..],
                    false,
                    &mut out[i * m * p..],
                    false,
                );
            }
        }
        Ok(Tensor::from_op(
            "batched_matmul",
            out,
            out_shape,
            vec![a.clone(), b.clone()],
            move |ctx| {
                let g = ctx.grad;
                let ga = ctx.wants(0).then(|| {
                    let bd = ctx.inputs[1].data();
                    let mut ga = alloc::zeroed(batch * m * k);
                    for i in 0..batch {
                        gemm(m, p, k, &g[i * m * p..], false, &bd[i * k * p..], true, &mut ga[i * m * k..], false);
                    }
                    ga
                });
                let gb = ctx.wants(1).then(|| {
                    let ad = ctx.inputs[0].data();
                    let mut gb = alloc::zeroed(batch * k * p);
                    for i in 0..batch {
                        gemm(k, m, p, &ad[i * m * k..], true, &g[i * m * p..], false, &mut gb[i * k * p..], false);
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// `x · w + b` with `w: [K, P]` and `b: [P]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}
