//! Rotary and Fourier position encodings for query/key vectors.
//!
//! Both act on consecutive coordinate pairs `(2m, 2m+1)` of each head,
//! read as a complex number, at position `n` = index along axis `-3` of a
//! `[.., L, heads, d_head]` tensor.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Init;
use crate::tensor::Tensor;

pub const ROPE_THETA: f64 = 10_000.0;

/// Default number of extra harmonic frequencies per pair.
pub const DEFAULT_HARMONICS: usize = 4;

/// `ω_m = θ^(-2m/d_head)` for `m < d_head / 2`.
pub fn rope_freqs(d_head: usize) -> Vec<f64> {
    (0..d_head / 2)
        .map(|m| ROPE_THETA.powf(-2.0 * m as f64 / d_head as f64))
        .collect()
}

fn check_layout(x: &Tensor, d_head: usize) -> Result<(usize, usize, usize)> {
    if x.rank() < 3 || x.dim(-1)? != d_head {
        return Err(Error::dim(format!(
            "position encoding expects [.., L, heads, {d_head}], got {:?}",
            x.shape()
        )));
    }
    Ok((x.dim(-3)?, x.dim(-2)?, x.numel() / (x.dim(-3)? * x.dim(-2)? * d_head)))
}

fn check_even(d_head: usize) -> Result<()> {
    if d_head == 0 || d_head % 2 != 0 {
        return Err(Error::config(format!("d_head must be a positive even number, got {d_head}")));
    }
    Ok(())
}

/// Apply `(x0 + i x1) · (re + i im)` to every pair, with `table[n][m]`
/// giving the factor at position `n` for pair `m`.
fn complex_scale(x: &[f64], table: &[(f64, f64)], len: usize, heads: usize, d_head: usize, conj: bool) -> Vec<f64> {
    let half = d_head / 2;
    let mut out = vec![0.0; x.len()];
    for (row, (src, dst)) in x.chunks(d_head).zip(out.chunks_mut(d_head)).enumerate() {
        let n = (row / heads) % len;
        for m in 0..half {
            let (re, mut im) = table[n * half + m];
            if conj {
                im = -im;
            }
            let (x0, x1) = (src[2 * m], src[2 * m + 1]);
            dst[2 * m] = x0 * re - x1 * im;
            dst[2 * m + 1] = x0 * im + x1 * re;
        }
    }
    out
}

/// Rotary embedding: pair `m` at position `n` is rotated by angle `ω_m n`.
pub fn rope_rotate(x: &Tensor, freqs: &[f64]) -> Result<Tensor> {
    let d_head = 2 * freqs.len();
    check_even(d_head)?;
    let (len, heads, _) = check_layout(x, d_head)?;
    let mut out = x.to_vec();
    for (row, v) in out.chunks_mut(d_head).enumerate() {
        let n = ((row / heads) % len) as f64;
        for (m, w) in freqs.iter().enumerate() {
            let (s, c) = (w * n).sin_cos();
            let (a, b) = (v[2 * m], v[2 * m + 1]);
            v[2 * m] = c * a - s * b;
            v[2 * m + 1] = s * a + c * b;
        }
    }
    let freqs = freqs.to_vec();
    Ok(Tensor::from_op("rope", out, x.shape().to_vec(), vec![x.clone()], move |ctx| {
        let mut g = ctx.grad.to_vec();
        for (row, v) in g.chunks_mut(d_head).enumerate() {
            let n = ((row / heads) % len) as f64;
            for (m, w) in freqs.iter().enumerate() {
                let (s, c) = (w * n).sin_cos();
                let (a, b) = (v[2 * m], v[2 * m + 1]);
                v[2 * m] = c * a + s * b;
                v[2 * m + 1] = -s * a + c * b;
            }
        }
        vec![Some(g)]
    }))
}

/// Fourier position embedding.
///
/// Pair `m` at position `n` is multiplied by
/// `f_m(n) = exp(i ω_m n) + Σ_j a_{m,j} exp(i ω_{m,j} n)` when `ω_m ≥ ω_l`
/// and left untouched otherwise. The coefficients `a` (`[d_head/2, n_h]`)
/// are shared by all heads and by queries and keys.
#[derive(Clone)]
pub struct Fope {
    pub coeffs: Tensor,
    freqs: Vec<f64>,
    harmonics: Vec<f64>,
    cutoff: f64,
    n_h: usize,
}

impl Fope {
    /// Cutoff `ω_l = 2π / train_len`.
    pub fn new(init: &mut Init, d_head: usize, n_h: usize, train_len: usize) -> Result<Fope> {
        if train_len == 0 {
            return Err(Error::config("train_len must be positive"));
        }
        Fope::with_cutoff(init, d_head, n_h, 2.0 * PI / train_len as f64)
    }

    pub fn with_cutoff(init: &mut Init, d_head: usize, n_h: usize, cutoff: f64) -> Result<Fope> {
        check_even(d_head)?;
        if n_h == 0 {
            return Err(Error::config("FoPE needs at least one harmonic per pair"));
        }
        let freqs = rope_freqs(d_head);
        let half = freqs.len();
        let mut harmonics = Vec::with_capacity(half * n_h);
        for m in 0..half {
            for _ in 0..n_h {
                let off = if half > 1 { init.rng().random_range(1..half) } else { 0 };
                let w = freqs[(m + off) % half];
                harmonics.push(if w < cutoff { 0.0 } else { w });
            }
        }
        let coeffs = init.normal(&[half, n_h], 0.02 / (n_h as f64).sqrt());
        Ok(Fope {
            coeffs,
            freqs,
            harmonics,
            cutoff,
            n_h,
        })
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn base_freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// `[d_head/2 × n_h]` harmonic frequencies, row-major.
    pub fn harmonic_freqs(&self) -> &[f64] {
        &self.harmonics
    }

    pub fn d_head(&self) -> usize {
        2 * self.freqs.len()
    }

    /// Whether pair `m` is modulated at all.
    pub fn is_active(&self, m: usize) -> bool {
        self.freqs[m] >= self.cutoff
    }

    fn table(&self, len: usize) -> Vec<(f64, f64)> {
        let half = self.freqs.len();
        let a = self.coeffs.data();
        let mut t = Vec::with_capacity(len * half);
        for n in 0..len {
            let n = n as f64;
            for m in 0..half {
                if !self.is_active(m) {
                    t.push((1.0, 0.0));
                    continue;
                }
                let (s, c) = (self.freqs[m] * n).sin_cos();
                let (mut re, mut im) = (c, s);
                for j in 0..self.n_h {
                    let (s, c) = (self.harmonics[m * self.n_h + j] * n).sin_cos();
                    re += a[m * self.n_h + j] * c;
                    im += a[m * self.n_h + j] * s;
                }
                t.push((re, im));
            }
        }
        t
    }

    /// Modulate `x: [.., L, heads, d_head]`.
    pub fn rotate(&self, x: &Tensor) -> Result<Tensor> {
        let d_head = self.d_head();
        let (len, heads, _) = check_layout(x, d_head)?;
        let table = self.table(len);
        let out = complex_scale(&x.data(), &table, len, heads, d_head, false);
        let (half, n_h) = (self.freqs.len(), self.n_h);
        let active: Vec<bool> = (0..half).map(|m| self.is_active(m)).collect();
        let harmonics = self.harmonics.clone();
        let inputs = vec![x.clone(), self.coeffs.clone()];
        Ok(Tensor::from_op("fope", out, x.shape().to_vec(), inputs, move |ctx| {
            let g = ctx.grad;
            // The transpose of multiplication by f is multiplication by conj(f).
            let gx = ctx.wants(0).then(|| complex_scale(g, &table, len, heads, d_head, true));
            let ga = ctx.wants(1).then(|| {
                let x = ctx.inputs[0].data();
                let mut ga = vec![0.0; half * n_h];
                for (row, (gv, xv)) in g.chunks(d_head).zip(x.chunks(d_head)).enumerate() {
                    let n = ((row / heads) % len) as f64;
                    for m in (0..half).filter(|&m| active[m]) {
                        let (g0, g1, x0, x1) = (gv[2 * m], gv[2 * m + 1], xv[2 * m], xv[2 * m + 1]);
                        let g_re = g0 * x0 + g1 * x1;
                        let g_im = g1 * x0 - g0 * x1;
                        for j in 0..n_h {
                            let (s, c) = (harmonics[m * n_h + j] * n).sin_cos();
                            ga[m * n_h + j] += g_re * c + g_im * s;
                        }
                    }
                }
                ga
            });
            vec![gx, ga]
        }))
    }
}
