//! Bidirectional multi-head attention with FoPE, RoPE or no positional
//! treatment of queries and keys.

use std::fmt;
use std::str::FromStr;

use super::position::{rope_freqs, rope_rotate, Fope};
use crate::error::{Error, Result};
use crate::nn::{join, Init, Linear, Module};
use crate::tensor::{alloc, gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    Fope,
    Rope,
    None,
}

impl fmt::Display for AttnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnMode::Fope => "fope",
            AttnMode::Rope => "rope",
            AttnMode::None => "none",
        })
    }
}

impl FromStr for AttnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fope" => Ok(AttnMode::Fope),
            "rope" => Ok(AttnMode::Rope),
            "none" => Ok(AttnMode::None),
            _ => Err(Error::config(format!("attn_mode must be fope, rope or none, got '{s}'"))),
        }
    }
}

/// Softmax of `scale · q kᵀ` over keys, batched over the leading axis.
///
/// `q, k: [G, L, dh]`. `key_valid` (length `G·L`) excludes keys; a row with
/// no valid key yields all-zero weights. Only the `[G, L, L]` weight buffer
/// is materialized.
pub fn attention_probs(q: &Tensor, k: &Tensor, scale: f64, key_valid: Option<Vec<bool>>) -> Result<Tensor> {
    if q.rank() != 3 || q.shape() != k.shape() {
        return Err(Error::dim(format!(
            "attention_probs needs equal [G, L, dh] queries and keys, got {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let (g, l, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if key_valid.as_ref().is_some_and(|v| v.len() != g * l) {
        return Err(Error::dim(format!("key mask must have {} entries", g * l)));
    }
    let mut p = alloc::zeroed(g * l * l);
    {
        let (qd, kd) = (q.data(), k.data());
        for b in 0..g {
            let (qs, ks) = (&qd[b * l * dh..(b + 1) * l * dh], &kd[b * l * dh..(b + 1) * l * dh]);
            let out = &mut p[b * l * l..(b + 1) * l * l];
            gemm(l, dh, l, qs, false, ks, true, out, false);
            let kv = key_valid.as_ref().map(|v| &v[b * l..(b + 1) * l]);
            for row in out.chunks_mut(l) {
                let mut m = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    if kv.is_some_and(|v| !v[j]) {
                        *s = f64::NEG_INFINITY;
                    } else {
                        *s *= scale;
                        m = m.max(*s);
                    }
                }
                if m == f64::NEG_INFINITY {
                    row.fill(0.0);
                    continue;
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s /= z);
            }
        }
    }
    Ok(Tensor::from_op("attention_probs", p, vec![g, l, l], vec![q.clone(), k.clone()], move |ctx| {
        let (qd, kd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let mut gq = vec![0.0; g * l * dh];
        let mut gk = vec![0.0; g * l * dh];
        let mut gs = vec![0.0; l * l];
        for b in 0..g {
            let (gp, p) = (&ctx.grad[b * l * l..(b + 1) * l * l], &ctx.output[b * l * l..(b + 1) * l * l]);
            for ((gs, gp), p) in gs.chunks_mut(l).zip(gp.chunks(l)).zip(p.chunks(l)) {
                let dot: f64 = gp.iter().zip(p).map(|(a, b)| a * b).sum();
                for j in 0..l {
                    gs[j] = scale * p[j] * (gp[j] - dot);
                }
            }
            let span = b * l * dh..(b + 1) * l * dh;
            gemm(l, l, dh, &gs, false, &kd[span.clone()], false, &mut gq[span.clone()], false);
            gemm(l, l, dh, &gs, true, &qd[span.clone()], false, &mut gk[span], false);
        }
        vec![Some(gq), Some(gk)]
    }))
}

/// Multi-head attention over `[.., L, D]`, non-causal.
#[derive(Clone)]
pub struct Attention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub o_proj: Linear,
    pub fope: Option<Fope>,
    heads: usize,
    d_head: usize,
    mode: AttnMode,
    rope: Vec<f64>,
}

impl Attention {
    pub fn new(init: &mut Init, d_model: usize, heads: usize, mode: AttnMode, train_len: usize, n_harmonics: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::config(format!("heads: {heads} does not divide dim {d_model}")));
        }
        let d_head = d_model / heads;
        if mode != AttnMode::None && d_head % 2 != 0 {
            return Err(Error::config(format!(
                "heads: head width {d_model}/{heads} = {d_head} must be even for rotary modes"
            )));
        }
        let q_proj = Linear::new(init, d_model, d_model, true);
        let k_proj = Linear::new(init, d_model, d_model, true);
        let v_proj = Linear::new(init, d_model, d_model, true);
        let o_proj = Linear::new(init, d_model, d_model, true);
        let fope = match mode {
            AttnMode::Fope => Some(Fope::new(init, d_head, n_harmonics, train_len)?),
            _ => None,
        };
        Ok(Attention {
            q_proj,
            k_proj,
            v_proj,
            o_proj,
            fope,
            heads,
            d_head,
            mode,
            rope: rope_freqs(d_head),
        })
    }

    pub fn mode(&self) -> AttnMode {
        self.mode
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d_head as f64).sqrt()
    }

    fn position(&self, x: &Tensor) -> Result<Tensor> {
        match (&self.fope, self.mode) {
            (Some(f), AttnMode::Fope) => f.rotate(x),
            (_, AttnMode::Rope) => rope_rotate(x, &self.rope),
            _ => Ok(x.clone()),
        }
    }

    /// Project to `[B, H, L, dh]`, applying the positional map when `rotate`.
    fn heads_of(&self, lin: &Linear, x: &Tensor, rotate: bool) -> Result<Tensor> {
        let (b, l) = (x.shape()[0], x.shape()[1]);
        let mut y = lin.forward(x)?.reshape(&[b, l, self.heads, self.d_head])?;
        if rotate {
            y = self.position(&y)?;
        }
        y.permute(&[0, 2, 1, 3])
    }

    fn as_batch(x: &Tensor) -> Result<Tensor> {
        let (l, d) = (x.dim(-2)?, x.dim(-1)?);
        x.reshape(&[x.numel() / (l * d), l, d])
    }

    fn key_mask(&self, valid: Option<&[bool]>, b: usize, l: usize) -> Option<Vec<bool>> {
        valid.map(|v| {
            (0..b)
                .flat_map(|i| (0..self.heads).flat_map(move |_| v[i * l..(i + 1) * l].iter().copied()))
                .collect()
        })
    }

    /// Attention weights `[B·H, L, L]`.
    pub fn probs(&self, x: &Tensor, valid: Option<&[bool]>) -> Result<Tensor> {
        let x = Self::as_batch(x)?;
        let (b, l) = (x.shape()[0], x.shape()[1]);
        let q = self.heads_of(&self.q_proj, &x, true)?.reshape(&[b * self.heads, l, self.d_head])?;
        let k = self.heads_of(&self.k_proj, &x, true)?.reshape(&[b * self.heads, l, self.d_head])?;
        attention_probs(&q, &k, self.scale(), self.key_mask(valid, b, l))
    }

    /// Pre-softmax scores `f(q) f(k)ᵀ / √d_head` as `[B, H, L, L]`, unmasked.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let x = Self::as_batch(x)?;
        let q = self.heads_of(&self.q_proj, &x, true)?;
        let k = self.heads_of(&self.k_proj, &x, true)?;
        Ok(q.matmul(&k.transpose(-1, -2)?)?.scale(self.scale()))
    }

    /// `x: [.., L, D]`; keys at positions with `valid == false` are ignored.
    pub fn forward(&self, x: &Tensor, valid: Option<&[bool]>) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let xb = Self::as_batch(x)?;
        let (b, l, d) = (xb.shape()[0], xb.shape()[1], xb.shape()[2]);
        let p = self.probs(&xb, valid)?;
        let v = self.heads_of(&self.v_proj, &xb, false)?.reshape(&[b * self.heads, l, self.d_head])?;
        let o = p
            .matmul(&v)?
            .reshape(&[b, self.heads, l, self.d_head])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, l, d])?;
        self.o_proj.forward(&o)?.reshape(&shape)
    }
}

impl Module for Attention {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.q_proj.collect_params(&join(prefix, "q_proj"), out);
        self.k_proj.collect_params(&join(prefix, "k_proj"), out);
        self.v_proj.collect_params(&join(prefix, "v_proj"), out);
        self.o_proj.collect_params(&join(prefix, "o_proj"), out);
        if let Some(f) = &self.fope {
            out.push((join(prefix, "fope.coeffs"), f.coeffs.clone()));
        }
    }
}
