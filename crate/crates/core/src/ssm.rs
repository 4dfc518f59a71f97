//! Selective state-space scan, the Mamba block built around it, and the
//! bidirectional wrapper.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Init, Linear, Module};
use crate::tensor::{Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsmConfig {
    pub expand: usize,
    pub d_state: usize,
    pub conv_width: usize,
    /// Rank of the Δ projection; `None` means `ceil(D / 16)`.
    pub dt_rank: Option<usize>,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            expand: 2,
            d_state: 16,
            conv_width: 4,
            dt_rank: None,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }
}

impl SsmConfig {
    pub fn dt_rank_for(&self, d_model: usize) -> usize {
        self.dt_rank.unwrap_or(d_model.div_ceil(16))
    }

    pub fn validate(&self) -> Result<()> {
        if self.expand == 0 || self.d_state == 0 || self.conv_width == 0 {
            return Err(Error::config("ssm expand, d_state and conv_width must be positive"));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(Error::config(format!(
                "need 0 < dt_min <= dt_max, got {} and {}",
                self.dt_min, self.dt_max
            )));
        }
        Ok(())
    }
}

/// Shared geometry of a scan call.
struct ScanDims {
    rows: usize,
    len: usize,
    ch: usize,
    n: usize,
}

/// Run the recurrence for one batch row, writing every state into `states`
/// (`[L, ch, n]`) when given, and outputs into `y` (`[L, ch]`).
#[allow(clippy::too_many_arguments)]
fn scan_row(
    dims: &ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d_skip: &[f64],
    y: &mut [f64],
    mut states: Option<(&mut [f64], &mut [f64])>,
) -> std::result::Result<(), usize> {
    let ScanDims { len, ch, n, .. } = *dims;
    let mut h = vec![0.0; ch * n];
    for t in 0..len {
        let (bt, ct) = (&b[t * n..(t + 1) * n], &c[t * n..(t + 1) * n]);
        for d in 0..ch {
            let x = u[t * ch + d];
            let dt = delta[t * ch + d];
            let hd = &mut h[d * n..(d + 1) * n];
            let ad = &a[d * n..(d + 1) * n];
            let mut acc = 0.0;
            if let Some((_, decay)) = states.as_mut() {
                let dk = &mut decay[(t * ch + d) * n..(t * ch + d + 1) * n];
                for k in 0..n {
                    dk[k] = (dt * ad[k]).exp();
                    hd[k] = dk[k] * hd[k] + dt * bt[k] * x;
                    acc += ct[k] * hd[k];
                }
            } else {
                for k in 0..n {
                    hd[k] = (dt * ad[k]).exp() * hd[k] + dt * bt[k] * x;
                    acc += ct[k] * hd[k];
                }
            }
            y[t * ch + d] = acc + d_skip[d] * x;
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(t);
        }
        if let Some((s, _)) = states.as_mut() {
            s[t * ch * n..(t + 1) * ch * n].copy_from_slice(&h);
        }
    }
    Ok(())
}

/// Fused selective scan.
///
/// Shapes: `u, delta: [.., L, C]`, `a_log: [C, N]`, `b, c: [.., L, N]`,
/// `d_skip: [C]`. With `A = -exp(a_log)`, every channel runs
/// `h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t u_t` from `h_0 = 0` and emits
/// `y_t = <C_t, h_t> + D u_t`. States are recomputed in the backward pass
/// instead of being kept alive.
pub fn selective_scan(
    u: &Tensor,
    delta: &Tensor,
    a_log: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    if u.rank() < 2 || a_log.rank() != 2 {
        return Err(Error::dim(format!(
            "selective_scan needs u [.., L, C] and a_log [C, N], got {:?} and {:?}",
            u.shape(),
            a_log.shape()
        )));
    }
    let (len, ch) = (u.dim(-2)?, u.dim(-1)?);
    let n = a_log.shape()[1];
    let lead = &u.shape()[..u.rank() - 1];
    let bc_shape: Vec<usize> = lead.iter().copied().chain([n]).collect();
    if delta.shape() != u.shape()
        || a_log.shape()[0] != ch
        || b.shape() != bc_shape.as_slice()
        || c.shape() != bc_shape.as_slice()
        || d_skip.shape() != [ch]
    {
        return Err(Error::dim(format!(
            "selective_scan shapes disagree: u {:?}, delta {:?}, a_log {:?}, b {:?}, c {:?}, d_skip {:?}",
            u.shape(),
            delta.shape(),
            a_log.shape(),
            b.shape(),
            c.shape(),
            d_skip.shape()
        )));
    }
    let dims = ScanDims {
        rows: u.numel() / (len * ch),
        len,
        ch,
        n,
    };
    let a: Vec<f64> = a_log.data().iter().map(|v| -v.exp()).collect();
    let mut y = vec![0.0; u.numel()];
    {
        let (ud, dd, bd, cd, sd) = (u.data(), delta.data(), b.data(), c.data(), d_skip.data());
        for r in 0..dims.rows {
            let (xs, ns) = (r * len * ch..(r + 1) * len * ch, r * len * n..(r + 1) * len * n);
            scan_row(&dims, &ud[xs.clone()], &dd[xs.clone()], &a, &bd[ns.clone()], &cd[ns], &sd, &mut y[xs], None)
                .map_err(|t| {
                    Error::Numeric(format!("selective scan state became non-finite at step {t} (batch row {r})"))
                })?;
        }
    }
    let inputs = vec![u.clone(), delta.clone(), a_log.clone(), b.clone(), c.clone(), d_skip.clone()];
    Ok(Tensor::from_op("selective_scan", y, u.shape().to_vec(), inputs, move |ctx| {
        scan_backward(&dims, &a, ctx.grad, ctx.inputs)
    }))
}

fn scan_backward(dims: &ScanDims, a: &[f64], grad: &[f64], inputs: &[Tensor]) -> Vec<Option<Vec<f64>>> {
    let ScanDims { rows, len, ch, n } = *dims;
    let (ud, dd, bd, cd, sd) = (
        inputs[0].data(),
        inputs[1].data(),
        inputs[3].data(),
        inputs[4].data(),
        inputs[5].data(),
    );
    let mut gu = vec![0.0; ud.len()];
    let mut gdelta = vec![0.0; dd.len()];
    let mut ga = vec![0.0; ch * n];
    let mut gb = vec![0.0; bd.len()];
    let mut gc = vec![0.0; cd.len()];
    let mut gd = vec![0.0; ch];
    let mut states = vec![0.0; len * ch * n];
    let mut decay = vec![0.0; len * ch * n];
    let mut y = vec![0.0; len * ch];
    let mut carry = vec![0.0; ch * n];
    for r in 0..rows {
        let (xs, ns) = (r * len * ch..(r + 1) * len * ch, r * len * n..(r + 1) * len * n);
        let (u, delta, b, c) = (&ud[xs.clone()], &dd[xs.clone()], &bd[ns.clone()], &cd[ns.clone()]);
        scan_row(dims, u, delta, a, b, c, &sd, &mut y, Some((&mut states, &mut decay))).expect("forward pass was finite");
        let gy = &grad[xs.clone()];
        let (gu, gdelta) = (&mut gu[xs.clone()], &mut gdelta[xs]);
        let (gb, gc) = (&mut gb[ns.clone()], &mut gc[ns]);
        carry.fill(0.0);
        for t in (0..len).rev() {
            for d in 0..ch {
                let (x, dt, g) = (u[t * ch + d], delta[t * ch + d], gy[t * ch + d]);
                gd[d] += g * x;
                let mut gx = g * sd[d];
                let mut gdt = 0.0;
                for k in 0..n {
                    let j = d * n + k;
                    let h = states[t * ch * n + j];
                    let h_prev = if t > 0 { states[(t - 1) * ch * n + j] } else { 0.0 };
                    gc[t * n + k] += g * h;
                    let gh = g * c[t * n + k] + carry[j];
                    let abar = decay[t * ch * n + j];
                    let g_abar = gh * h_prev * abar;
                    gdt += g_abar * a[j] + gh * b[t * n + k] * x;
                    ga[j] += g_abar * dt;
                    gb[t * n + k] += gh * dt * x;
                    gx += gh * dt * b[t * n + k];
                    carry[j] = gh * abar;
                }
                gu[t * ch + d] += gx;
                gdelta[t * ch + d] += gdt;
            }
        }
    }
    // dA/d(a_log) = A.
    let ga_log: Vec<f64> = ga.iter().zip(a).map(|(g, a)| g * a).collect();
    vec![Some(gu), Some(gdelta), Some(ga_log), Some(gb), Some(gc), Some(gd)]
}

/// Per-row `valid` flags reversed within each sequence of length `len`.
pub fn flip_valid(valid: &[bool], len: usize) -> Vec<bool> {
    valid
        .chunks(len)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// One directional Mamba stream: in-projection, causal pre-convolution with
/// SiLU, input-dependent scan, SiLU gate, out-projection.
#[derive(Clone)]
pub struct MambaBlock {
    pub in_proj: Linear,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: Tensor,
    pub d_skip: Tensor,
    pub out_proj: Linear,
    d_inner: usize,
    dt_rank: usize,
    d_state: usize,
}

impl MambaBlock {
    pub fn new(init: &mut Init, d_model: usize, cfg: &SsmConfig) -> Self {
        let d_inner = cfg.expand * d_model;
        let dt_rank = cfg.dt_rank_for(d_model);
        let n = cfg.d_state;
        let in_proj = Linear::new(init, d_model, 2 * d_inner, false);
        let conv_bound = 1.0 / (cfg.conv_width as f64).sqrt();
        let conv_weight = init.uniform(&[d_inner, cfg.conv_width], conv_bound);
        let conv_bias = init.uniform(&[d_inner], conv_bound);
        let x_proj = Linear::new(init, d_inner, dt_rank + 2 * n, false);
        let dt_weight = init.uniform(&[dt_rank, d_inner], (dt_rank as f64).powf(-0.5));
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let dt_bias: Vec<f64> = (0..d_inner)
            .map(|_| {
                let dt = init.rng().random_range(lo..=hi).exp().max(1e-4);
                // softplus^{-1}(dt)
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let dt_proj = Linear {
            weight: dt_weight,
            bias: Some(Tensor::param(dt_bias, &[d_inner]).expect("dt bias shape")),
        };
        let a_log = (0..d_inner)
            .flat_map(|_| (0..n).map(|k| ((k + 1) as f64).ln()))
            .collect();
        MambaBlock {
            in_proj,
            conv_weight,
            conv_bias,
            x_proj,
            dt_proj,
            a_log: Tensor::param(a_log, &[d_inner, n]).expect("a_log shape"),
            d_skip: init.constant(&[d_inner], 1.0),
            out_proj: Linear::new(init, d_inner, d_model, false),
            d_inner,
            dt_rank,
            d_state: n,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.d_inner
    }

    /// The input-dependent scan on already expanded features `x: [.., L, d_inner]`.
    pub fn scan(&self, x: &Tensor) -> Result<Tensor> {
        let dbc = self.x_proj.forward(x)?;
        let dt_low = dbc.narrow(-1, 0, self.dt_rank)?;
        let b = dbc.narrow(-1, self.dt_rank, self.d_state)?;
        let c = dbc.narrow(-1, self.dt_rank + self.d_state, self.d_state)?;
        let delta = self.dt_proj.forward(&dt_low)?.softplus();
        selective_scan(x, &delta, &self.a_log, &b, &c, &self.d_skip)
    }

    /// `x: [.., L, D]`. `valid` (one flag per position) zeroes padded
    /// positions before the scan so that they cannot leak into real tokens.
    pub fn forward(&self, x: &Tensor, valid: Option<&[bool]>) -> Result<Tensor> {
        let (xi, z) = self.in_proj.forward(x)?.split_last_in_two()?;
        let mut xc = xi
            .depthwise_conv1d(&self.conv_weight, 1, Padding::Causal)?
            .add(&self.conv_bias)?
            .silu();
        if let Some(v) = valid {
            xc = xc.mask_rows(v)?;
        }
        let y = self.scan(&xc)?.mul(&z.silu())?;
        self.out_proj.forward(&y)
    }
}

impl Module for MambaBlock {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.in_proj.collect_params(&join(prefix, "in_proj"), out);
        out.push((join(prefix, "conv.weight"), self.conv_weight.clone()));
        out.push((join(prefix, "conv.bias"), self.conv_bias.clone()));
        self.x_proj.collect_params(&join(prefix, "x_proj"), out);
        self.dt_proj.collect_params(&join(prefix, "dt_proj"), out);
        out.push((join(prefix, "a_log"), self.a_log.clone()));
        out.push((join(prefix, "d_skip"), self.d_skip.clone()));
        self.out_proj.collect_params(&join(prefix, "out_proj"), out);
    }
}

/// Forward and backward Mamba streams averaged position-wise.
#[derive(Clone)]
pub struct BiMamba {
    pub fwd: MambaBlock,
    pub bwd: MambaBlock,
    tied: bool,
}

impl BiMamba {
    pub fn new(init: &mut Init, d_model: usize, cfg: &SsmConfig) -> Self {
        let fwd = MambaBlock::new(init, d_model, cfg);
        let bwd = MambaBlock::new(init, d_model, cfg);
        BiMamba { fwd, bwd, tied: false }
    }

    /// Both directions share one set of parameters.
    pub fn tied(init: &mut Init, d_model: usize, cfg: &SsmConfig) -> Self {
        let fwd = MambaBlock::new(init, d_model, cfg);
        BiMamba {
            bwd: fwd.clone(),
            fwd,
            tied: true,
        }
    }

    pub fn is_tied(&self) -> bool {
        self.tied
    }

    /// `H = ½ (fwd(x) + flip(bwd(flip(x))))` over the sequence axis of `x: [.., L, D]`.
    pub fn forward(&self, x: &Tensor, valid: Option<&[bool]>) -> Result<Tensor> {
        let len = x.dim(-2)?;
        let x = match valid {
            Some(v) => x.mask_rows(v)?,
            None => x.clone(),
        };
        let f = self.fwd.forward(&x, valid)?;
        let rv = valid.map(|v| flip_valid(v, len));
        let b = self.bwd.forward(&x.flip(-2)?, rv.as_deref())?.flip(-2)?;
        Ok(f.add(&b)?.scale(0.5))
    }
}

impl Module for BiMamba {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fwd.collect_params(&join(prefix, "fwd"), out);
        if !self.tied {
            self.bwd.collect_params(&join(prefix, "bwd"), out);
        }
    }
}
