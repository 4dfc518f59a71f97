//! Wisteria-specific layers: the gated-convolution BiMamba block, the
//! gated MLP and the position-aware attention layer.

pub mod attention;
pub mod position;

pub use attention::{attention_probs, AttnMode, Attention};
pub use position::{rope_freqs, rope_rotate, Fope, DEFAULT_HARMONICS, ROPE_THETA};

use crate::error::{Error, Result};
use crate::nn::{join, Init, LayerNorm, Linear, Module};
use crate::ssm::{BiMamba, SsmConfig};
use crate::tensor::{receptive_span, Padding, Tensor};

/// Dilations of the first `num_gcmb` layers: `[1, 1, n, n², n³, ...]`.
pub fn dilation_schedule(base: usize, num_gcmb: usize) -> Vec<usize> {
    (0..num_gcmb)
        .map(|i| if i == 0 { 1 } else { base.saturating_pow(i as u32 - 1) })
        .collect()
}

/// Dilation of the gate convolution paired with a feature convolution of dilation `d`.
pub fn gate_dilation(d: usize, base: usize) -> usize {
    (d / base.max(1)).max(1)
}

/// Gated convolution fused with a BiMamba stream pair.
#[derive(Clone)]
pub struct GcmbBlock {
    pub bimamba: BiMamba,
    pub conv_a: Tensor,
    pub conv_a_bias: Tensor,
    pub conv_b: Tensor,
    pub conv_b_bias: Tensor,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub norm: LayerNorm,
    dilation_a: usize,
    dilation_b: usize,
}

impl GcmbBlock {
    pub fn new(init: &mut Init, d_model: usize, kernel: usize, dilation_a: usize, dilation_b: usize, ssm: &SsmConfig) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!("kernel: size {kernel} must be odd")));
        }
        if dilation_a == 0 || dilation_b == 0 {
            return Err(Error::config("dilations must be at least 1"));
        }
        let bimamba = BiMamba::new(init, d_model, ssm);
        let bound = 1.0 / (kernel as f64).sqrt();
        Ok(GcmbBlock {
            bimamba,
            conv_a: init.uniform(&[d_model, kernel], bound),
            conv_a_bias: init.constant(&[d_model], 0.0),
            conv_b: init.uniform(&[d_model, kernel], bound),
            conv_b_bias: init.constant(&[d_model], 0.0),
            mlp_in: Linear::new(init, d_model, 2 * d_model, true),
            mlp_out: Linear::new(init, 2 * d_model, d_model, true),
            norm: LayerNorm::new(init, d_model),
            dilation_a,
            dilation_b,
        })
    }

    pub fn dilations(&self) -> (usize, usize) {
        (self.dilation_a, self.dilation_b)
    }

    pub fn kernel(&self) -> usize {
        self.conv_a.shape()[1]
    }

    /// How far (in positions, either side) one output of the convolution path can see.
    pub fn conv_reach(&self) -> usize {
        let span = receptive_span(self.kernel(), self.dilation_a.max(self.dilation_b));
        (span - 1) / 2
    }

    /// `LayerNorm(MLP(H + GeLU(conv_a H) ⊙ σ(conv_b H)))`.
    pub fn gated_conv_fusion(&self, h: &Tensor, valid: Option<&[bool]>) -> Result<Tensor> {
        let h = match valid {
            Some(v) => h.mask_rows(v)?,
            None => h.clone(),
        };
        let feat = h
            .depthwise_conv1d(&self.conv_a, self.dilation_a, Padding::Same)?
            .add(&self.conv_a_bias)?
            .gelu();
        let gate = h
            .depthwise_conv1d(&self.conv_b, self.dilation_b, Padding::Same)?
            .add(&self.conv_b_bias)?
            .sigmoid();
        let fused = h.add(&feat.mul(&gate)?)?;
        let m = self.mlp_out.forward(&self.mlp_in.forward(&fused)?.gelu())?;
        self.norm.forward(&m)
    }

    pub fn forward(&self, x: &Tensor, valid: Option<&[bool]>) -> Result<Tensor> {
        let h = self.bimamba.forward(x, valid)?;
        self.gated_conv_fusion(&h, valid)
    }
}

impl Module for GcmbBlock {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.bimamba.collect_params(&join(prefix, "bimamba"), out);
        out.push((join(prefix, "conv_a.weight"), self.conv_a.clone()));
        out.push((join(prefix, "conv_a.bias"), self.conv_a_bias.clone()));
        out.push((join(prefix, "conv_b.weight"), self.conv_b.clone()));
        out.push((join(prefix, "conv_b.bias"), self.conv_b_bias.clone()));
        self.mlp_in.collect_params(&join(prefix, "mlp_in"), out);
        self.mlp_out.collect_params(&join(prefix, "mlp_out"), out);
        self.norm.collect_params(&join(prefix, "norm"), out);
    }
}

/// `Z = Y + W₂ (SiLU(U) ⊙ σ(G)) + b₂` with `[U, G] = split(W₁ Y + b₁)`.
#[derive(Clone)]
pub struct GatedMlp {
    pub w1: Linear,
    pub w2: Linear,
}

impl GatedMlp {
    pub fn new(init: &mut Init, d_model: usize, hidden: usize) -> Self {
        GatedMlp {
            w1: Linear::new(init, d_model, 2 * hidden, true),
            w2: Linear::new(init, hidden, d_model, true),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w2.weight.shape()[0]
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let (u, g) = self.w1.forward(y)?.split_last_in_two()?;
        y.add(&self.w2.forward(&u.silu().mul(&g.sigmoid())?)?)
    }
}

impl Module for GatedMlp {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.w1.collect_params(&join(prefix, "w1"), out);
        self.w2.collect_params(&join(prefix, "w2"), out);
    }
}
