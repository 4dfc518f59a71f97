//! Model configuration, layer stack assembly, ablation variants and
//! checkpoint files.

mod checkpoint;

pub use checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint, CheckpointInfo, TensorEntry, CKPT_MAGIC, CKPT_VERSION};

use std::fmt;
use std::str::FromStr;

use crate::blocks::{dilation_schedule, gate_dilation, Attention, AttnMode, GatedMlp, GcmbBlock};
use crate::config::{parse_kv, parse_value, render, KvSection};
use crate::data::{Token, PAD, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::nn::{join, Init, LayerNorm, Linear, Module, INIT_STD};
use crate::ssm::{BiMamba, SsmConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoFourier,
    NoGcmb,
    NoGcmbNoGmlp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoFourier, Variant::NoGcmb, Variant::NoGcmbNoGmlp];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoFourier => "no_fourier",
            Variant::NoGcmb => "no_gcmb",
            Variant::NoGcmbNoGmlp => "no_gcmb_no_gmlp",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::config(format!("variant must be one of full, no_fourier, no_gcmb, no_gcmb_no_gmlp, got '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub num_gcmb: usize,
    pub dilation_base: usize,
    pub kernel: usize,
    pub heads: usize,
    pub attn_mode: AttnMode,
    pub variant: Variant,
    pub train_len: usize,
    pub ssm_expand: usize,
    pub ssm_state: usize,
    pub fope_harmonics: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            num_layers: 12,
            num_gcmb: 5,
            dilation_base: 3,
            kernel: 9,
            heads: 16,
            attn_mode: AttnMode::Fope,
            variant: Variant::Full,
            train_len: 256,
            ssm_expand: 2,
            ssm_state: 16,
            fope_harmonics: 4,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl KvSection for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "dim" => self.dim = parse_value(key, value)?,
            "num_layers" => self.num_layers = parse_value(key, value)?,
            "num_gcmb" => self.num_gcmb = parse_value(key, value)?,
            "dilation_base" => self.dilation_base = parse_value(key, value)?,
            "kernel" => self.kernel = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "attn_mode" => self.attn_mode = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "train_len" => self.train_len = parse_value(key, value)?,
            "ssm_expand" => self.ssm_expand = parse_value(key, value)?,
            "ssm_state" => self.ssm_state = parse_value(key, value)?,
            "fope_harmonics" => self.fope_harmonics = parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dim", self.dim.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("num_gcmb", self.num_gcmb.to_string()),
            ("dilation_base", self.dilation_base.to_string()),
            ("kernel", self.kernel.to_string()),
            ("heads", self.heads.to_string()),
            ("attn_mode", self.attn_mode.to_string()),
            ("variant", self.variant.to_string()),
            ("train_len", self.train_len.to_string()),
            ("ssm_expand", self.ssm_expand.to_string()),
            ("ssm_state", self.ssm_state.to_string()),
            ("fope_harmonics", self.fope_harmonics.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("num_layers", self.num_layers),
            ("dilation_base", self.dilation_base),
            ("kernel", self.kernel),
            ("heads", self.heads),
            ("train_len", self.train_len),
            ("ssm_expand", self.ssm_expand),
            ("ssm_state", self.ssm_state),
            ("fope_harmonics", self.fope_harmonics),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k}: must be positive")));
        }
        if self.num_gcmb + 1 > self.num_layers {
            return Err(Error::config(format!(
                "num_gcmb: {} leaves no room for the final layer of a {}-layer model",
                self.num_gcmb, self.num_layers
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel: {} must be odd", self.kernel)));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!("heads: {} does not divide dim {}", self.heads, self.dim)));
        }
        if (self.dim / self.heads) % 2 != 0 {
            return Err(Error::config(format!(
                "heads: head width {} / {} is odd",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig {
            expand: self.ssm_expand,
            d_state: self.ssm_state,
            ..SsmConfig::default()
        }
    }

    /// Canonical `key = value` text.
    pub fn to_text(&self) -> String {
        render(&[self])
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (_, k, v) in parse_kv(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::config(format!("{k}: unknown model config key")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One entry of the layer stack after the embedding.
#[derive(Clone)]
pub enum Layer {
    Gcmb(GcmbBlock),
    /// `X + BiMamba(X)` followed by the gated MLP.
    MambaMlp { bimamba: BiMamba, mlp: GatedMlp },
    /// `LayerNorm(X + BiMamba(X))`.
    MambaOnly { bimamba: BiMamba, norm: LayerNorm },
    /// `X + Attn(X)`.
    Attention(Attention),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Gcmb,
    MambaMlp,
    MambaOnly,
    Attention,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Gcmb(_) => LayerKind::Gcmb,
            Layer::MambaMlp { .. } => LayerKind::MambaMlp,
            Layer::MambaOnly { .. } => LayerKind::MambaOnly,
            Layer::Attention(_) => LayerKind::Attention,
        }
    }

    pub fn forward(&self, x: &Tensor, valid: Option<&[bool]>) -> Result<Tensor> {
        match self {
            Layer::Gcmb(g) => g.forward(x, valid),
            Layer::MambaMlp { bimamba, mlp } => mlp.forward(&x.add(&bimamba.forward(x, valid)?)?),
            Layer::MambaOnly { bimamba, norm } => norm.forward(&x.add(&bimamba.forward(x, valid)?)?),
            Layer::Attention(a) => x.add(&a.forward(x, valid)?),
        }
    }
}

impl Module for Layer {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            Layer::Gcmb(g) => g.collect_params(&join(prefix, "gcmb"), out),
            Layer::MambaMlp { bimamba, mlp } => {
                bimamba.collect_params(&join(prefix, "bimamba"), out);
                mlp.collect_params(&join(prefix, "gmlp"), out);
            }
            Layer::MambaOnly { bimamba, norm } => {
                bimamba.collect_params(&join(prefix, "bimamba"), out);
                norm.collect_params(&join(prefix, "norm"), out);
            }
            Layer::Attention(a) => a.collect_params(&join(prefix, "attn"), out),
        }
    }
}

/// The assembled network: token embedding, layer stack, vocabulary head.
#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<Layer>,
    pub head: Linear,
}

/// Build the model described by `cfg`, initialized from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut init = Init::new(cfg.seed);
    let d = cfg.dim;
    let ssm = cfg.ssm();
    let embed = init.trunc_normal(&[VOCAB_SIZE, d], INIT_STD);
    let mamba_mlp = |init: &mut Init| Layer::MambaMlp {
        bimamba: BiMamba::new(init, d, &ssm),
        mlp: GatedMlp::new(init, d, cfg.mlp_ratio * d),
    };
    let mamba_only = |init: &mut Init| Layer::MambaOnly {
        bimamba: BiMamba::new(init, d, &ssm),
        norm: LayerNorm::new(init, d),
    };
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let body = cfg.num_layers - 1;
    match cfg.variant {
        Variant::Full | Variant::NoFourier => {
            for dil in dilation_schedule(cfg.dilation_base, cfg.num_gcmb) {
                let gate = gate_dilation(dil, cfg.dilation_base);
                layers.push(Layer::Gcmb(GcmbBlock::new(&mut init, d, cfg.kernel, dil, gate, &ssm)?));
            }
            while layers.len() < body {
                layers.push(mamba_mlp(&mut init));
            }
        }
        Variant::NoGcmb => (0..body).for_each(|_| layers.push(mamba_mlp(&mut init))),
        Variant::NoGcmbNoGmlp => (0..body).for_each(|_| layers.push(mamba_only(&mut init))),
    }
    layers.push(match cfg.variant {
        Variant::NoFourier => mamba_mlp(&mut init),
        _ => Layer::Attention(Attention::new(&mut init, d, cfg.heads, cfg.attn_mode, cfg.train_len, cfg.fope_harmonics)?),
    });
    let head = Linear::new(&mut init, d, VOCAB_SIZE, true);
    Ok(Model {
        config: cfg.clone(),
        embed,
        layers,
        head,
    })
}

/// `cfg` with its variant replaced.
pub fn build_variant(cfg: &ModelConfig, variant: Variant) -> Result<Model> {
    build_model(&ModelConfig {
        variant,
        ..cfg.clone()
    })
}

/// Validity flags (`false` at `PAD`) for a flat id buffer.
pub fn valid_mask(ids: &[Token]) -> Vec<bool> {
    ids.iter().map(|&t| t != PAD).collect()
}

impl Model {
    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }

    fn check_ids(ids: &[Token], batch: usize, len: usize) -> Result<()> {
        if batch == 0 || len == 0 || ids.len() != batch * len {
            return Err(Error::dim(format!("{} ids do not form a [{batch}, {len}] batch", ids.len())));
        }
        Ok(())
    }

    /// Final hidden states `[B, L, D]`. Positions whose `valid` flag is false
    /// (default: the `PAD` positions) cannot influence the other positions.
    pub fn hidden(&self, ids: &[Token], batch: usize, len: usize, valid: Option<&[bool]>) -> Result<Tensor> {
        Self::check_ids(ids, batch, len)?;
        let derived;
        let valid = match valid {
            Some(v) => Some(v),
            None if ids.contains(&PAD) => {
                derived = valid_mask(ids);
                Some(derived.as_slice())
            }
            None => None,
        };
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let mut x = Tensor::embedding(&self.embed, &idx, &[batch, len])?;
        for layer in &self.layers {
            x = layer.forward(&x, valid)?;
        }
        Ok(x)
    }

    /// Vocabulary logits `[B, L, V]`.
    pub fn forward(&self, ids: &[Token], batch: usize, len: usize, valid: Option<&[bool]>) -> Result<Tensor> {
        self.head.forward(&self.hidden(ids, batch, len, valid)?)
    }

    /// Mean of the final hidden states over the valid positions of each row: `[B, D]`.
    pub fn extract_embeddings(&self, ids: &[Token], batch: usize, len: usize) -> Result<Tensor> {
        Self::check_ids(ids, batch, len)?;
        let valid = valid_mask(ids);
        if let Some(r) = (0..batch).find(|&r| !valid[r * len..(r + 1) * len].contains(&true)) {
            return Err(Error::Input(format!("sequence {r} consists only of padding")));
        }
        let h = self.hidden(ids, batch, len, Some(&valid))?;
        let d = self.config.dim;
        let mut out = vec![0.0; batch * d];
        {
            let hd = h.data();
            for r in 0..batch {
                let acc = &mut out[r * d..(r + 1) * d];
                let mut n = 0usize;
                for t in (0..len).filter(|&t| valid[r * len + t]) {
                    let row = &hd[(r * len + t) * d..(r * len + t + 1) * d];
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    n += 1;
                }
                acc.iter_mut().for_each(|a| *a /= n as f64);
            }
        }
        Tensor::new(out, &[batch, d])
    }
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("layers", &self.layer_kinds())
            .field("num_params", &self.num_params())
            .finish()
    }
}

impl Module for Model {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "embed.weight"), self.embed.clone()));
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&join(prefix, &format!("layers.{i}")), out);
        }
        self.head.collect_params(&join(prefix, "head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;
    use LayerKind::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            dim: 8,
            num_layers: 4,
            num_gcmb: 2,
            heads: 2,
            kernel: 3,
            ssm_state: 4,
            train_len: 16,
            variant,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_stack_layout() {
        let m = build_model(&ModelConfig {
            dim: 32,
            ssm_state: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut want = vec![Gcmb; 5];
        want.extend([MambaMlp; 6]);
        want.push(Attention);
        assert_eq!(m.layer_kinds(), want);
        let dil: Vec<(usize, usize)> = m
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Gcmb(g) => Some(g.dilations()),
                _ => None,
            })
            .collect();
        assert_eq!(dil, [(1, 1), (1, 1), (3, 1), (9, 3), (27, 9)]);
    }

    #[test]
    fn zero_gcmb_is_a_pure_mamba_stack() {
        let m = build_model(&ModelConfig { num_gcmb: 0, ..tiny(Variant::Full) }).unwrap();
        assert_eq!(m.layer_kinds(), [MambaMlp, MambaMlp, MambaMlp, Attention]);
    }

    #[test]
    fn variant_structure() {
        let names = |v| build_model(&tiny(v)).unwrap().named_params().into_iter().map(|(n, _)| n).collect::<Vec<_>>();
        assert!(!names(Variant::NoFourier).iter().any(|n| n.contains("attn")));
        assert!(!names(Variant::NoGcmb).iter().any(|n| n.contains("conv_a") || n.contains("conv_b")));
        let kinds = |v| build_model(&tiny(v)).unwrap().layer_kinds();
        assert_eq!(kinds(Variant::NoFourier), [Gcmb, Gcmb, MambaMlp, MambaMlp]);
        assert_eq!(kinds(Variant::NoGcmb), [MambaMlp, MambaMlp, MambaMlp, Attention]);
        assert_eq!(kinds(Variant::NoGcmbNoGmlp), [MambaOnly, MambaOnly, MambaOnly, Attention]);
        let count = |v| build_model(&tiny(v)).unwrap().num_params();
        assert!(count(Variant::Full) > count(Variant::NoGcmbNoGmlp));
        assert!(count(Variant::NoGcmb) > count(Variant::NoGcmbNoGmlp));
    }

    #[test]
    fn parameter_count_matches_declared_widths() {
        let cfg = tiny(Variant::Full);
        let (d, v, di, n, r) = (8, 7, 16, 4, 1);
        let mamba = d * 2 * di + di * 4 + di + di * (r + 2 * n) + r * di + di + di * n + di + di * d;
        let bimamba = 2 * mamba;
        let gcmb = bimamba + 2 * (d * 3 + d) + (d * 2 * d + 2 * d) + (2 * d * d + d) + 2 * d;
        let gmlp = d * 8 * d + 8 * d + 4 * d * d + d;
        let attn = 4 * (d * d + d) + (d / 2 / 2) * 4;
        let want = v * d + 2 * gcmb + (bimamba + gmlp) + attn + d * v + v;
        assert_eq!(build_model(&cfg).unwrap().num_params(), want);
    }

    #[test]
    fn embedding_has_no_positional_parameters() {
        let m = build_model(&tiny(Variant::Full)).unwrap();
        let embed: Vec<_> = m.named_params().into_iter().filter(|(n, _)| n.starts_with("embed")).collect();
        assert_eq!(embed.len(), 1);
        assert_eq!(embed[0].1.shape(), &[VOCAB_SIZE, 8]);
    }

    #[test]
    fn equal_seeds_give_identical_parameters() {
        let (a, b) = (build_model(&tiny(Variant::Full)).unwrap(), build_model(&tiny(Variant::Full)).unwrap());
        for ((na, pa), (nb, pb)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(na, &nb);
            assert_eq!(pa.to_vec(), pb.to_vec());
        }
    }

    #[test]
    fn config_validation_names_the_field() {
        let bad = |c: ModelConfig| c.validate().unwrap_err().to_string();
        assert!(bad(ModelConfig { num_gcmb: 12, ..ModelConfig::default() }).contains("num_gcmb"));
        assert!(bad(ModelConfig { heads: 5, ..ModelConfig::default() }).contains("heads"));
        assert!(bad(ModelConfig { kernel: 8, ..ModelConfig::default() }).contains("kernel"));
        assert!(bad(ModelConfig { dim: 0, ..ModelConfig::default() }).contains("dim"));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = tiny(Variant::NoGcmb);
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("bogus = 1").unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn single_token_forward() {
        let m = build_model(&tiny(Variant::Full)).unwrap();
        let y = m.forward(&[2], 1, 1, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, VOCAB_SIZE]);
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert!(matches!(m.forward(&[9], 1, 1, None), Err(Error::Input(_))));
    }

    #[test]
    fn batch_rows_do_not_mix() {
        let m = build_model(&tiny(Variant::Full)).unwrap();
        let a: Vec<Token> = vec![0, 1, 2, 3, 0, 1];
        let b: Vec<Token> = vec![3, 3, 2, 1, 0, 0];
        let ab: Vec<Token> = a.iter().chain(&b).copied().collect();
        let ba: Vec<Token> = b.iter().chain(&a).copied().collect();
        let y1 = m.forward(&ab, 2, 6, None).unwrap().to_vec();
        let y2 = m.forward(&ba, 2, 6, None).unwrap().to_vec();
        let half = 6 * VOCAB_SIZE;
        assert_eq!(&y1[..half], &y2[half..]);
        assert_eq!(&y1[half..], &y2[..half]);
    }

    #[test]
    fn longer_than_training_length_is_accepted() {
        for mode in [AttnMode::Fope, AttnMode::Rope] {
            let m = build_model(&ModelConfig { attn_mode: mode, ..tiny(Variant::Full) }).unwrap();
            let ids: Vec<Token> = (0..32).map(|i| (i % 4) as Token).collect();
            let y = m.forward(&ids, 1, 32, None).unwrap();
            assert!(y.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn padding_does_not_change_embeddings() {
        for v in Variant::ALL {
            let m = build_model(&tiny(v)).unwrap();
            let ids: Vec<Token> = vec![0, 3, 1, 1, 2, 0, 3];
            let mut padded = ids.clone();
            padded.extend([PAD; 5]);
            let a = m.extract_embeddings(&ids, 1, 7).unwrap().to_vec();
            let b = m.extract_embeddings(&padded, 1, 12).unwrap().to_vec();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-9, "{v}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn embedding_of_single_token_is_its_hidden_state() {
        let m = build_model(&tiny(Variant::Full)).unwrap();
        let e = m.extract_embeddings(&[1], 1, 1).unwrap().to_vec();
        assert_eq!(e, m.hidden(&[1], 1, 1, None).unwrap().to_vec());
        assert!(matches!(m.extract_embeddings(&[PAD, PAD], 1, 2), Err(Error::Input(_))));
    }

    #[test]
    fn end_to_end_gradients() {
        let cfg = ModelConfig {
            num_layers: 2,
            num_gcmb: 1,
            ..tiny(Variant::Full)
        };
        let m = build_model(&cfg).unwrap();
        let mut init = Init::new(77);
        for (_, w) in m.named_params() {
            let v = init.normal(w.shape(), 0.4).to_vec();
            w.data_mut().unwrap().copy_from_slice(&v);
        }
        let ids: Vec<Token> = vec![0, 1, 5, 3, 2, 2, 1, 0];
        let params: Vec<Tensor> = m.named_params().into_iter().map(|(_, p)| p).collect();
        let err = grad_check_params(|| m.forward(&ids, 1, 8, None), &params, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
