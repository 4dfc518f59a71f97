//! Small building blocks shared by the layers: parameter initialization,
//! named-parameter traversal, linear and layer-norm modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::Tensor;

/// Epsilon inside every layer norm.
pub const LN_EPS: f64 = 1e-8;

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

/// Anything that owns trainable tensors.
pub trait Module {
    /// Append `(qualified name, tensor)` for every parameter, in a fixed order.
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded source of initial parameter values.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Normal(0, std) truncated to ±2 std by rejection.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = normal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor::param(data, shape).expect("init shape")
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor::param(data, shape).expect("init shape")
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::param(data, shape).expect("init shape")
    }

    pub fn constant(&mut self, shape: &[usize], v: f64) -> Tensor {
        Tensor::param(vec![v; shape.iter().product()], shape).expect("init shape")
    }
}

/// `y = x · W + b` with `W: [in, out]`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            weight: init.trunc_normal(&[d_in, d_out], INIT_STD),
            bias: bias.then(|| init.constant(&[d_out], 0.0)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.weight, self.bias.as_ref())
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Module for Linear {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl LayerNorm {
    pub fn new(init: &mut Init, d: usize) -> Self {
        LayerNorm {
            scale: init.constant(&[d], 1.0),
            shift: init.constant(&[d], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.scale, &self.shift, LN_EPS)
    }
}

impl Module for LayerNorm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "norm_scale"), self.scale.clone()));
        out.push((join(prefix, "bias"), self.shift.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_stays_in_bounds() {
        let t = Init::new(1).trunc_normal(&[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut init = Init::new(2);
        let x = init.normal(&[16, 32], 3.0);
        let y = LayerNorm::new(&mut init, 32).forward(&x).unwrap().to_vec();
        for row in y.chunks(32) {
            let mu = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 32.0;
            assert!(mu.abs() < 1e-9, "{mu}");
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }
    }

    #[test]
    fn param_names_are_qualified() {
        let mut init = Init::new(3);
        let lin = Linear::new(&mut init, 2, 3, true);
        let mut out = Vec::new();
        lin.collect_params("head", &mut out);
        let names: Vec<_> = out.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["head.weight", "head.bias"]);
        assert_eq!(lin.num_params(), 9);
    }
}
