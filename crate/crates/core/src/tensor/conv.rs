use super::{alloc, Tensor};
use crate::error::{Error, Result};

/// Zero-padding placement for [`Tensor::depthwise_conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Centered kernel, output length equals input length. Needs an odd kernel.
    Same,
    /// Output `t` only reads inputs `<= t`.
    Causal,
}

impl Padding {
    /// Input offset (relative to the output position) read by tap `k`.
    fn offset(self, k: usize, taps: usize, dilation: usize) -> isize {
        match self {
            Padding::Same => (k as isize - (taps as isize - 1) / 2) * dilation as isize,
            Padding::Causal => -(((taps - 1 - k) * dilation) as isize),
        }
    }
}

/// Number of input positions one output of a dilated kernel can see.
pub fn receptive_span(taps: usize, dilation: usize) -> usize {
    1 + (taps - 1) * dilation
}

impl Tensor {
    /// Per-channel 1-D convolution over the sequence axis.
    ///
    /// `self` is `[.., L, D]`, `kernel` is `[D, K]`; channel `d` only mixes
    /// with channel `d`. Out-of-range taps read zeros.
    pub fn depthwise_conv1d(&self, kernel: &Tensor, dilation: usize, padding: Padding) -> Result<Tensor> {
        if self.rank() < 2 || kernel.rank() != 2 {
            return Err(Error::dim(format!(
                "depthwise_conv1d needs [.., L, D] input and [D, K] kernel, got {:?} and {:?}",
                self.shape(),
                kernel.shape()
            )));
        }
        let (l, d) = (self.shape()[self.rank() - 2], self.shape()[self.rank() - 1]);
        let (kd, taps) = (kernel.shape()[0], kernel.shape()[1]);
        if kd != d {
            return Err(Error::dim(format!(
                "kernel {:?} does not match {d} channels of input {:?}",
                kernel.shape(),
                self.shape()
            )));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be at least 1"));
        }
        if padding == Padding::Same && taps % 2 == 0 {
            return Err(Error::config(format!(
                "kernel size {taps} is even; symmetric same padding needs an odd kernel"
            )));
        }
        let batch = self.numel() / (l * d);
        let offsets: Vec<isize> = (0..taps).map(|k| padding.offset(k, taps, dilation)).collect();

        // kernel transposed to [K, D] so the inner loop runs over contiguous channels
        let kt = transpose_kd(&kernel.data(), d, taps);
        let mut out = alloc::zeroed(self.numel());
        {
            let x = self.data();
            for b in 0..batch {
                let base = b * l * d;
                for t in 0..l {
                    let o = &mut out[base + t * d..base + (t + 1) * d];
                    for (k, &off) in offsets.iter().enumerate() {
                        let s = t as isize + off;
                        if s < 0 || s >= l as isize {
                            continue;
                        }
                        let xs = &x[base + s as usize * d..base + (s as usize + 1) * d];
                        let w = &kt[k * d..(k + 1) * d];
                        for c in 0..d {
                            o[c] += xs[c] * w[c];
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "depthwise_conv1d",
            out,
            self.shape().to_vec(),
            vec![self.clone(), kernel.clone()],
            move |ctx| {
                let g = ctx.grad;
                let gx = ctx.wants(0).then(|| {
                    let kt = transpose_kd(&ctx.inputs[1].data(), d, taps);
                    let mut gx = alloc::zeroed(batch * l * d);
                    for b in 0..batch {
                        let base = b * l * d;
                        for t in 0..l {
                            let gt = &g[base + t * d..base + (t + 1) * d];
                            for (k, &off) in offsets.iter().enumerate() {
                                let s = t as isize + off;
                                if s < 0 || s >= l as isize {
                                    continue;
                                }
                                let w = &kt[k * d..(k + 1) * d];
                                let gs = &mut gx[base + s as usize * d..base + (s as usize + 1) * d];
                                for c in 0..d {
                                    gs[c] += gt[c] * w[c];
                                }
                            }
                        }
                    }
                    gx
                });
                let gk = ctx.wants(1).then(|| {
                    let x = ctx.inputs[0].data();
                    let mut gkt = vec![0.0; taps * d];
                    for b in 0..batch {
                        let base = b * l * d;
                        for t in 0..l {
                            let gt = &g[base + t * d..base + (t + 1) * d];
                            for (k, &off) in offsets.iter().enumerate() {
                                let s = t as isize + off;
                                if s < 0 || s >= l as isize {
                                    continue;
                                }
                                let xs = &x[base + s as usize * d..base + (s as usize + 1) * d];
                                let acc = &mut gkt[k * d..(k + 1) * d];
                                for c in 0..d {
                                    acc[c] += gt[c] * xs[c];
                                }
                            }
                        }
                    }
                    transpose_kd(&gkt, taps, d)
                });
                vec![gx, gk]
            },
        ))
    }
}

/// Row-major `[rows, cols]` → `[cols, rows]`.
fn transpose_kd(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::new((0..12).map(f64::from).collect(), &[4, 3]).unwrap();
        let k = Tensor::full(&[3, 1], 1.0).unwrap();
        let y = x.depthwise_conv1d(&k, 5, Padding::Same).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn hand_convolution_with_zero_padding() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        let k = Tensor::full(&[1, 3], 1.0).unwrap();
        let y = x.depthwise_conv1d(&k, 1, Padding::Same).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn causal_padding_reads_only_the_past() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[4, 1]).unwrap();
        let k = Tensor::new(vec![10.0, 1.0], &[1, 2]).unwrap();
        let y = x.depthwise_conv1d(&k, 1, Padding::Causal).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 12.0, 23.0, 34.0]);
    }

    #[test]
    fn even_kernel_rejected_for_same_padding() {
        let x = Tensor::zeros(&[4, 1]).unwrap();
        let k = Tensor::zeros(&[1, 4]).unwrap();
        assert!(matches!(
            x.depthwise_conv1d(&k, 1, Padding::Same),
            Err(Error::Config(_))
        ));
        assert!(x.depthwise_conv1d(&k, 1, Padding::Causal).is_ok());
    }

    #[test]
    fn channels_do_not_mix() {
        let mut v = vec![0.0; 10];
        v[4] = 1.0; // position 2, channel 0
        let x = Tensor::new(v, &[5, 2]).unwrap();
        let k = Tensor::full(&[2, 3], 1.0).unwrap();
        let y = x.depthwise_conv1d(&k, 1, Padding::Same).unwrap().to_vec();
        for t in 0..5 {
            assert_eq!(y[t * 2 + 1], 0.0);
        }
    }

    #[test]
    fn span_formula() {
        assert_eq!(receptive_span(9, 27), 217);
        assert_eq!(receptive_span(9, 1), 9);
    }
}
