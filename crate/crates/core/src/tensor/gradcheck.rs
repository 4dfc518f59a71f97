//! Central finite-difference checks of recorded backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Reduce a non-scalar output with fixed pseudo-random weights so that
/// constraints such as "softmax rows sum to one" do not zero the gradient.
fn scalarize(y: Tensor) -> Result<Tensor> {
    if y.numel() == 1 {
        return Ok(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = Tensor::new(w, y.shape())?;
    Ok(y.mul(&w)?.sum())
}

fn eval(f: &dyn Fn() -> Result<Tensor>) -> Result<f64> {
    let _g = no_grad();
    scalarize(f()?)?.item()
}

/// Max over all coordinates of every tensor in `params` of
/// `|analytic − central difference| / max(1, |analytic|)`.
///
/// `params` are leaves that `f` reads; they are perturbed in place and restored.
/// Their accumulated gradients are cleared on return.
pub fn grad_check_params<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be > 0, got {h}")));
    }
    if let Some(p) = params.iter().find(|p| !p.requires_grad() || !p.is_leaf()) {
        return Err(Error::Usage(format!(
            "grad_check needs leaf tensors that require grad, got {p:?}"
        )));
    }
    let first = eval(&f)?;
    let second = eval(&f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    params.iter().for_each(Tensor::zero_grad);
    scalarize(f()?)?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    params.iter().for_each(Tensor::zero_grad);

    let mut worst: f64 = 0.0;
    for (p, ga) in params.iter().zip(&analytic) {
        for (i, &a) in ga.iter().enumerate() {
            let orig = p.data()[i];
            p.data_mut()?[i] = orig + h;
            let plus = eval(&f);
            p.data_mut()?[i] = orig - h;
            let minus = eval(&f);
            p.data_mut()?[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Finite-difference check of `f` with respect to its input `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::param(x.to_vec(), x.shape())?;
    grad_check_params(|| f(&leaf), std::slice::from_ref(&leaf), h)
}
