use crate::data::{MaskedBatch, Token};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of `logits: [.., V]` against `targets` over the rows
/// where `selected` is true. Other rows get exactly zero gradient.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[Token], selected: &[bool]) -> Result<Tensor> {
    let v = logits.dim(-1)?;
    let rows = logits.numel() / v;
    if targets.len() != rows || selected.len() != rows {
        return Err(Error::dim(format!(
            "{} targets / {} flags for {rows} logit rows of {:?}",
            targets.len(),
            selected.len(),
            logits.shape()
        )));
    }
    let count = selected.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(Error::Step("loss mask selects no positions".into()));
    }
    if let Some(&t) = targets.iter().zip(selected).find(|(&t, &s)| s && t as usize >= v).map(|(t, _)| t) {
        return Err(Error::Input(format!("target id {t} out of range for {v} classes")));
    }
    let mut probs = vec![0.0; count * v];
    let mut total = 0.0;
    {
        let x = logits.data();
        let mut k = 0;
        for r in (0..rows).filter(|&r| selected[r]) {
            let row = &x[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|a| (a - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[targets[r] as usize];
            for (p, a) in probs[k * v..(k + 1) * v].iter_mut().zip(row) {
                *p = (a - lse).exp();
            }
            k += 1;
        }
    }
    let loss = total / count as f64;
    let targets = targets.to_vec();
    let selected = selected.to_vec();
    Ok(Tensor::from_op("masked_cross_entropy", vec![loss], vec![], vec![logits.clone()], move |ctx| {
        let scale = ctx.grad[0] / count as f64;
        let mut g = vec![0.0; rows * v];
        let mut k = 0;
        for r in (0..rows).filter(|&r| selected[r]) {
            let dst = &mut g[r * v..(r + 1) * v];
            for (d, p) in dst.iter_mut().zip(&probs[k * v..(k + 1) * v]) {
                *d = scale * p;
            }
            dst[targets[r] as usize] -= scale;
            k += 1;
        }
        vec![Some(g)]
    }))
}

/// Masked-LM objective: mean cross-entropy over the batch's selected positions.
pub fn mlm_loss(logits: &Tensor, batch: &MaskedBatch) -> Result<Tensor> {
    masked_cross_entropy(logits, &batch.target_ids, &batch.loss_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn uniform_logits_cost_ln_v() {
        let logits = Tensor::zeros(&[2, 3, 7]).unwrap();
        let l = masked_cross_entropy(&logits, &[0, 1, 2, 3, 4, 5], &[true, false, true, true, false, true]).unwrap();
        assert!((l.item().unwrap() - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let mut x = vec![0.0; 14];
        x[3] = 30.0;
        x[7 + 1] = 30.0;
        let l = masked_cross_entropy(&Tensor::new(x, &[2, 7]).unwrap(), &[3, 1], &[true, true]).unwrap();
        assert!(l.item().unwrap() < 1e-9);
    }

    #[test]
    fn single_selected_position_is_plain_cross_entropy() {
        let x = vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1];
        let l = masked_cross_entropy(&Tensor::new(x.clone(), &[2, 3]).unwrap(), &[2, 0], &[false, true]).unwrap();
        let row = &x[3..];
        let want = -(row[0].exp() / row.iter().map(|a: &f64| a.exp()).sum::<f64>()).ln();
        assert!((l.item().unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn empty_selection_is_a_step_error() {
        let err = masked_cross_entropy(&Tensor::zeros(&[2, 7]).unwrap(), &[0, 0], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::Step(_)));
    }

    #[test]
    fn gradient_ignores_unselected_rows() {
        let x = Tensor::param((0..21).map(|i| (i as f64 * 0.37).sin()).collect(), &[3, 7]).unwrap();
        let l = masked_cross_entropy(&x, &[1, 2, 3], &[true, false, true]).unwrap();
        l.backward().unwrap();
        let g = x.grad().unwrap();
        assert!(g[7..14].iter().all(|&v| v == 0.0));
        let err = grad_check(|x| masked_cross_entropy(x, &[1, 2, 3], &[true, false, true]), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
