//! BERT-style masking for the masked-LM objective.

use rand::Rng;

use super::vocab::{Token, MASK, PAD};
use crate::error::{Error, Result};

/// Selection probability and the split of selected positions into
/// `[MASK]` / random nucleotide / unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub p_select: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            p_select: 0.15,
            p_mask: 0.8,
            p_random: 0.1,
            p_keep: 0.1,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_select, self.p_mask, self.p_random, self.p_keep];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config(format!("mask probabilities must lie in [0, 1]: {self:?}")));
        }
        let total = self.p_mask + self.p_random + self.p_keep;
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "p_mask + p_random + p_keep must sum to 1, got {total}"
            )));
        }
        Ok(())
    }
}

/// One masked sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedRow {
    pub input_ids: Vec<Token>,
    /// Original tokens at every position.
    pub target_ids: Vec<Token>,
    /// True exactly at the selected positions.
    pub loss_mask: Vec<bool>,
}

/// Select positions and corrupt them. `PAD` is never selected; random
/// replacement draws uniformly from `ACGT`.
pub fn apply_mlm_mask<R: Rng>(ids: &[Token], rng: &mut R, cfg: &MaskConfig) -> Result<MaskedRow> {
    cfg.validate()?;
    let mut input_ids = ids.to_vec();
    let mut loss_mask = vec![false; ids.len()];
    for (i, &tok) in ids.iter().enumerate() {
        if tok == PAD {
            continue;
        }
        if rng.random::<f64>() >= cfg.p_select {
            continue;
        }
        loss_mask[i] = true;
        let u: f64 = rng.random();
        if u < cfg.p_mask {
            input_ids[i] = MASK;
        } else if u < cfg.p_mask + cfg.p_random {
            input_ids[i] = rng.random_range(0..4u8);
        }
    }
    Ok(MaskedRow {
        input_ids,
        target_ids: ids.to_vec(),
        loss_mask,
    })
}
