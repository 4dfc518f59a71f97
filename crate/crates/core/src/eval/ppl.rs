use crate::data::{batch_rng, chunk_records, FastaRecord, MaskConfig, MaskedBatch, Token, PAD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::no_grad;
use crate::train::mlm_loss;

use super::worker_threads;

/// Seed of the masking stream used for every perplexity evaluation.
pub const EVAL_SEED: u64 = 0x00E7_A15E;

#[derive(Debug, Clone, PartialEq)]
pub struct PplOptions {
    pub seed: u64,
    pub mask: MaskConfig,
    /// At most this many full-length chunks are scored per length.
    pub max_rows: usize,
    /// Rows per forward pass are `max(1, token_budget / length)`.
    pub token_budget: usize,
}

impl Default for PplOptions {
    fn default() -> Self {
        PplOptions {
            seed: EVAL_SEED,
            mask: MaskConfig::default(),
            max_rows: 64,
            token_budget: 8192,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PplRow {
    pub length: usize,
    pub ppl: f64,
    pub mean_loss: f64,
    /// Number of masked positions scored.
    pub scored: usize,
}

/// Default evaluation grid `{N, 2N, 4N, 8N}`.
pub fn default_lengths(train_len: usize) -> Vec<usize> {
    [1, 2, 4, 8].iter().map(|k| k * train_len).collect()
}

pub(crate) fn check_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() {
        return Err(Error::config("lengths: at least one evaluation length is required"));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l < 2) {
        return Err(Error::config(format!("lengths: {l} is below the minimum of 2")));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!("lengths: {lengths:?} must be strictly increasing")));
    }
    Ok(())
}

fn eval_length(model: &Model, records: &[FastaRecord], length: usize, opts: &PplOptions) -> Result<PplRow> {
    let _g = no_grad();
    let rows: Vec<Vec<Token>> = chunk_records(records, length)
        .into_iter()
        .filter(|c| !c.contains(&PAD))
        .take(opts.max_rows)
        .collect();
    if rows.is_empty() {
        return Err(Error::Data(format!("corpus has no full chunk of length {length}")));
    }
    let per_batch = (opts.token_budget / length).max(1);
    let (mut total, mut scored) = (0.0, 0usize);
    for (j, group) in rows.chunks(per_batch).enumerate() {
        let mut rng = batch_rng(opts.seed, j as u64);
        let batch = MaskedBatch::from_rows(group, &mut rng, &opts.mask)?;
        let n = batch.num_selected();
        if n == 0 {
            continue;
        }
        let logits = model.forward(&batch.input_ids, batch.batch_size, length, None)?;
        total += mlm_loss(&logits, &batch)?.item()? * n as f64;
        scored += n;
    }
    if scored == 0 {
        return Err(Error::Data(format!("masking selected no positions at length {length}")));
    }
    let mean_loss = total / scored as f64;
    Ok(PplRow {
        length,
        ppl: mean_loss.exp(),
        mean_loss,
        scored,
    })
}

/// Perplexity `exp(mean masked cross-entropy)` at each length, scored at the
/// positions selected by a fixed-seed masking pass. Lengths are evaluated
/// concurrently on up to [`worker_threads`] threads.
pub fn eval_perplexity(model: &Model, records: &[FastaRecord], lengths: &[usize], opts: &PplOptions) -> Result<Vec<PplRow>> {
    check_lengths(lengths)?;
    opts.mask.validate()?;
    let threads = worker_threads().min(lengths.len());
    if threads <= 1 {
        return lengths.iter().map(|&l| eval_length(model, records, l, opts)).collect();
    }
    let mut out: Vec<Option<Result<PplRow>>> = (0..lengths.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let slots: Vec<_> = out.chunks_mut(lengths.len().div_ceil(threads)).collect();
        for (k, slot) in slots.into_iter().enumerate() {
            let start = k * lengths.len().div_ceil(threads);
            s.spawn(move || {
                for (i, r) in slot.iter_mut().enumerate() {
                    *r = Some(eval_length(model, records, lengths[start + i], opts));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every length evaluated")).collect()
}
