//! Fixed-length chunking and constant-token-budget batching.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fasta::FastaRecord;
use super::mask::{apply_mlm_mask, MaskConfig};
use super::vocab::{tokenize, Token, PAD};
use crate::error::{Error, Result};

/// Token budget used for the hg38 pretraining runs (2^20 tokens per batch).
pub const FULL_SCALE_TOKEN_BUDGET: usize = 1 << 20;

/// Salt separating the chunk-shuffle streams from the masking streams.
const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// `[B, L]` batch with MLM bookkeeping, all row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub input_ids: Vec<Token>,
    pub target_ids: Vec<Token>,
    pub loss_mask: Vec<bool>,
    /// False at padding positions.
    pub valid: Vec<bool>,
}

impl MaskedBatch {
    pub fn num_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn num_selected(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Build a batch from equal-length rows, masking each with its own RNG draw.
    pub fn from_rows(rows: &[Vec<Token>], rng: &mut ChaCha8Rng, mask: &MaskConfig) -> Result<MaskedBatch> {
        let seq_len = rows.first().map(Vec::len).unwrap_or(0);
        if seq_len == 0 || rows.iter().any(|r| r.len() != seq_len) {
            return Err(Error::dim("batch rows must be non-empty and of equal length"));
        }
        let mut b = MaskedBatch {
            batch_size: rows.len(),
            seq_len,
            input_ids: Vec::with_capacity(rows.len() * seq_len),
            target_ids: Vec::with_capacity(rows.len() * seq_len),
            loss_mask: Vec::with_capacity(rows.len() * seq_len),
            valid: Vec::with_capacity(rows.len() * seq_len),
        };
        for row in rows {
            let m = apply_mlm_mask(row, rng, mask)?;
            b.input_ids.extend(m.input_ids);
            b.target_ids.extend(m.target_ids);
            b.loss_mask.extend(m.loss_mask);
            b.valid.extend(row.iter().map(|&t| t != PAD));
        }
        Ok(b)
    }
}

/// Batch size that spends exactly `token_budget` tokens on sequences of length `seq_len`.
pub fn batch_size_for(seq_len: usize, token_budget: usize) -> Result<usize> {
    if seq_len == 0 || token_budget == 0 {
        return Err(Error::config("seq_len and token_budget must be positive"));
    }
    if token_budget % seq_len != 0 {
        return Err(Error::config(format!(
            "token_budget {token_budget} is not divisible by seq_len {seq_len}"
        )));
    }
    Ok(token_budget / seq_len)
}

/// Split every record into consecutive non-overlapping chunks of `seq_len`
/// tokens; the last chunk of a record is right-padded with `PAD`.
pub fn chunk_records(records: &[FastaRecord], seq_len: usize) -> Vec<Vec<Token>> {
    let mut out = Vec::new();
    for r in records {
        let ids = tokenize(&r.seq);
        for c in ids.chunks(seq_len) {
            let mut chunk = c.to_vec();
            chunk.resize(seq_len, PAD);
            out.push(chunk);
        }
    }
    out
}

/// Masking RNG for batch `index`: an independent ChaCha stream per batch, so
/// batch `i` does not depend on how many batches were drawn before it.
pub fn batch_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Endless, seekable stream of [`MaskedBatch`]es with `B·L == token_budget`.
///
/// Chunks are visited in a fresh seeded permutation every epoch. Batch `i`
/// is a pure function of `(corpus, seed, i)`.
#[derive(Clone)]
pub struct BatchStream {
    chunks: Arc<Vec<Vec<Token>>>,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    mask: MaskConfig,
    next: u64,
    perm_cache: Option<(u64, Vec<usize>)>,
}

impl BatchStream {
    pub fn new(records: &[FastaRecord], seq_len: usize, token_budget: usize, mask: MaskConfig, seed: u64) -> Result<Self> {
        let batch_size = batch_size_for(seq_len, token_budget)?;
        mask.validate()?;
        let chunks = chunk_records(records, seq_len);
        if chunks.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        Ok(BatchStream {
            chunks: Arc::new(chunks),
            batch_size,
            seq_len,
            seed,
            mask,
            next: 0,
            perm_cache: None,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    /// Index of the next batch [`Iterator::next`] will yield.
    pub fn position(&self) -> u64 {
        self.next
    }

    pub fn seek(&mut self, index: u64) {
        self.next = index;
    }

    fn chunk_for_slot(&mut self, slot: u64) -> usize {
        let n = self.chunks.len() as u64;
        let (epoch, within) = (slot / n, (slot % n) as usize);
        let stale = self.perm_cache.as_ref().is_none_or(|(e, _)| *e != epoch);
        if stale {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ SHUFFLE_SALT);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..self.chunks.len()).collect();
            perm.shuffle(&mut rng);
            self.perm_cache = Some((epoch, perm));
        }
        self.perm_cache.as_ref().expect("cached permutation").1[within]
    }

    /// The batch at `index`, independent of the stream's current position.
    pub fn batch_at(&mut self, index: u64) -> MaskedBatch {
        let b = self.batch_size as u64;
        let rows: Vec<Vec<Token>> = (0..b)
            .map(|j| {
                let c = self.chunk_for_slot(index * b + j);
                self.chunks[c].clone()
            })
            .collect();
        let mut rng = batch_rng(self.seed, index);
        MaskedBatch::from_rows(&rows, &mut rng, &self.mask).expect("validated chunks and mask")
    }
}

impl Iterator for BatchStream {
    type Item = MaskedBatch;

    fn next(&mut self) -> Option<MaskedBatch> {
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}

/// Constant-token-budget batching over a corpus.
pub fn budget_batches(records: &[FastaRecord], seq_len: usize, token_budget: usize, mask: MaskConfig, seed: u64) -> Result<BatchStream> {
    BatchStream::new(records, seq_len, token_budget, mask, seed)
}
