use std::panic::{self, AssertUnwindSafe};
use std::sync::Once;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Token;
use crate::error::{Error, Result};
use crate::model::{build_variant, Layer, Model, ModelConfig, Variant};
use crate::tensor::alloc::{live_bytes, peak_bytes, reset_peak, set_memory_limit, OutOfMemory};
use crate::tensor::no_grad;

use super::ppl::check_lengths;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    /// Timed repetitions per length; the median is reported.
    pub reps: usize,
    /// Untimed repetitions run first.
    pub warmup: usize,
    pub batch: usize,
    /// Cap on tensor bytes a single forward pass may hold.
    pub memory_limit: Option<usize>,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            reps: 3,
            warmup: 1,
            batch: 1,
            memory_limit: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub length: usize,
    /// `None` when the run hit the memory limit.
    pub tokens_per_s: Option<f64>,
    /// Peak tensor bytes above the resident parameters during one forward pass.
    pub peak_bytes: Option<usize>,
    /// Closed-form size of the attention probability buffer.
    pub analytic_logit_bytes: usize,
}

impl BenchRow {
    pub fn is_oom(&self) -> bool {
        self.tokens_per_s.is_none()
    }
}

/// `batch · heads · L²` f64 entries for a model ending in attention, else zero.
pub fn analytic_logit_bytes(model: &Model, batch: usize, len: usize) -> usize {
    match model.layers.last() {
        Some(Layer::Attention(a)) => batch * a.heads() * len * len * std::mem::size_of::<f64>(),
        _ => 0,
    }
}

fn quiet_oom_panics() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        let prev = panic::take_hook();
        panic::set_hook(Box::new(move |info| {
            if info.payload().downcast_ref::<OutOfMemory>().is_none() {
                prev(info);
            }
        }));
    });
}

/// Peak bytes of one forward pass, or `None` if it crossed the limit.
fn measured_pass(model: &Model, ids: &[Token], batch: usize, len: usize, limit: Option<usize>) -> Result<Option<usize>> {
    let base = live_bytes();
    reset_peak();
    set_memory_limit(limit.map(|l| base + l));
    let out = panic::catch_unwind(AssertUnwindSafe(|| model.forward(ids, batch, len, None).map(|_| ())));
    set_memory_limit(None);
    match out {
        Ok(r) => r.map(|()| Some(peak_bytes() - base)),
        Err(p) if p.downcast_ref::<OutOfMemory>().is_some() => Ok(None),
        Err(p) => panic::resume_unwind(p),
    }
}

/// Inference throughput and peak tensor memory of `model` at each length.
///
/// Runs on the calling thread without gradient recording; an allocation past
/// `memory_limit` is reported as an OOM row.
pub fn bench(model: &Model, lengths: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    check_lengths(lengths)?;
    if opts.reps == 0 || opts.batch == 0 {
        return Err(Error::config("bench: reps and batch must be positive"));
    }
    quiet_oom_panics();
    let _g = no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let ids: Vec<Token> = (0..opts.batch * len).map(|_| rng.random_range(0..4)).collect();
        let analytic = analytic_logit_bytes(model, opts.batch, len);
        let row = |tps, peak| BenchRow {
            variant: model.config.variant,
            length: len,
            tokens_per_s: tps,
            peak_bytes: peak,
            analytic_logit_bytes: analytic,
        };
        let Some(peak) = measured_pass(model, &ids, opts.batch, len, opts.memory_limit)? else {
            rows.push(row(None, None));
            continue;
        };
        for _ in 0..opts.warmup {
            model.forward(&ids, opts.batch, len, None)?;
        }
        let mut times: Vec<f64> = Vec::with_capacity(opts.reps);
        for _ in 0..opts.reps {
            let t = Instant::now();
            model.forward(&ids, opts.batch, len, None)?;
            times.push(t.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let median = times[times.len() / 2];
        rows.push(row(Some((opts.batch * len) as f64 / median.max(1e-12)), Some(peak)));
    }
    Ok(rows)
}

/// [`bench`] each variant of `cfg` in turn.
pub fn bench_variants(cfg: &ModelConfig, variants: &[Variant], lengths: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &v in variants {
        let model = build_variant(cfg, v)?;
        rows.extend(bench(&model, lengths, opts)?);
    }
    Ok(rows)
}
