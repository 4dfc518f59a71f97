//! Masked-LM training: loss, optimizer, schedule and the training loop.

mod loss;
mod optim;
mod state;

pub use loss::{masked_cross_entropy, mlm_loss};
pub use optim::{clip_grad_norm, decays, grad_norm, lr_schedule, AdamW, LrSchedule};
pub use state::{load_train_state, save_train_state, TrainState, STATE_MAGIC};

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::time::Instant;

use serde::Serialize;

use crate::config::{parse_value, KvSection};
use crate::data::{BatchStream, FastaRecord, MaskConfig, MaskedBatch};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model};
use crate::nn::Module;

pub const RUN_LOG: &str = "run_log.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "train_state.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub token_budget: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Save checkpoint and optimizer state every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub data_seed: u64,
    pub mask: MaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seq_len: 256,
            token_budget: 8192,
            peak_lr: 8e-3,
            min_lr: 8e-4,
            warmup_steps: 100,
            total_steps: 2000,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            checkpoint_every: 0,
            data_seed: 0,
            mask: MaskConfig::default(),
        }
    }
}

impl KvSection for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seq_len" => self.seq_len = parse_value(key, value)?,
            "token_budget" => self.token_budget = parse_value(key, value)?,
            "peak_lr" => self.peak_lr = parse_value(key, value)?,
            "min_lr" => self.min_lr = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "total_steps" => self.total_steps = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "data_seed" => self.data_seed = parse_value(key, value)?,
            "mask_p_select" => self.mask.p_select = parse_value(key, value)?,
            "mask_p_mask" => self.mask.p_mask = parse_value(key, value)?,
            "mask_p_random" => self.mask.p_random = parse_value(key, value)?,
            "mask_p_keep" => self.mask.p_keep = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seq_len", self.seq_len.to_string()),
            ("token_budget", self.token_budget.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("mask_p_select", self.mask.p_select.to_string()),
            ("mask_p_mask", self.mask.p_mask.to_string()),
            ("mask_p_random", self.mask.p_random.to_string()),
            ("mask_p_keep", self.mask.p_keep.to_string()),
        ]
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        crate::data::batch_size_for(self.seq_len, self.token_budget)?;
        self.mask.validate()?;
        if !(self.peak_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.peak_lr {
            return Err(Error::config(format!(
                "peak_lr/min_lr: need 0 <= min_lr <= peak_lr and peak_lr > 0, got {} and {}",
                self.peak_lr, self.min_lr
            )));
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps: {} must not exceed total_steps {} (> 0)",
                self.warmup_steps, self.total_steps
            )));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{k}: {b} must lie in [0, 1)")));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config(format!("grad_clip: {} must be positive", self.grad_clip)));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("adam_eps must be positive and weight_decay non-negative"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            min: self.min_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }

    pub fn optimizer(&self, params: &[(String, crate::Tensor)]) -> AdamW {
        AdamW::new(params, self.beta1, self.beta2, self.adam_eps, self.weight_decay)
    }
}

/// One optimizer step as logged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Tokens consumed so far.
    pub tokens: u64,
    #[serde(skip)]
    pub tokens_per_s: f64,
}

#[derive(Serialize)]
struct TimingRecord {
    step: u64,
    tokens_per_s: f64,
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Where logs, checkpoint and optimizer state go. Nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Optimizer state file to continue from.
    pub resume: Option<PathBuf>,
    /// Stop (and save) after this many completed steps, keeping the schedule of `total_steps`.
    pub stop_after: Option<u64>,
}

struct Sinks {
    dir: PathBuf,
    run_log: BufWriter<File>,
    timing: BufWriter<File>,
}

impl Sinks {
    fn open(dir: &Path, append: bool) -> Result<Sinks> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Sinks {
            dir: dir.to_path_buf(),
            run_log: open(RUN_LOG)?,
            timing: open(TIMING_LOG)?,
        })
    }

    fn log(&mut self, r: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("plain record");
        writeln!(self.run_log, "{line}").map_err(|e| Error::io(self.dir.join(RUN_LOG), e))?;
        let t = serde_json::to_string(&TimingRecord {
            step: r.step,
            tokens_per_s: r.tokens_per_s,
        })
        .expect("plain record");
        writeln!(self.timing, "{t}").map_err(|e| Error::io(self.dir.join(TIMING_LOG), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.run_log.flush().map_err(|e| Error::io(self.dir.join(RUN_LOG), e))?;
        self.timing.flush().map_err(|e| Error::io(self.dir.join(TIMING_LOG), e))
    }

    /// Write checkpoint and state under temporary names, then rename, so an
    /// interrupted save never replaces the previous good pair.
    fn save(&mut self, model: &Model, opt: &AdamW, step: u64, position: u64) -> Result<()> {
        self.flush()?;
        let (ck, st) = (self.dir.join(CHECKPOINT_FILE), self.dir.join(STATE_FILE));
        let (ck_tmp, st_tmp) = (ck.with_extension("ckpt.tmp"), st.with_extension("bin.tmp"));
        save_checkpoint(model, &ck_tmp)?;
        save_train_state(&st_tmp, model, opt, step, position)?;
        fs::rename(&ck_tmp, &ck).map_err(|e| Error::io(&ck, e))?;
        fs::rename(&st_tmp, &st).map_err(|e| Error::io(&st, e))
    }
}

/// One forward/backward/update on `batch`. Returns `None` when the batch
/// selects no positions and is skipped.
pub fn train_step(model: &Model, params: &[(String, crate::Tensor)], opt: &mut AdamW, batch: &MaskedBatch, lr: f64, clip: f64) -> Result<Option<(f64, f64)>> {
    if batch.num_selected() == 0 {
        return Ok(None);
    }
    params.iter().for_each(|(_, p)| p.zero_grad());
    let valid = batch.valid.contains(&false).then_some(batch.valid.as_slice());
    let logits = model.forward(&batch.input_ids, batch.batch_size, batch.seq_len, valid)?;
    let loss = mlm_loss(&logits, batch)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    loss.backward()?;
    drop((loss, logits));
    let norm = clip_grad_norm(params, clip);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm {norm}")));
    }
    opt.step(params, lr)?;
    Ok(Some((value, norm)))
}

fn run_loop(
    model: &Model,
    cfg: &TrainConfig,
    opt: &mut AdamW,
    batches: Receiver<MaskedBatch>,
    start: u64,
    end: u64,
    mut sinks: Option<&mut Sinks>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let params = model.named_params();
    let schedule = cfg.schedule();
    let mut records = Vec::new();
    let tokens_per_batch = cfg.token_budget as u64;
    for step in start..end {
        let batch = batches
            .recv()
            .map_err(|_| Error::Data("batch producer stopped early".into()))?;
        let t0 = Instant::now();
        let lr = schedule.at(step + 1);
        let out = train_step(model, &params, opt, &batch, lr, cfg.grad_clip)
            .map_err(|e| Error::Step(format!("step {}: {e}", step + 1)))?;
        let Some((loss, norm)) = out else { continue };
        let secs = t0.elapsed().as_secs_f64();
        let rec = StepRecord {
            step: step + 1,
            loss,
            lr,
            grad_norm: norm,
            tokens: (step + 1) * tokens_per_batch,
            tokens_per_s: if secs > 0.0 { tokens_per_batch as f64 / secs } else { 0.0 },
        };
        if let Some(s) = sinks.as_deref_mut() {
            s.log(&rec)?;
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < end {
                s.save(model, opt, step + 1, step + 1)?;
            }
        }
        on_step(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// Train `model` in place on `records`.
///
/// Batch `i` of the run is batch `i` of the seeded [`BatchStream`], so a run
/// resumed from a saved state consumes exactly the batches the
/// uninterrupted run would have.
pub fn train(model: &Model, records: &[FastaRecord], cfg: &TrainConfig, opts: &TrainOptions, on_step: &mut dyn FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let params = model.named_params();
    let mut opt = cfg.optimizer(&params);
    let mut stream = BatchStream::new(records, cfg.seq_len, cfg.token_budget, cfg.mask, cfg.data_seed)?;
    let mut start = 0;
    if let Some(path) = &opts.resume {
        let st = load_train_state(path, model, &mut opt)?;
        start = st.step;
        stream.seek(st.position);
    }
    let end = opts.stop_after.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    if start > end {
        return Err(Error::config(format!("resume step {start} lies beyond the last step {end}")));
    }
    let mut sinks = match &opts.out_dir {
        Some(d) => Some(Sinks::open(d, opts.resume.is_some())?),
        None => None,
    };
    let (tx, rx) = sync_channel(2);
    let n = end - start;
    let records = std::thread::scope(|s| {
        s.spawn(move || {
            for _ in 0..n {
                if tx.send(stream.next().expect("endless stream")).is_err() {
                    break;
                }
            }
        });
        run_loop(model, cfg, &mut opt, rx, start, end, sinks.as_mut(), on_step)
    })?;
    if let Some(s) = sinks.as_mut() {
        s.save(model, &opt, end, end)?;
        s.flush()?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            dim: 8,
            num_layers: 2,
            num_gcmb: 1,
            heads: 2,
            kernel: 3,
            ssm_state: 2,
            train_len: 16,
            seed: 1,
            ..ModelConfig::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            seq_len: 16,
            token_budget: 64,
            warmup_steps: 2,
            total_steps: 6,
            peak_lr: 1e-2,
            min_lr: 1e-3,
            data_seed: 2,
            ..TrainConfig::default()
        }
    }

    fn corpus() -> Vec<FastaRecord> {
        vec![FastaRecord {
            id: "r".into(),
            seq: "ACGTTGCA".repeat(40),
        }]
    }

    #[test]
    fn same_seed_same_curve() {
        let run = || {
            let m = build_model(&tiny_model()).unwrap();
            train(&m, &corpus(), &tiny_train(), &TrainOptions::default(), &mut |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
        }
    }

    #[test]
    fn resume_reproduces_the_next_loss() {
        let dir = tempfile::tempdir().unwrap();
        let full = {
            let m = build_model(&tiny_model()).unwrap();
            train(&m, &corpus(), &tiny_train(), &TrainOptions::default(), &mut |_| {}).unwrap()
        };
        let m = build_model(&tiny_model()).unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(3),
            ..TrainOptions::default()
        };
        train(&m, &corpus(), &tiny_train(), &opts, &mut |_| {}).unwrap();
        let fresh = build_model(&tiny_model()).unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: Some(dir.path().join(STATE_FILE)),
            ..TrainOptions::default()
        };
        let rest = train(&fresh, &corpus(), &tiny_train(), &opts, &mut |_| {}).unwrap();
        assert_eq!(rest[0].step, 4);
        assert_eq!(rest[0].loss.to_bits(), full[3].loss.to_bits());
        let log = fs::read_to_string(dir.path().join(RUN_LOG)).unwrap();
        assert_eq!(log.lines().count(), 6);
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = tiny_train();
        let mut back = TrainConfig::default();
        for (k, v) in cfg.pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(TrainConfig { warmup_steps: 10, total_steps: 5, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { token_budget: 100, ..cfg }.validate().unwrap_err().is_config());
    }
}
