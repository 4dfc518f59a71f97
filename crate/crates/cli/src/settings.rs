use std::path::{Path, PathBuf};

use wisteria::config::{dispatch, parse_kv, parse_value, render, split_override, KvSection};
use wisteria::data::{synth_corpus, SynthCorpus, SynthKind, SynthSpec};
use wisteria::model::ModelConfig;
use wisteria::train::TrainConfig;
use wisteria::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    /// FASTA file or manifest listing FASTA files.
    pub corpus: Option<PathBuf>,
    /// CSV with `id,label` rows.
    pub labels: Option<PathBuf>,
    pub synth_kind: String,
    pub synth_records: usize,
    pub synth_len: usize,
    pub synth_period: usize,
    pub synth_pattern: String,
    pub synth_noise: f64,
    pub synth_random_phase: bool,
    pub synth_motif: String,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            corpus: None,
            labels: None,
            synth_kind: "periodic".into(),
            synth_records: 64,
            synth_len: 1024,
            synth_period: 8,
            synth_pattern: String::new(),
            synth_noise: 0.0,
            synth_random_phase: true,
            synth_motif: "ACGTTGCAAGCT".into(),
        }
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

impl KvSection for DataSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "corpus" => self.corpus = opt_path(value),
            "labels" => self.labels = opt_path(value),
            "synth_kind" => {
                if !["periodic", "motif", "uniform"].contains(&value) {
                    return Err(Error::Config(format!("synth_kind: expected periodic, motif or uniform, got '{value}'")));
                }
                self.synth_kind = value.into();
            }
            "synth_records" => self.synth_records = parse_value(key, value)?,
            "synth_len" => self.synth_len = parse_value(key, value)?,
            "synth_period" => self.synth_period = parse_value(key, value)?,
            "synth_pattern" => self.synth_pattern = value.into(),
            "synth_noise" => self.synth_noise = parse_value(key, value)?,
            "synth_random_phase" => self.synth_random_phase = parse_value(key, value)?,
            "synth_motif" => self.synth_motif = value.into(),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("corpus", path_text(&self.corpus)),
            ("labels", path_text(&self.labels)),
            ("synth_kind", self.synth_kind.clone()),
            ("synth_records", self.synth_records.to_string()),
            ("synth_len", self.synth_len.to_string()),
            ("synth_period", self.synth_period.to_string()),
            ("synth_pattern", self.synth_pattern.clone()),
            ("synth_noise", self.synth_noise.to_string()),
            ("synth_random_phase", self.synth_random_phase.to_string()),
            ("synth_motif", self.synth_motif.clone()),
        ]
    }
}

impl DataSettings {
    pub fn synth(&self, seed: u64) -> Result<SynthCorpus> {
        let kind = match self.synth_kind.as_str() {
            "periodic" => SynthKind::Periodic {
                period: self.synth_period,
                pattern: (!self.synth_pattern.is_empty()).then(|| self.synth_pattern.clone()),
                noise: self.synth_noise,
                random_phase: self.synth_random_phase,
            },
            "motif" => SynthKind::MotifPlanted {
                motif: self.synth_motif.clone(),
            },
            _ => SynthKind::Uniform,
        };
        synth_corpus(&SynthSpec {
            kind,
            num_records: self.synth_records,
            record_len: self.synth_len,
            seed,
        })
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn list_text<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    /// Empty: `{N, 2N, 4N, 8N}` from `train_len`.
    pub eval_lengths: Vec<usize>,
    pub eval_max_rows: usize,
    pub probe_folds: usize,
    pub probe_seeds: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub bench_lengths: Vec<usize>,
    pub bench_reps: usize,
    pub bench_warmup: usize,
    pub bench_batch: usize,
    /// Bytes; 0 disables the limit.
    pub bench_memory_limit: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            eval_lengths: Vec::new(),
            eval_max_rows: 64,
            probe_folds: 5,
            probe_seeds: 5,
            probe_epochs: 200,
            probe_lr: 0.05,
            bench_lengths: vec![1024, 2048, 4096, 8192],
            bench_reps: 3,
            bench_warmup: 1,
            bench_batch: 1,
            bench_memory_limit: 0,
        }
    }
}

impl KvSection for EvalSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "eval_lengths" => self.eval_lengths = list(key, value)?,
            "eval_max_rows" => self.eval_max_rows = parse_value(key, value)?,
            "probe_folds" => self.probe_folds = parse_value(key, value)?,
            "probe_seeds" => self.probe_seeds = parse_value(key, value)?,
            "probe_epochs" => self.probe_epochs = parse_value(key, value)?,
            "probe_lr" => self.probe_lr = parse_value(key, value)?,
            "bench_lengths" => self.bench_lengths = list(key, value)?,
            "bench_reps" => self.bench_reps = parse_value(key, value)?,
            "bench_warmup" => self.bench_warmup = parse_value(key, value)?,
            "bench_batch" => self.bench_batch = parse_value(key, value)?,
            "bench_memory_limit" => self.bench_memory_limit = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("eval_lengths", list_text(&self.eval_lengths)),
            ("eval_max_rows", self.eval_max_rows.to_string()),
            ("probe_folds", self.probe_folds.to_string()),
            ("probe_seeds", self.probe_seeds.to_string()),
            ("probe_epochs", self.probe_epochs.to_string()),
            ("probe_lr", self.probe_lr.to_string()),
            ("bench_lengths", list_text(&self.bench_lengths)),
            ("bench_reps", self.bench_reps.to_string()),
            ("bench_warmup", self.bench_warmup.to_string()),
            ("bench_batch", self.bench_batch.to_string()),
            ("bench_memory_limit", self.bench_memory_limit.to_string()),
        ]
    }
}

/// Every setting of a run after the config file, overrides and seed are applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub eval: EvalSettings,
    pub seed: u64,
}

impl RunConfig {
    fn sections(&mut self) -> [&mut dyn KvSection; 4] {
        [&mut self.model, &mut self.train, &mut self.data, &mut self.eval]
    }

    /// Defaults, then `config` (paths inside it are relative to its directory),
    /// then `overrides`, then `seed` for both model init and data order.
    pub fn resolve(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let base = path.parent().unwrap_or(Path::new("."));
            for (line, k, v) in parse_kv(&text)? {
                let v = if (k == "corpus" || k == "labels") && !v.is_empty() && Path::new(&v).is_relative() {
                    base.join(&v).display().to_string()
                } else {
                    v
                };
                dispatch(&mut rc.sections(), &k, &v).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}:{line}: {m}", path.display())),
                    other => other,
                })?;
            }
        }
        for o in overrides {
            let (k, v) = split_override(o)?;
            dispatch(&mut rc.sections(), &k, &v)?;
        }
        rc.seed = seed.unwrap_or(rc.model.seed);
        rc.model.seed = rc.seed;
        rc.train.data_seed = rc.seed;
        Ok(rc)
    }

    pub fn render(&self) -> String {
        render(&[&self.model, &self.train, &self.data, &self.eval])
    }

    /// Training and model lengths must agree for anything that trains.
    pub fn check_training(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.train_len != self.train.seq_len {
            return Err(Error::Config(format!(
                "train_len ({}) must equal seq_len ({})",
                self.model.train_len, self.train.seq_len
            )));
        }
        Ok(())
    }

    pub fn eval_lengths(&self) -> Vec<usize> {
        if self.eval.eval_lengths.is_empty() {
            wisteria::eval::default_lengths(self.model.train_len)
        } else {
            self.eval.eval_lengths.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides_then_seed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "dim = 16\ncorpus = data/x.fa\nseed = 4\neval_lengths = 8, 16\n").unwrap();
        let rc = RunConfig::resolve(Some(&p), &["dim=32".into()], Some(9)).unwrap();
        assert_eq!(rc.model.dim, 32);
        assert_eq!(rc.seed, 9);
        assert_eq!(rc.train.data_seed, 9);
        assert_eq!(rc.eval.eval_lengths, [8, 16]);
        assert_eq!(rc.data.corpus.as_deref(), Some(dir.path().join("data/x.fa").as_path()));
        let rc = RunConfig::resolve(Some(&p), &[], None).unwrap();
        assert_eq!(rc.seed, 4);
    }

    #[test]
    fn unknown_key_names_file_line_and_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "dim = 16\n\nbogus = 1\n").unwrap();
        let msg = RunConfig::resolve(Some(&p), &[], None).unwrap_err().to_string();
        assert!(msg.contains("run.cfg:3") && msg.contains("bogus"), "{msg}");
        let e = RunConfig::resolve(None, &["dim=abc".into()], None).unwrap_err();
        assert!(e.is_config() && e.to_string().contains("dim"));
    }

    #[test]
    fn render_round_trips() {
        let rc = RunConfig::resolve(None, &["synth_kind=motif".into(), "bench_lengths=64,128".into()], Some(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("resolved.cfg");
        std::fs::write(&p, rc.render()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&p), &[], None).unwrap(), rc);
    }
}
