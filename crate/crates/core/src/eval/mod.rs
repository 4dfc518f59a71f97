//! Perplexity versus length, linear probes, embedding export and throughput benchmarks.

mod bench;
mod export;
mod ppl;
mod probe;

pub use bench::{analytic_logit_bytes, bench, bench_variants, BenchOptions, BenchRow};
pub use export::{embed_records, export_embeddings};
pub use ppl::{default_lengths, eval_perplexity, PplOptions, PplRow, EVAL_SEED};
pub use probe::{linear_probe, ProbeConfig, ProbeResult};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Worker threads for parallel evaluation: `WISTERIA_THREADS` if set, else the
/// available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("WISTERIA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// OS, architecture and thread budget, recorded next to timing results.
pub fn machine_descriptor() -> String {
    format!(
        "{}-{} threads={} cpus={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        worker_threads(),
        std::thread::available_parallelism().map_or(1, |n| n.get())
    )
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub ppl: Vec<PplRow>,
    pub probe: Option<ProbeResult>,
    pub bench: Vec<BenchRow>,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

fn opt_num<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "oom".to_string(), |x| x.to_string())
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.ppl.iter().find(|r| !(r.ppl >= 1.0)) {
            return Err(Error::Numeric(format!("perplexity {} at length {} is below 1", r.ppl, r.length)));
        }
        if self.ppl.windows(2).any(|w| w[0].length >= w[1].length) {
            return Err(Error::Data("perplexity lengths are not strictly increasing".into()));
        }
        if let Some(p) = &self.probe {
            if !p.per_seed.iter().chain([&p.mean]).all(|a| (0.0..=1.0).contains(a)) {
                return Err(Error::Numeric(format!("probe accuracy outside [0, 1]: {:?}", p.per_seed)));
            }
        }
        Ok(())
    }

    /// Write `ppl.csv`, `probe.csv`, `bench.csv` (for the parts present) and
    /// `summary.txt` into `dir`. Returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        if !self.ppl.is_empty() {
            let p = dir.join("ppl.csv");
            let err = csv_err(&p);
            let mut w = csv::Writer::from_path(&p).map_err(&err)?;
            w.write_record(["length", "ppl", "mean_loss", "scored"]).map_err(&err)?;
            for r in &self.ppl {
                w.write_record([r.length.to_string(), r.ppl.to_string(), r.mean_loss.to_string(), r.scored.to_string()])
                    .map_err(&err)?;
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
            written.push(p.clone());
        }
        if let Some(pr) = &self.probe {
            let p = dir.join("probe.csv");
            let err = csv_err(&p);
            let mut w = csv::Writer::from_path(&p).map_err(&err)?;
            w.write_record(["seed", "accuracy"]).map_err(&err)?;
            for (s, a) in pr.per_seed.iter().enumerate() {
                w.write_record([s.to_string(), a.to_string()]).map_err(&err)?;
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
            written.push(p.clone());
        }
        if !self.bench.is_empty() {
            let p = dir.join("bench.csv");
            let err = csv_err(&p);
            let mut w = csv::Writer::from_path(&p).map_err(&err)?;
            w.write_record(["variant", "length", "tokens_per_s", "peak_bytes", "analytic_logit_bytes"])
                .map_err(&err)?;
            for r in &self.bench {
                w.write_record([
                    r.variant.to_string(),
                    r.length.to_string(),
                    opt_num(r.tokens_per_s),
                    opt_num(r.peak_bytes),
                    r.analytic_logit_bytes.to_string(),
                ])
                .map_err(&err)?;
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
            written.push(p.clone());
        }
        let p = dir.join("summary.txt");
        std::fs::write(&p, self.summary()).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(written)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.ppl {
            let _ = writeln!(s, "ppl  L={:<6} {:.4}  ({} positions)", r.length, r.ppl, r.scored);
        }
        if let Some(p) = &self.probe {
            let _ = writeln!(s, "probe  accuracy {:.4} ± {:.4} over {} seeds ({} examples, {} classes)", p.mean, p.std, p.per_seed.len(), p.n, p.classes);
        }
        if !self.bench.is_empty() {
            let _ = writeln!(s, "bench  machine {}", machine_descriptor());
        }
        for r in &self.bench {
            match (r.tokens_per_s, r.peak_bytes) {
                (Some(t), Some(b)) => {
                    let _ = writeln!(s, "bench  {:<16} L={:<6} {:>10.0} tok/s  peak {} B", r.variant.to_string(), r.length, t, b);
                }
                _ => {
                    let _ = writeln!(s, "bench  {:<16} L={:<6} out of memory", r.variant.to_string(), r.length);
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn report_files() {
        let rep = EvalReport {
            ppl: vec![
                PplRow { length: 16, ppl: 3.5, mean_loss: 3.5f64.ln(), scored: 10 },
                PplRow { length: 32, ppl: 3.9, mean_loss: 3.9f64.ln(), scored: 20 },
            ],
            probe: Some(ProbeResult { mean: 0.9, std: 0.01, per_seed: vec![0.89, 0.91], classes: 2, n: 40 }),
            bench: vec![BenchRow { variant: Variant::Full, length: 64, tokens_per_s: None, peak_bytes: None, analytic_logit_bytes: 1 }],
        };
        let dir = tempfile::tempdir().unwrap();
        let files = rep.write(dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let bench = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
        assert!(bench.contains("full,64,oom,oom,1"), "{bench}");
        assert!(rep.summary().contains("out of memory"));
        let bad = EvalReport { ppl: vec![PplRow { length: 16, ppl: 0.5, mean_loss: -1.0, scored: 1 }], ..EvalReport::default() };
        assert!(bad.write(dir.path()).is_err());
    }

    #[test]
    fn thread_budget_is_positive() {
        assert!(worker_threads() >= 1);
    }
}
