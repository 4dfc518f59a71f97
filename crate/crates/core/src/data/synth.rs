//! Synthetic corpora with known structure, standing in for a reference genome.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fasta::FastaRecord;
use crate::error::{Error, Result};

const BASES: [char; 4] = ['A', 'C', 'G', 'T'];

#[derive(Debug, Clone, PartialEq)]
pub enum SynthKind {
    /// A base pattern of length `period` tiled along the record, with each
    /// position independently substituted by a different base with
    /// probability `noise`. `pattern: None` draws a random pattern.
    Periodic {
        period: usize,
        pattern: Option<String>,
        noise: f64,
        /// Start every record at a random offset into the pattern.
        random_phase: bool,
    },
    /// Even-indexed records (label 0) are uniform; odd-indexed records
    /// (label 1) carry `motif` at a random position.
    MotifPlanted { motif: String },
    /// I.i.d. uniform over `ACGT`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub num_records: usize,
    pub record_len: usize,
    pub seed: u64,
}

/// Records plus one class label per record (all zero unless motif-planted).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<FastaRecord>,
    pub labels: Vec<usize>,
}

fn uniform_seq(rng: &mut ChaCha8Rng, len: usize) -> Vec<char> {
    (0..len).map(|_| BASES[rng.random_range(0..4)]).collect()
}

fn check_alphabet(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || !s.chars().all(|c| BASES.contains(&c)) {
        return Err(Error::config(format!("{what} '{s}' must be a non-empty string over ACGT")));
    }
    Ok(())
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.num_records == 0 || spec.record_len == 0 {
        return Err(Error::config("num_records and record_len must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.num_records);
    let mut labels = Vec::with_capacity(spec.num_records);
    match &spec.kind {
        SynthKind::Periodic {
            period,
            pattern,
            noise,
            random_phase,
        } => {
            if *period < 2 {
                return Err(Error::config(format!("period must be at least 2, got {period}")));
            }
            if !(0.0..=1.0).contains(noise) {
                return Err(Error::config(format!("noise must lie in [0, 1], got {noise}")));
            }
            let pattern: Vec<char> = match pattern {
                Some(p) => {
                    check_alphabet("pattern", p)?;
                    if p.len() != *period {
                        return Err(Error::config(format!(
                            "pattern '{p}' does not have length {period}"
                        )));
                    }
                    p.chars().collect()
                }
                None => uniform_seq(&mut rng, *period),
            };
            for i in 0..spec.num_records {
                let phase = if *random_phase { rng.random_range(0..*period) } else { 0 };
                let seq: String = (0..spec.record_len)
                    .map(|t| {
                        let base = pattern[(t + phase) % period];
                        if *noise > 0.0 && rng.random::<f64>() < *noise {
                            let k = BASES.iter().position(|&b| b == base).expect("ACGT");
                            BASES[(k + rng.random_range(1..4)) % 4]
                        } else {
                            base
                        }
                    })
                    .collect();
                records.push(FastaRecord {
                    id: format!("periodic_{i}"),
                    seq,
                });
                labels.push(0);
            }
        }
        SynthKind::MotifPlanted { motif } => {
            check_alphabet("motif", motif)?;
            if motif.len() > spec.record_len {
                return Err(Error::config(format!(
                    "motif of length {} does not fit in records of length {}",
                    motif.len(),
                    spec.record_len
                )));
            }
            let m: Vec<char> = motif.chars().collect();
            for i in 0..spec.num_records {
                let label = i % 2;
                let mut seq = uniform_seq(&mut rng, spec.record_len);
                if label == 1 {
                    let at = rng.random_range(0..=spec.record_len - m.len());
                    seq[at..at + m.len()].copy_from_slice(&m);
                }
                records.push(FastaRecord {
                    id: format!("motif_{i}"),
                    seq: seq.into_iter().collect(),
                });
                labels.push(label);
            }
        }
        SynthKind::Uniform => {
            for i in 0..spec.num_records {
                records.push(FastaRecord {
                    id: format!("uniform_{i}"),
                    seq: uniform_seq(&mut rng, spec.record_len).into_iter().collect(),
                });
                labels.push(0);
            }
        }
    }
    Ok(SynthCorpus { records, labels })
}

/// Number of (possibly overlapping) occurrences of `motif` in `seq`.
pub fn count_occurrences(seq: &str, motif: &str) -> usize {
    if motif.is_empty() || motif.len() > seq.len() {
        return 0;
    }
    seq.as_bytes()
        .windows(motif.len())
        .filter(|w| *w == motif.as_bytes())
        .count()
}
