//! FASTA ingestion, tokenization, masking and batching.

pub mod batch;
pub mod fasta;
pub mod mask;
pub mod synth;
pub mod vocab;

pub use batch::{
    batch_rng, batch_size_for, budget_batches, chunk_records, BatchStream, MaskedBatch,
    FULL_SCALE_TOKEN_BUDGET,
};
pub use fasta::{
    load_manifest_corpus, parse_fasta, read_fasta_file, read_manifest, write_fasta, FastaReader,
    FastaRecord,
};
pub use mask::{apply_mlm_mask, MaskConfig, MaskedRow};
pub use synth::{count_occurrences, synth_corpus, SynthCorpus, SynthKind, SynthSpec};
pub use vocab::{detokenize, tokenize, Token, Vocabulary, MASK, PAD, VOCAB_SIZE};
