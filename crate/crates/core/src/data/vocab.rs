//! Character-level nucleotide vocabulary.

/// Token id. The vocabulary has seven entries, so a byte is plenty.
pub type Token = u8;

pub const A: Token = 0;
pub const C: Token = 1;
pub const G: Token = 2;
pub const T: Token = 3;
pub const N: Token = 4;
pub const MASK: Token = 5;
pub const PAD: Token = 6;

/// Vocabulary size `V`.
pub const VOCAB_SIZE: usize = 7;

/// Printable form of every id, indexed by id.
const SYMBOLS: [char; VOCAB_SIZE] = ['A', 'C', 'G', 'T', 'N', '?', '_'];

/// Fixed id map. Ids are part of the checkpoint contract and never change.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vocabulary;

impl Vocabulary {
    pub const fn size(self) -> usize {
        VOCAB_SIZE
    }

    /// Id of a normalized nucleotide; anything outside `ACGT` becomes `N`.
    pub fn id(self, base: char) -> Token {
        match base {
            'A' | 'a' => A,
            'C' | 'c' => C,
            'G' | 'g' => G,
            'T' | 't' => T,
            _ => N,
        }
    }

    pub fn symbol(self, id: Token) -> char {
        SYMBOLS.get(id as usize).copied().unwrap_or('N')
    }
}

/// `ACGTN` text to ids.
pub fn tokenize(seq: &str) -> Vec<Token> {
    seq.chars().map(|c| Vocabulary.id(c)).collect()
}

/// Ids back to text. `MASK` prints as `?` and `PAD` as `_`.
pub fn detokenize(ids: &[Token]) -> String {
    ids.iter().map(|&i| Vocabulary.symbol(i)).collect()
}
