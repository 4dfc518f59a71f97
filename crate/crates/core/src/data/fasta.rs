//! Streaming FASTA reader and writer.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastaRecord {
    /// Header text after `>` up to the first whitespace.
    pub id: String,
    /// Uppercase sequence over `ACGTN`.
    pub seq: String,
}

fn normalize_into(line: &str, out: &mut String) {
    for c in line.chars() {
        if c.is_whitespace() {
            continue;
        }
        out.push(match c.to_ascii_uppercase() {
            b @ ('A' | 'C' | 'G' | 'T') => b,
            _ => 'N',
        });
    }
}

/// Iterator over the records of a FASTA stream.
///
/// Only the record currently being assembled is held in memory, so the reader
/// works on arbitrarily large inputs with arbitrarily wrapped lines.
pub struct FastaReader<R> {
    reader: R,
    line: String,
    line_no: usize,
    /// Header of the record whose sequence lines are being read: (id, line number).
    header: Option<(String, usize)>,
    done: bool,
}

impl<R: BufRead> FastaReader<R> {
    pub fn new(reader: R) -> Self {
        FastaReader {
            reader,
            line: String::new(),
            line_no: 0,
            header: None,
            done: false,
        }
    }

    fn parse_header(&self, text: &str) -> Result<String> {
        let id = text[1..].split_whitespace().next().unwrap_or("");
        if id.is_empty() {
            return Err(Error::Parse {
                line: self.line_no,
                msg: "header has no identifier".into(),
            });
        }
        Ok(id.to_string())
    }

    fn finish(&mut self, seq: String) -> Option<Result<FastaRecord>> {
        let (id, line) = self.header.take()?;
        if seq.is_empty() {
            return Some(Err(Error::Parse {
                line,
                msg: format!("record '{id}' has an empty sequence"),
            }));
        }
        Some(Ok(FastaRecord { id, seq }))
    }

    fn read_record(&mut self) -> Option<Result<FastaRecord>> {
        let mut seq = String::new();
        loop {
            self.line.clear();
            match self.reader.read_line(&mut self.line) {
                Ok(0) => {
                    self.done = true;
                    return self.finish(seq);
                }
                Ok(_) => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(Error::Parse {
                        line: self.line_no + 1,
                        msg: e.to_string(),
                    }));
                }
            }
            self.line_no += 1;
            let text = self.line.trim_end();
            if text.starts_with('>') {
                let id = match self.parse_header(text) {
                    Ok(id) => id,
                    Err(e) => {
                        self.done = true;
                        return Some(Err(e));
                    }
                };
                let next = (id, self.line_no);
                if self.header.is_some() {
                    let rec = self.finish(seq);
                    self.header = Some(next);
                    return rec;
                }
                self.header = Some(next);
                continue;
            }
            if text.trim().is_empty() {
                continue;
            }
            if self.header.is_none() {
                self.done = true;
                return Some(Err(Error::Parse {
                    line: self.line_no,
                    msg: "sequence data before the first '>' header".into(),
                }));
            }
            normalize_into(text, &mut seq);
        }
    }
}

impl<R: BufRead> Iterator for FastaReader<R> {
    type Item = Result<FastaRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        self.read_record()
    }
}

/// Parse a whole FASTA stream.
pub fn parse_fasta<R: BufRead>(reader: R) -> Result<Vec<FastaRecord>> {
    FastaReader::new(reader).collect()
}

pub fn read_fasta_file(path: &Path) -> Result<Vec<FastaRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_fasta(BufReader::new(file))
}

/// Write records with sequence lines wrapped at `width` characters.
pub fn write_fasta<W: Write>(records: &[FastaRecord], mut w: W, width: usize) -> std::io::Result<()> {
    for r in records {
        writeln!(w, ">{}", r.id)?;
        for chunk in r.seq.as_bytes().chunks(width.max(1)) {
            w.write_all(chunk)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Paths listed one per line in a corpus manifest. Relative entries resolve
/// against the manifest's directory; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

/// Every record of every FASTA file named in a manifest, in manifest order.
pub fn load_manifest_corpus(manifest: &Path) -> Result<Vec<FastaRecord>> {
    let mut out = Vec::new();
    for p in read_manifest(manifest)? {
        out.extend(read_fasta_file(&p)?);
    }
    Ok(out)
}
