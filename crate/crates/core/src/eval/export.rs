use std::path::Path;

use crate::data::{tokenize, FastaRecord, Token};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::no_grad;

/// Records sharing a length are pooled together, this many per forward pass.
const EMBED_BATCH: usize = 16;

/// Mean-pooled final hidden state of every record, in input order.
pub fn embed_records(model: &Model, records: &[FastaRecord]) -> Result<Vec<Vec<f64>>> {
    let _g = no_grad();
    let d = model.config.dim;
    let mut out = Vec::with_capacity(records.len());
    let mut i = 0;
    while i < records.len() {
        let len = records[i].seq.len();
        if len == 0 {
            return Err(Error::Input(format!("record '{}' is empty", records[i].id)));
        }
        let mut j = i + 1;
        while j < records.len() && j - i < EMBED_BATCH && records[j].seq.len() == len {
            j += 1;
        }
        let ids: Vec<Token> = records[i..j].iter().flat_map(|r| tokenize(&r.seq)).collect();
        let e = model
            .extract_embeddings(&ids, j - i, len)
            .map_err(|e| Error::Input(format!("records '{}'..: {e}", records[i].id)))?;
        out.extend(e.data().chunks(d).map(<[f64]>::to_vec));
        i = j;
    }
    Ok(out)
}

/// Write `id,label,e0..e{D-1}` rows, one per record in input order. Values
/// are printed at f32 precision. Returns the number of rows written.
pub fn export_embeddings(model: &Model, records: &[FastaRecord], labels: Option<&[usize]>, path: &Path) -> Result<usize> {
    if let Some(l) = labels {
        if l.len() != records.len() {
            return Err(Error::Input(format!("{} labels for {} records", l.len(), records.len())));
        }
    }
    let emb = embed_records(model, records)?;
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..model.config.dim).map(|k| format!("e{k}")));
    w.write_record(&header).map_err(io)?;
    for (k, (r, e)) in records.iter().zip(&emb).enumerate() {
        let mut row = vec![r.id.clone(), labels.map_or(String::new(), |l| l[k].to_string())];
        row.extend(e.iter().map(|&v| (v as f32).to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(emb.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, tokenize, SynthKind, SynthSpec};
    use crate::model::{build_model, ModelConfig};

    fn setup() -> (Model, Vec<FastaRecord>, Vec<usize>) {
        let m = build_model(&ModelConfig {
            dim: 8,
            num_layers: 2,
            num_gcmb: 1,
            heads: 2,
            kernel: 3,
            ssm_state: 2,
            train_len: 16,
            ..ModelConfig::default()
        })
        .unwrap();
        let c = synth_corpus(&SynthSpec {
            kind: SynthKind::MotifPlanted { motif: "ACGTTG".into() },
            num_records: 10,
            record_len: 24,
            seed: 1,
        })
        .unwrap();
        (m, c.records, c.labels)
    }

    #[test]
    fn csv_shape_and_consistency() {
        let (m, recs, labels) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        assert_eq!(export_embeddings(&m, &recs, Some(&labels), &p).unwrap(), 10);
        let mut r = csv::Reader::from_path(&p).unwrap();
        assert_eq!(r.headers().unwrap().len(), 10);
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 10);
        for (k, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), 2 + 8);
            assert_eq!(&row[0], recs[k].id);
            assert_eq!(row[1].parse::<usize>().unwrap(), labels[k]);
            let direct = m.extract_embeddings(&tokenize(&recs[k].seq), 1, 24).unwrap().to_vec();
            for (s, v) in row.iter().skip(2).zip(direct) {
                assert_eq!(s.parse::<f32>().unwrap(), v as f32);
            }
        }
        let q = dir.path().join("f.csv");
        export_embeddings(&m, &recs, Some(&labels), &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn unwritable_path_is_named() {
        let (m, recs, _) = setup();
        let err = export_embeddings(&m, &recs, None, Path::new("/nonexistent/dir/e.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/e.csv"), "{err}");
    }
}
