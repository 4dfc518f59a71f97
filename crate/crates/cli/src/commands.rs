use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use wisteria::data::{load_manifest_corpus, read_fasta_file, write_fasta, FastaRecord};
use wisteria::eval::{
    bench_variants, embed_records, eval_perplexity, export_embeddings, linear_probe, BenchOptions, EvalReport, PplOptions,
    ProbeConfig, EVAL_SEED,
};
use wisteria::model::{build_model, inspect_checkpoint, load_checkpoint, Model, Variant};
use wisteria::nn::Module;
use wisteria::train::{train, StepRecord, TrainOptions, CHECKPOINT_FILE, RUN_LOG, STATE_FILE, TIMING_LOG};
use wisteria::{Error, Result};

use crate::output::OutDir;
use crate::settings::RunConfig;
use crate::{Common, CorpusArgs};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    RunConfig::resolve(common.config.as_deref(), &common.overrides, common.seed)
}

/// A FASTA file, or a manifest whose lines name FASTA files.
fn load_corpus(args: &CorpusArgs, rc: &mut RunConfig) -> Result<Vec<FastaRecord>> {
    if let Some(p) = &args.corpus {
        rc.data.corpus = Some(p.clone());
    }
    let path = rc
        .data
        .corpus
        .clone()
        .ok_or_else(|| Error::Usage("no corpus given (pass --corpus or set `corpus`)".into()))?;
    let mut head = [0u8; 1024];
    let n = std::fs::File::open(&path)
        .and_then(|mut f| f.read(&mut head))
        .map_err(io_err(&path))?;
    if head[..n].iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'>') {
        read_fasta_file(&path)
    } else {
        load_manifest_corpus(&path)
    }
}

fn load_labels(flag: Option<PathBuf>, rc: &mut RunConfig, records: &[FastaRecord]) -> Result<Vec<usize>> {
    if let Some(p) = flag {
        rc.data.labels = Some(p);
    }
    let path = rc
        .data
        .labels
        .clone()
        .ok_or_else(|| Error::Usage("no labels given (pass --labels or set `labels`)".into()))?;
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let label = row
            .get(1)
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Data(format!("{}: row {} needs `id,label` with an integer label", path.display(), i + 2)))?;
        map.insert(row[0].to_string(), label);
    }
    records
        .iter()
        .map(|rec| {
            map.get(&rec.id)
                .copied()
                .ok_or_else(|| Error::Data(format!("{}: no label for record '{}'", path.display(), rec.id)))
        })
        .collect()
}

fn progress(every: u64) -> impl FnMut(&StepRecord) {
    move |r| {
        if r.step % every == 0 {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}  grad_norm {:.3}", r.step, r.loss, r.lr, r.grad_norm);
        }
    }
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    names.iter().map(|s| s.trim().parse()).collect()
}

pub fn synth(common: &Common) -> Result<()> {
    let rc = resolve(common)?;
    let corpus = rc.data.synth(rc.seed)?;
    let out = OutDir::prepare(&common.out, common.force, false)?;
    let fa = out.join("corpus.fa");
    let file = std::fs::File::create(&fa).map_err(io_err(&fa))?;
    write_fasta(&corpus.records, std::io::BufWriter::new(file), 80).map_err(io_err(&fa))?;
    let lp = out.join("labels.csv");
    let mut w = csv::Writer::from_path(&lp).map_err(|e| Error::Data(format!("{}: {e}", lp.display())))?;
    let data = |e: csv::Error| Error::Data(format!("{}: {e}", lp.display()));
    w.write_record(["id", "label"]).map_err(data)?;
    for (r, l) in corpus.records.iter().zip(&corpus.labels) {
        w.write_record([r.id.as_str(), &l.to_string()]).map_err(data)?;
    }
    w.flush().map_err(io_err(&lp))?;
    out.finish("synth", &rc, &[fa.clone(), lp])?;
    println!("wrote {} records to {}", corpus.records.len(), fa.display());
    Ok(())
}

pub fn pretrain(common: &Common, corpus: &CorpusArgs, resume: Option<PathBuf>, stop_after: Option<u64>) -> Result<()> {
    let mut rc = resolve(common)?;
    rc.check_training()?;
    let records = load_corpus(corpus, &mut rc)?;
    let out = OutDir::prepare(&common.out, common.force, resume.is_some())?;
    let model = build_model(&rc.model)?;
    let opts = TrainOptions {
        out_dir: Some(out.path.clone()),
        resume,
        stop_after,
    };
    let log = train(&model, &records, &rc.train, &opts, &mut progress(10))?;
    let artifacts: Vec<PathBuf> = [RUN_LOG, TIMING_LOG, CHECKPOINT_FILE, STATE_FILE].iter().map(|f| out.join(f)).collect();
    out.finish("pretrain", &rc, &artifacts)?;
    match log.last() {
        Some(r) => println!("step {} loss {:.4}; checkpoint {}", r.step, r.loss, out.join(CHECKPOINT_FILE).display()),
        None => println!("no steps run; checkpoint {}", out.join(CHECKPOINT_FILE).display()),
    }
    Ok(())
}

fn ppl_options(rc: &RunConfig) -> PplOptions {
    PplOptions {
        seed: EVAL_SEED,
        mask: rc.train.mask,
        max_rows: rc.eval.eval_max_rows,
        token_budget: rc.train.token_budget,
    }
}

pub fn eval_ppl(common: &Common, corpus: &CorpusArgs, ckpt: &Path, lengths: &[usize]) -> Result<()> {
    let mut rc = resolve(common)?;
    let model = load_checkpoint(ckpt)?;
    rc.model = model.config.clone();
    if !lengths.is_empty() {
        rc.eval.eval_lengths = lengths.to_vec();
    }
    let records = load_corpus(corpus, &mut rc)?;
    let out = OutDir::prepare(&common.out, common.force, false)?;
    let report = EvalReport {
        ppl: eval_perplexity(&model, &records, &rc.eval_lengths(), &ppl_options(&rc))?,
        ..EvalReport::default()
    };
    let files = report.write(&out.path)?;
    out.finish("eval-ppl", &rc, &files)?;
    print!("{}", report.summary());
    Ok(())
}

pub fn probe(common: &Common, corpus: &CorpusArgs, ckpt: Option<&Path>, labels: Option<PathBuf>) -> Result<()> {
    let mut rc = resolve(common)?;
    let model = match ckpt {
        Some(p) => load_checkpoint(p)?,
        None => build_model(&rc.model)?,
    };
    rc.model = model.config.clone();
    let records = load_corpus(corpus, &mut rc)?;
    let labels = load_labels(labels, &mut rc, &records)?;
    let out = OutDir::prepare(&common.out, common.force, false)?;
    let cfg = ProbeConfig {
        folds: rc.eval.probe_folds,
        seeds: rc.eval.probe_seeds,
        epochs: rc.eval.probe_epochs,
        lr: rc.eval.probe_lr,
        ..ProbeConfig::default()
    };
    let report = EvalReport {
        probe: Some(linear_probe(&embed_records(&model, &records)?, &labels, &cfg)?),
        ..EvalReport::default()
    };
    let files = report.write(&out.path)?;
    out.finish("probe", &rc, &files)?;
    print!("{}", report.summary());
    Ok(())
}

struct AblationRow {
    name: String,
    variant: Variant,
    num_gcmb: usize,
    params: usize,
    final_loss: f64,
    ppl: f64,
}

fn run_ablation(rc: &RunConfig, records: &[FastaRecord], name: String, model: Model, dir: &Path) -> Result<AblationRow> {
    eprintln!("ablation {name}: {} layers {:?}", model.layers.len(), model.layer_kinds());
    let opts = TrainOptions {
        out_dir: Some(dir.to_path_buf()),
        ..TrainOptions::default()
    };
    let log = train(&model, records, &rc.train, &opts, &mut progress(50))?;
    let tail = &log[log.len().saturating_sub(10)..];
    let final_loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
    let ppl = eval_perplexity(&model, records, &[model.config.train_len], &ppl_options(rc))?[0].ppl;
    Ok(AblationRow {
        name,
        variant: model.config.variant,
        num_gcmb: model.config.num_gcmb,
        params: model.num_params(),
        final_loss,
        ppl,
    })
}

pub fn ablate(common: &Common, corpus: &CorpusArgs, variants: &[String], nblocks: &[usize]) -> Result<()> {
    if variants.is_empty() && nblocks.is_empty() {
        return Err(Error::Usage("ablate needs --variants and/or --nblocks".into()));
    }
    let mut rc = resolve(common)?;
    rc.check_training()?;
    let variants = parse_variants(variants)?;
    let mut plans = Vec::new();
    for v in variants {
        let mut cfg = rc.model.clone();
        cfg.variant = v;
        plans.push((v.to_string(), cfg));
    }
    for &n in nblocks {
        let mut cfg = rc.model.clone();
        cfg.variant = Variant::Full;
        cfg.num_gcmb = n;
        cfg.validate()?;
        plans.push((format!("nblocks_{n}"), cfg));
    }
    let records = load_corpus(corpus, &mut rc)?;
    let out = OutDir::prepare(&common.out, common.force, false)?;
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for (name, cfg) in plans {
        let model = build_model(&cfg)?;
        let dir = out.join(&name);
        rows.push(run_ablation(&rc, &records, name, model, &dir)?);
        files.push(dir);
    }
    let p = out.join("ablate.csv");
    let data = |e: csv::Error| Error::Data(format!("{}: {e}", p.display()));
    let mut w = csv::Writer::from_path(&p).map_err(data)?;
    w.write_record(["name", "variant", "num_gcmb", "params", "final_loss", "ppl"]).map_err(data)?;
    for r in &rows {
        w.write_record([
            r.name.clone(),
            r.variant.to_string(),
            r.num_gcmb.to_string(),
            r.params.to_string(),
            r.final_loss.to_string(),
            r.ppl.to_string(),
        ])
        .map_err(data)?;
    }
    w.flush().map_err(io_err(&p))?;
    files.push(p);
    out.finish("ablate", &rc, &files)?;
    for r in &rows {
        println!("{:<18} params {:>9}  loss {:.4}  ppl {:.4}", r.name, r.params, r.final_loss, r.ppl);
    }
    Ok(())
}

pub fn bench(common: &Common, lengths: &[usize], variants: &[String]) -> Result<()> {
    let mut rc = resolve(common)?;
    rc.model.validate()?;
    if !lengths.is_empty() {
        rc.eval.bench_lengths = lengths.to_vec();
    }
    let variants = parse_variants(variants)?;
    let out = OutDir::prepare(&common.out, common.force, false)?;
    let opts = BenchOptions {
        reps: rc.eval.bench_reps,
        warmup: rc.eval.bench_warmup,
        batch: rc.eval.bench_batch,
        memory_limit: (rc.eval.bench_memory_limit > 0).then_some(rc.eval.bench_memory_limit),
        seed: rc.seed,
    };
    let report = EvalReport {
        bench: bench_variants(&rc.model, &variants, &rc.eval.bench_lengths, &opts)?,
        ..EvalReport::default()
    };
    let files = report.write(&out.path)?;
    out.finish("bench", &rc, &files)?;
    print!("{}", report.summary());
    Ok(())
}

pub fn export(common: &Common, corpus: &CorpusArgs, ckpt: &Path, labels: Option<PathBuf>) -> Result<()> {
    let mut rc = resolve(common)?;
    let model = load_checkpoint(ckpt)?;
    rc.model = model.config.clone();
    let records = load_corpus(corpus, &mut rc)?;
    let labels = if labels.is_some() || rc.data.labels.is_some() {
        Some(load_labels(labels, &mut rc, &records)?)
    } else {
        None
    };
    let out = OutDir::prepare(&common.out, common.force, false)?;
    let p = out.join("embeddings.csv");
    let n = export_embeddings(&model, &records, labels.as_deref(), &p)?;
    out.finish("export-embeddings", &rc, &[p.clone()])?;
    println!("wrote {n} embeddings to {}", p.display());
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    let info = inspect_checkpoint(path)?;
    println!("checkpoint {} (format version {})", path.display(), info.version);
    println!("[config]");
    print!("{}", info.config_text);
    println!("[tensors]");
    let mut total = 0usize;
    for t in &info.tensors {
        let n: usize = t.shape.iter().product();
        total += n;
        println!("{:<48} {:<16} offset {}", t.name, format!("{:?}", t.shape), t.offset);
    }
    println!("{} tensors, {} parameters", info.tensors.len(), total);
    Ok(())
}
