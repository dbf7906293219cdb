use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clinical_mtl::codec::{
    generate_synthetic_corpus, read_corpus_dir, serialize, write_document, PairFamily,
    RelationSchema, StandoffDocument,
};
use clinical_mtl::corpus::{
    build_vocabulary, document_from_predictions, examples_from_corpus, Example, LinePrediction,
};
use clinical_mtl::eval::{evaluate, EvalReport, ReCondition};
use clinical_mtl::text::{Sentence, TextError};
use clinical_mtl::train::{fit, split_train_val, write_history, ModelBundle};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("no {what} given (flag or [paths] entry)")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_file(path, s)
}

#[derive(Serialize)]
struct GenerateManifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    documents: usize,
    min_sentences: usize,
    max_sentences: usize,
    doc_ids: Vec<&'a str>,
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = require(&cfg.paths.out, "output directory")?;
    create_dir(out)?;
    let schema = RelationSchema::default();
    let docs = generate_synthetic_corpus(cfg.seed, cfg.corpus.documents, &cfg.corpus.grammar());
    for d in &docs {
        write_document(out, d, &schema)?;
    }
    write_json(
        &out.join(MANIFEST_FILE),
        &GenerateManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            documents: docs.len(),
            min_sentences: cfg.corpus.min_sentences,
            max_sentences: cfg.corpus.max_sentences,
            doc_ids: docs.iter().map(|d| d.doc_id.as_str()).collect(),
        },
    )?;
    println!("wrote {} documents to {}", docs.len(), out.display());
    Ok(())
}

/// Reads and validates every document in `dir`; an empty directory is an
/// error.
fn load_corpus(dir: &Path, schema: &RelationSchema) -> Result<Vec<StandoffDocument>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let docs = read_corpus_dir(dir, schema)?;
    if docs.is_empty() {
        return Err(CliError::Data(format!(
            "no .txt documents in {}",
            dir.display()
        )));
    }
    Ok(docs)
}

#[derive(Serialize)]
struct TrainManifest {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    train_documents: Vec<String>,
    validation_documents: Vec<String>,
    epochs_run: usize,
    best_epoch: usize,
    best_validation_re_f1_end2end: Option<f64>,
    stopped_early: bool,
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = require(&cfg.paths.data, "data directory")?;
    let out = require(&cfg.paths.out, "output directory")?;
    let schema = RelationSchema::default();
    let docs = load_corpus(data, &schema)?;
    let (train_docs, val_docs) = split_train_val(&docs, cfg.train.train_fraction, cfg.seed)?;

    let bundle = match &cfg.paths.checkpoint {
        Some(ckpt) => {
            let b = ModelBundle::load(ckpt)?;
            if b.model.config != cfg.model() {
                return Err(CliError::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    ckpt.display()
                )));
            }
            let mut b = b;
            b.train = cfg.train.clone();
            b
        }
        None => {
            let vocab = build_vocabulary(&train_docs, cfg.vocab.min_freq, cfg.vocab.lowercase);
            ModelBundle::new(cfg.model(), cfg.train.clone(), vocab, schema.clone())?
        }
    };
    let max_len = cfg.encoder.max_sequence_length;
    let train_ex = examples_from_corpus(&train_docs, &bundle.vocab, &schema, max_len)?;
    let val_ex = examples_from_corpus(&val_docs, &bundle.vocab, &schema, max_len)?;
    log::info!(
        "{} train / {} validation documents, {} / {} sentences, {} parameters",
        train_docs.len(),
        val_docs.len(),
        train_ex.len(),
        val_ex.len(),
        bundle.store.total_values()
    );
    if bundle.epoch > 0 {
        let r = evaluate(&bundle.model, &bundle.store, &val_ex)?;
        println!(
            "resumed at epoch {}: validation end-to-end RE F1 {:.4} (recorded {:?})",
            bundle.epoch, r.re_end2end.f1, bundle.best_score
        );
    }

    create_dir(out)?;
    write_file(&out.join(CONFIG_ECHO_FILE), cfg.to_toml())?;
    let outcome = fit(bundle, &train_ex, &val_ex)?;
    outcome.best.save(&out.join(CHECKPOINT_FILE))?;
    let mut hist = Vec::new();
    write_history(&mut hist, &outcome.history).expect("in-memory write");
    write_file(&out.join(HISTORY_FILE), hist)?;
    let report = evaluate(&outcome.best.model, &outcome.best.store, &val_ex)?;
    write_report(out, &report)?;
    write_json(
        &out.join(MANIFEST_FILE),
        &TrainManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            train_documents: train_docs.iter().map(|d| d.doc_id.clone()).collect(),
            validation_documents: val_docs.iter().map(|d| d.doc_id.clone()).collect(),
            epochs_run: outcome.history.last().map_or(0, |h| h.epoch),
            best_epoch: outcome.best.epoch,
            best_validation_re_f1_end2end: outcome.best.best_score,
            stopped_early: outcome.stopped_early,
        },
    )?;
    println!(
        "best epoch {} of {}: validation NER F1 {:.4}, RE F1 gold {:.4}, end-to-end {:.4}",
        outcome.best.epoch,
        outcome.history.len(),
        report.ner.f1,
        report.re_gold.f1,
        report.re_end2end.f1
    );
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    write_file(&dir.join(REPORT_FILE), report.to_text())?;
    write_json(&dir.join(REPORT_JSON_FILE), report)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<ModelBundle, CliError> {
    let path = require(&cfg.paths.checkpoint, "checkpoint")?;
    Ok(ModelBundle::load(path)?)
}

fn corpus_examples(
    bundle: &ModelBundle,
    docs: &[StandoffDocument],
) -> Result<Vec<Example>, CliError> {
    let max_len = bundle.model.config.encoder.max_sequence_length;
    Ok(examples_from_corpus(
        docs,
        &bundle.vocab,
        bundle.schema(),
        max_len,
    )?)
}

pub fn evaluate_cmd(cfg: &RunConfig, condition: Option<ReCondition>) -> Result<(), CliError> {
    let bundle = load_checkpoint(cfg)?;
    let data = require(&cfg.paths.data, "data directory")?;
    let docs = load_corpus(data, bundle.schema())?;
    let examples = corpus_examples(&bundle, &docs)?;
    let report = evaluate(&bundle.model, &bundle.store, &examples)?;
    match condition {
        None => print!("{}", report.to_text()),
        Some(c) => {
            println!("ner\t{}", report.ner);
            let re = match c {
                ReCondition::GoldEntities => &report.re_gold,
                ReCondition::EndToEnd => &report.re_end2end,
            };
            println!("re_{}\t{re}", c.as_str());
        }
    }
    if let Some(out) = &cfg.paths.out {
        create_dir(out)?;
        write_report(out, &report)?;
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<(), CliError> {
    let bundle = load_checkpoint(cfg)?;
    let input = require(&cfg.paths.data, "input text file")?;
    let out = require(&cfg.paths.out, "output directory")?;
    let text = fs::read_to_string(input).map_err(|e| CliError::io(input, e))?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    let max_len = bundle.model.config.encoder.max_sequence_length;
    let mut preds = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let sentence = Sentence::new(line, &bundle.vocab, max_len).map_err(|e| match e {
            TextError::TooLong { len, max } => CliError::Data(format!(
                "{} line {}: {len} tokens exceeds maximum {max}",
                input.display(),
                i + 1
            )),
            other => CliError::Data(other.to_string()),
        })?;
        let p = bundle.model.predict(&bundle.store, &sentence)?;
        preds.push(LinePrediction {
            entities: p.entities,
            relations: p.relations,
        });
    }
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Config(format!("cannot name output for {}", input.display())))?;
    let doc = document_from_predictions(stem, &lines, &preds, bundle.schema());
    let files = serialize(&doc, bundle.schema())?;
    create_dir(out)?;
    write_file(&out.join(format!("{stem}.con")), &files.con)?;
    write_file(&out.join(format!("{stem}.rel")), &files.rel)?;
    println!(
        "{} lines: {} concepts, {} relations written to {}",
        lines.len(),
        doc.concepts.len(),
        doc.relations.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize, Default)]
struct CorpusStats {
    documents: usize,
    lines: usize,
    concepts: BTreeMap<String, usize>,
    relations: BTreeMap<String, usize>,
    candidate_pairs: BTreeMap<String, usize>,
}

pub fn inspect(cfg: &RunConfig) -> Result<(), CliError> {
    if let Some(path) = &cfg.paths.checkpoint {
        let b = ModelBundle::load(path)?;
        println!("checkpoint\t{}", path.display());
        println!("epoch\t{}", b.epoch);
        println!("best_score\t{:?}", b.best_score);
        println!("adam_steps\t{}", b.adam.step_count);
        println!("vocabulary\t{}", b.vocab.len());
        println!("parameters\t{}", b.store.total_values());
        println!("tensors\t{}", b.store.len());
        println!(
            "model\t{}",
            serde_json::to_string(&b.model.config).expect("serializable")
        );
    }
    if let Some(dir) = &cfg.paths.data {
        let schema = RelationSchema::default();
        let docs = load_corpus(dir, &schema)?;
        let mut stats = CorpusStats {
            documents: docs.len(),
            ..CorpusStats::default()
        };
        for d in &docs {
            stats.lines += d.lines.len();
            for c in &d.concepts {
                *stats
                    .concepts
                    .entry(c.concept_type.to_string())
                    .or_default() += 1;
            }
            for r in &d.relations {
                *stats.relations.entry(r.label.to_string()).or_default() += 1;
            }
        }
        let vocab = build_vocabulary(&docs, cfg.vocab.min_freq, cfg.vocab.lowercase);
        for ex in examples_from_corpus(&docs, &vocab, &schema, usize::MAX)? {
            for c in &ex.candidates {
                *stats
                    .candidate_pairs
                    .entry(c.family.as_str().to_string())
                    .or_default() += 1;
            }
        }
        for f in PairFamily::ALL {
            stats
                .candidate_pairs
                .entry(f.as_str().to_string())
                .or_default();
        }
        println!(
            "{}",
            serde_json::to_string_pretty(&stats).expect("serializable")
        );
    }
    if cfg.paths.checkpoint.is_none() && cfg.paths.data.is_none() {
        return Err(CliError::Config(
            "inspect needs --data or --checkpoint".into(),
        ));
    }
    Ok(())
}
