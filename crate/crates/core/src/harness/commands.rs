//! File-level commands: each reads the inputs named in a [`RunConfig`] and
//! writes its outputs into one directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderModel;
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{PathsConfig, RunConfig};
use crate::harness::train::{oracle_teacher, train as train_loop, EpochRecord, Hooks, Phase, StepRecord, TrainData, TrainRun};
use crate::losses::Objective;
use crate::metrics::{compare_table, evaluate as rank_and_score, write_run, EvalReport};
use crate::text::batch::{load_teacher_margins, write_teacher_margins};
use crate::text::corpus::{load_hard_negatives, load_qrels, load_texts, read_id_text, write_hard_negatives, write_id_text, write_qrels};
use crate::text::{generate_synthetic, mine_hard_negatives, Corpus, NegativeSource, SynthSpec, Vocabulary};
use crate::variations::{Family, Varier, VariationSpec};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const STEP_LOG: &str = "train_log.jsonl";
pub const SUMMARY: &str = "summary.json";

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Config(format!("paths.{key} is required")))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::file(dir))
}

/// Writes a synthetic corpus: collection, per-split queries, qrels,
/// vocabulary, optional mined negatives, the corpus spec and a `run.json`
/// whose paths point at these files.
pub fn gen_corpus(spec: &SynthSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let synth = generate_synthetic(spec)?;
    ensure_dir(out)?;
    let vocab = &synth.vocab;
    let docs: Vec<(u64, String)> = synth.corpus.documents.iter().map(|(&id, t)| (id, vocab.detokenize(t))).collect();
    write_id_text(&out.join("collection.tsv"), docs.iter().map(|(i, s)| (*i, s.as_str())))?;
    for (name, ids) in [("train", &synth.splits.train), ("dev", &synth.splits.dev), ("test", &synth.splits.test)] {
        let rows: Vec<(u64, String)> = ids.iter().map(|id| (*id, vocab.detokenize(&synth.corpus.queries[id]))).collect();
        write_id_text(&out.join(format!("queries.{name}.tsv")), rows.iter().map(|(i, s)| (*i, s.as_str())))?;
    }
    write_qrels(&out.join("qrels.tsv"), &synth.corpus.qrels)?;
    vocab.save(&out.join("vocab.txt"))?;
    let mut run = RunConfig::default();
    run.paths = PathsConfig {
        collection: Some("collection.tsv".into()),
        queries: Some("queries.train.tsv".into()),
        dev_queries: Some("queries.dev.tsv".into()),
        test_queries: Some("queries.test.tsv".into()),
        qrels: Some("qrels.tsv".into()),
        vocab: Some("vocab.txt".into()),
        ..PathsConfig::default()
    };
    if spec.hard_negatives > 0 {
        let mined = mine_hard_negatives(&synth.corpus, &synth.splits.train, spec.hard_negatives);
        write_hard_negatives(&out.join("hard_negatives.tsv"), &mined)?;
        run.paths.negatives = Some("hard_negatives.tsv".into());
    }
    run.model.vocab_size = vocab.len();
    run.save(&out.join("run.json"))?;
    let path = out.join("spec.json");
    fs::write(&path, serde_json::to_string_pretty(spec)?).map_err(Error::file(&path))
}

/// Training corpus: every document, the training and dev queries, qrels.
struct Loaded {
    corpus: Corpus,
    train: Vec<u64>,
    dev: Vec<u64>,
}

fn load_training(paths: &PathsConfig, vocab: &Vocabulary) -> Result<Loaded> {
    let documents = load_texts(required(&paths.collection, "collection")?, vocab)?;
    if documents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut queries = load_texts(required(&paths.queries, "queries")?, vocab)?;
    let train: Vec<u64> = queries.keys().copied().collect();
    let mut dev = Vec::new();
    if let Some(p) = &paths.dev_queries {
        for (id, q) in load_texts(p, vocab)? {
            if queries.insert(id, q).is_some() {
                return Err(Error::invalid(format!("query {id} is in both the training and the dev file")));
            }
            dev.push(id);
        }
    }
    let qrels = load_qrels(required(&paths.qrels, "qrels")?, Some(&documents))?;
    Ok(Loaded {
        corpus: Corpus {
            documents,
            queries,
            qrels,
        },
        train,
        dev,
    })
}

/// Vocabulary for a fresh model: `paths.vocab`, or every word of the
/// collection and the training queries.
fn fresh_vocabulary(paths: &PathsConfig) -> Result<Vocabulary> {
    if let Some(p) = &paths.vocab {
        return Vocabulary::load(p);
    }
    let mut texts = read_id_text(required(&paths.collection, "collection")?)?;
    texts.extend(read_id_text(required(&paths.queries, "queries")?)?);
    Ok(Vocabulary::from_texts(texts.iter().map(|(_, t)| t.as_str())))
}

/// A starting checkpoint must share the corpus vocabulary: `paths.vocab`
/// when given, otherwise every collection word must be known.
fn check_vocabulary(start: &Checkpoint, paths: &PathsConfig) -> Result<()> {
    if let Some(p) = &paths.vocab {
        let vocab = Vocabulary::load(p)?;
        if vocab != start.vocab {
            return Err(Error::VocabMismatch(format!(
                "{} ({} tokens) differs from the checkpoint vocabulary ({} tokens)",
                p.display(),
                vocab.len(),
                start.vocab.len()
            )));
        }
        return Ok(());
    }
    let texts = read_id_text(required(&paths.collection, "collection")?)?;
    let unknown: BTreeSet<String> = texts
        .iter()
        .flat_map(|(_, t)| crate::text::vocab::split_words(t))
        .filter(|w| !start.vocab.contains(w))
        .collect();
    if !unknown.is_empty() {
        let sample: Vec<&String> = unknown.iter().take(5).collect();
        return Err(Error::VocabMismatch(format!(
            "{} collection words are missing from the checkpoint vocabulary, e.g. {sample:?}",
            unknown.len()
        )));
    }
    Ok(())
}

fn negatives_from(paths: &PathsConfig) -> Result<NegativeSource> {
    Ok(match &paths.negatives {
        Some(p) => NegativeSource::Hard(load_hard_negatives(p)?),
        None => NegativeSource::Random,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub strategy: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_mrr: Option<f64>,
    pub epochs_done: usize,
    pub steps: usize,
    pub skipped_queries: usize,
}

/// Runs one training phase, streaming the step log and writing `last.ckpt`
/// and `best.ckpt` after every epoch, so a failed run keeps its last good
/// weights.
fn run_phase(cfg: &RunConfig, data: &TrainData, start: Checkpoint, phase: &Phase, out: &Path) -> Result<TrainRun> {
    ensure_dir(out)?;
    cfg.save(&out.join("config.json"))?;
    let log_path = out.join(STEP_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(Error::file(&log_path))?);
    let mut on_step = |rec: &StepRecord| -> Result<()> {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n").map_err(Error::file(&log_path))
    };
    let mut best_dev: Option<Option<f64>> = None;
    let mut on_epoch = |ck: &Checkpoint, rec: &EpochRecord| -> Result<()> {
        ck.save(&out.join(LAST_CHECKPOINT))?;
        let better = match (best_dev, rec.dev_mrr) {
            (Some(Some(b)), Some(d)) => d > b,
            _ => true,
        };
        if better {
            best_dev = Some(rec.dev_mrr);
            ck.save(&out.join(BEST_CHECKPOINT))?;
        }
        Ok(())
    };
    let hooks = Hooks {
        on_step: Some(&mut on_step),
        on_epoch: Some(&mut on_epoch),
    };
    let run = train_loop(cfg, data, start, phase, hooks)?;
    log.flush().map_err(Error::file(&log_path))?;
    let best_epoch = run.best.meta.epochs_done.saturating_sub(1);
    let summary = TrainSummary {
        strategy: format!("{:?}", phase.perturbation.strategy).to_lowercase(),
        epochs: run.epochs.clone(),
        best_epoch,
        best_dev_mrr: run.best.meta.dev_mrr,
        epochs_done: run.last.meta.epochs_done,
        steps: run.steps,
        skipped_queries: run.skipped_queries,
    };
    let path = out.join(SUMMARY);
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(Error::file(&path))?;
    Ok(run)
}

/// Trains from scratch, or resumes `paths.checkpoint` for `at.at_epochs`
/// adversarial epochs when `at.at_from_checkpoint` is set.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainRun> {
    let mut cfg = cfg.clone();
    let (start, epochs) = if cfg.at.at_from_checkpoint {
        let start = Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
        check_vocabulary(&start, &cfg.paths)?;
        cfg.model = start.model.config.clone();
        if !start.meta.config_hash.is_empty() && start.meta.config_hash != cfg.hash() {
            log::warn!("resuming a checkpoint written under a different configuration");
        }
        (start, cfg.at.at_epochs)
    } else {
        let vocab = fresh_vocabulary(&cfg.paths)?;
        cfg.model.vocab_size = vocab.len();
        let model = EncoderModel::new(cfg.model.clone(), cfg.training.seed)?;
        (Checkpoint::new(model, vocab), cfg.training.epochs)
    };
    let loaded = load_training(&cfg.paths, &start.vocab)?;
    let data = TrainData {
        corpus: &loaded.corpus,
        train: loaded.train.clone(),
        dev: loaded.dev.clone(),
        negatives: negatives_from(&cfg.paths)?,
    };
    let phase = Phase {
        epochs,
        learning_rate: cfg.training.learning_rate,
        perturbation: &cfg.perturbation,
    };
    run_phase(&cfg, &data, start, &phase, out)
}

/// Trains a fresh model with margin-MSE against teacher margins, from
/// `paths.teacher` or, with `distill.oracle`, a generated oracle file.
pub fn distill(cfg: &RunConfig, out: &Path) -> Result<TrainRun> {
    let mut cfg = cfg.clone();
    cfg.loss.objective = Objective::MarginMse;
    let vocab = fresh_vocabulary(&cfg.paths)?;
    cfg.model.vocab_size = vocab.len();
    let loaded = load_training(&cfg.paths, &vocab)?;
    let margins = if cfg.distill.oracle {
        let d = &cfg.distill;
        let margins = oracle_teacher(&loaded.corpus, &loaded.train, d.negatives_per_query, d.sigma, cfg.training.seed)?;
        ensure_dir(out)?;
        let path = out.join("teacher.tsv");
        write_teacher_margins(&path, &margins)?;
        cfg.paths.teacher = Some(path);
        margins
    } else {
        load_teacher_margins(required(&cfg.paths.teacher, "teacher")?)?
    };
    if margins.values().all(Vec::is_empty) {
        return Err(Error::invalid("teacher file holds no margins"));
    }
    let model = EncoderModel::new(cfg.model.clone(), cfg.training.seed)?;
    let data = TrainData {
        corpus: &loaded.corpus,
        train: loaded.train.clone(),
        dev: loaded.dev.clone(),
        negatives: NegativeSource::Teacher(margins),
    };
    let phase = Phase {
        epochs: cfg.training.epochs,
        learning_rate: cfg.training.learning_rate,
        perturbation: &cfg.perturbation,
    };
    run_phase(&cfg, &data, Checkpoint::new(model, vocab), &phase, out)
}

/// Continues `paths.checkpoint` on a new corpus at
/// `training.learning_rate * finetune.lr_scale` with a fresh optimizer.
/// Zero epochs copies the input checkpoint unchanged.
pub fn finetune(cfg: &RunConfig, out: &Path) -> Result<Option<TrainRun>> {
    let mut cfg = cfg.clone();
    let input = required(&cfg.paths.checkpoint, "checkpoint")?.to_path_buf();
    let mut start = Checkpoint::load(&input)?;
    check_vocabulary(&start, &cfg.paths)?;
    if cfg.training.epochs == 0 {
        ensure_dir(out)?;
        let target = out.join(BEST_CHECKPOINT);
        fs::copy(&input, &target).map_err(Error::file(&target))?;
        return Ok(None);
    }
    cfg.model = start.model.config.clone();
    start.adam = None;
    let loaded = load_training(&cfg.paths, &start.vocab)?;
    let data = TrainData {
        corpus: &loaded.corpus,
        train: loaded.train.clone(),
        dev: loaded.dev.clone(),
        negatives: negatives_from(&cfg.paths)?,
    };
    let phase = Phase {
        epochs: cfg.training.epochs,
        learning_rate: cfg.training.learning_rate * cfg.finetune.lr_scale,
        perturbation: &cfg.perturbation,
    };
    run_phase(&cfg, &data, start, &phase, out).map(Some)
}

/// The queries a command reads: `paths.test_queries`, else `paths.queries`.
fn evaluation_queries(paths: &PathsConfig) -> Result<&Path> {
    paths
        .test_queries
        .as_deref()
        .or(paths.queries.as_deref())
        .ok_or_else(|| Error::Config("paths.test_queries (or paths.queries) is required".into()))
}

/// Writes `<family>.tsv` and `<family>.manifest.jsonl` for every entry of
/// `eval.variations`. An empty list means every family that needs no word
/// list, seeded with `training.seed`. Returns the files written and their
/// query counts.
pub fn perturb_queries(cfg: &RunConfig, out: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let queries = evaluation_queries(&cfg.paths)?;
    let specs: Vec<VariationSpec> = if cfg.eval.variations.is_empty() {
        Family::ALL
            .iter()
            .filter(|f| !matches!(f, Family::RmStopwords | Family::LexiconSyn))
            .map(|&f| VariationSpec::new(f, cfg.training.seed))
            .collect()
    } else {
        cfg.eval.variations.clone()
    };
    ensure_dir(out)?;
    let mut written = Vec::new();
    for spec in specs {
        let name = spec.family.name();
        let output = out.join(format!("{name}.tsv"));
        let n = Varier::new(spec)?.vary_file(queries, &output, &out.join(format!("{name}.manifest.jsonl")))?;
        written.push((output, n));
    }
    Ok(written)
}

/// Ranks the whole collection for every evaluation query with
/// `paths.checkpoint` and writes `<tag>.run` (TREC format) and
/// `<tag>.json`, where the tag is `eval.tag` or `original`.
pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let ck_path = required(&cfg.paths.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(ck_path)?;
    let documents = load_texts(required(&cfg.paths.collection, "collection")?, &ck.vocab)?;
    if documents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let queries = load_texts(evaluation_queries(&cfg.paths)?, &ck.vocab)?;
    let qrels = load_qrels(required(&cfg.paths.qrels, "qrels")?, Some(&documents))?;
    let (mut report, runs) = rank_and_score(&ck.model, &documents, &queries, &qrels)?;
    let tag = cfg.eval.tag.clone().unwrap_or_else(|| "original".to_string());
    report.system = Some(ck_path.display().to_string());
    report.variation = Some(tag.clone());
    ensure_dir(out)?;
    write_run(&out.join(format!("{tag}.run")), &runs, &tag)?;
    report.save(&out.join(format!("{tag}.json")))?;
    Ok(report)
}

/// Table of report means with significance marks against the first report.
/// All reports must cover the same queries.
pub fn compare(reports: &[PathBuf], tsv: bool) -> Result<String> {
    let mut rows = Vec::new();
    let mut ids: Option<BTreeMap<&str, BTreeSet<u64>>> = None;
    let loaded: Vec<(PathBuf, EvalReport)> = reports
        .iter()
        .map(|p| EvalReport::load(p).map(|r| (p.clone(), r)))
        .collect::<Result<_>>()?;
    for (path, report) in &loaded {
        let these: BTreeMap<&str, BTreeSet<u64>> = report
            .metrics
            .iter()
            .map(|(m, v)| (m.as_str(), v.per_query.keys().copied().collect()))
            .collect();
        match &ids {
            None => ids = Some(these),
            Some(first) if *first != these => {
                return Err(Error::invalid(format!(
                    "{} covers different queries than {}",
                    path.display(),
                    loaded[0].0.display()
                )))
            }
            Some(_) => {}
        }
        let system = report.system.clone().unwrap_or_else(|| path.display().to_string());
        let name = match &report.variation {
            Some(v) => format!("{system} [{v}]"),
            None => system,
        };
        rows.push((name, report.clone()));
    }
    compare_table(&rows, tsv)
}
