//! The training loop shared by `train`, `distill` and `finetune`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adversarial::{train_step, AdversaryState, PerturbationConfig, Strategy};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::metrics::{mrr_at_k, rank_all};
use crate::optim::{adam_step, AdamState, LinearSchedule};
use crate::text::{overlap, BatchSampler, Corpus, LexicalIndex, NegativeSource, TeacherMargins};

/// Documents, judgments and the query splits used by one run.
pub struct TrainData<'a> {
    /// Holds every query referenced by `train` and `dev`.
    pub corpus: &'a Corpus,
    pub train: Vec<u64>,
    pub dev: Vec<u64>,
    pub negatives: NegativeSource,
}

/// One line of the per-step JSON log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub strategy: Strategy,
    pub clean_loss: f64,
    pub adversarial_loss: Option<f64>,
    pub total_loss: f64,
    pub flops: Option<f64>,
    pub backward_passes: usize,
    pub grad_norm: f64,
    pub degenerate: usize,
    pub universal_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_mrr: Option<f64>,
}

pub struct TrainRun {
    /// Best epoch by dev MRR@10, or the last epoch without a dev split.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub skipped_queries: usize,
}

/// What a run trains with; `train`, AT resume and finetuning differ only
/// here.
pub struct Phase<'p> {
    pub epochs: usize,
    pub learning_rate: f64,
    pub perturbation: &'p PerturbationConfig,
}

#[derive(Default)]
pub struct Hooks<'h> {
    pub on_step: Option<&'h mut dyn FnMut(&StepRecord) -> Result<()>>,
    /// Called with the weights after every epoch, before selection.
    pub on_epoch: Option<&'h mut dyn FnMut(&Checkpoint, &EpochRecord) -> Result<()>>,
}

pub fn dev_mrr(ck: &Checkpoint, corpus: &Corpus, dev: &[u64]) -> Result<f64> {
    let queries = corpus.subset_queries(dev);
    let runs = rank_all(&ck.model, &corpus.documents, &queries, 10)?;
    Ok(mrr_at_k(&runs, &corpus.qrels, 10)?.mean)
}

/// Runs `phase.epochs` epochs from `start`. Epoch numbering (and with it
/// batch shuffling) continues from `start.meta.epochs_done`.
pub fn train(cfg: &RunConfig, data: &TrainData, mut start: Checkpoint, phase: &Phase, mut hooks: Hooks) -> Result<TrainRun> {
    let t = &cfg.training;
    let mut sampler = BatchSampler::new(data.corpus, &data.train, data.negatives.clone(), t.batch_size, t.negatives, t.seed)?;
    let total_steps = phase.epochs * sampler.batches_per_epoch();
    let schedule = LinearSchedule {
        base_lr: phase.learning_rate,
        total_steps,
    };
    let mut adam = start.adam.take().unwrap_or_else(|| AdamState::new(&start.model.params));
    let mut adversary = start
        .adversary
        .take()
        .unwrap_or_else(|| AdversaryState::new(start.model.config.dim, t.seed));
    let mut current = start;
    current.meta.config_hash = cfg.hash();
    current.meta.strategy = Some(format!("{:?}", phase.perturbation.strategy).to_lowercase());
    let mut best: Option<Checkpoint> = None;
    let mut epochs = Vec::new();
    let mut step = 0;
    let first_epoch = current.meta.epochs_done;
    for e in first_epoch..first_epoch + phase.epochs {
        let mut loss_sum = 0.0;
        let batches = sampler.epoch(e);
        let n_batches = batches.len();
        for batch in batches {
            current.model.params.zero_grads();
            let stats = train_step(&mut current.model, &batch, &cfg.loss, phase.perturbation, &mut adversary)?;
            if !stats.total_loss.is_finite() {
                return Err(Error::NanLoss { epoch: e, step });
            }
            let lr = schedule.lr_at(step);
            let record = StepRecord {
                epoch: e,
                step: current.meta.steps_done,
                lr,
                strategy: phase.perturbation.strategy,
                clean_loss: stats.clean_loss,
                adversarial_loss: stats.adversarial_loss,
                total_loss: stats.total_loss,
                flops: stats.flops,
                backward_passes: stats.backward_passes,
                grad_norm: current.model.params.grad_norm(),
                degenerate: stats.degenerate,
                universal_norm: stats.universal_norm,
            };
            adam_step(&mut current.model.params, &mut adam, &t.adam, lr)?;
            if let Some(f) = hooks.on_step.as_mut() {
                f(&record)?;
            }
            loss_sum += stats.total_loss;
            step += 1;
            current.meta.steps_done += 1;
        }
        current.meta.epochs_done = e + 1;
        current.adam = Some(adam.clone());
        current.adversary = Some(adversary.clone());
        let dev = if t.select_on_dev && !data.dev.is_empty() {
            Some(dev_mrr(&current, data.corpus, &data.dev)?)
        } else {
            None
        };
        current.meta.dev_mrr = dev;
        let record = EpochRecord {
            epoch: e,
            mean_loss: loss_sum / n_batches.max(1) as f64,
            dev_mrr: dev,
        };
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&current, &record)?;
        }
        log::info!("epoch {e}: loss {:.5} dev mrr@10 {:?}", record.mean_loss, dev);
        let better = match (&best, dev) {
            (None, _) => true,
            (Some(b), Some(d)) => d > b.meta.dev_mrr.unwrap_or(f64::NEG_INFINITY),
            (Some(_), None) => true,
        };
        if better {
            best = Some(current.clone());
        }
        epochs.push(record);
    }
    current.adam = Some(adam);
    current.adversary = Some(adversary);
    Ok(TrainRun {
        best: best.unwrap_or_else(|| current.clone()),
        last: current,
        epochs,
        steps: step,
        skipped_queries: sampler.skipped(),
    })
}

/// Oracle teacher for distillation: margin = overlap(q, d+) - overlap(q, d-)
/// plus Gaussian noise. Half of each query's negatives are the lexically
/// closest non-relevant documents, the rest uniform.
pub fn oracle_teacher(corpus: &Corpus, queries: &[u64], negatives_per_query: usize, sigma: f64, seed: u64) -> Result<TeacherMargins> {
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = LexicalIndex::new(&corpus.documents);
    let doc_ids: Vec<u64> = corpus.documents.keys().copied().collect();
    let mut out = BTreeMap::new();
    for &q in queries {
        let Some(qt) = corpus.queries.get(&q) else { continue };
        let positives: Vec<u64> = corpus.relevant(q).collect();
        if positives.is_empty() {
            continue;
        }
        let hard = negatives_per_query / 2;
        let mut negs: Vec<u64> = index
            .rank(qt, hard + positives.len())
            .into_iter()
            .map(|(d, _)| d)
            .filter(|&d| !corpus.is_relevant(q, d))
            .take(hard)
            .collect();
        let mut guard = 0;
        while negs.len() < negatives_per_query && guard < 100 * negatives_per_query {
            guard += 1;
            let d = doc_ids[rand::Rng::random_range(&mut rng, 0..doc_ids.len())];
            if !corpus.is_relevant(q, d) && !negs.contains(&d) {
                negs.push(d);
            }
        }
        let mut rows = Vec::new();
        for &p in &positives {
            let sp = overlap(qt, &corpus.documents[&p]);
            for &n in &negs {
                let m = sp - overlap(qt, &corpus.documents[&n]);
                let m = if sigma > 0.0 { m + noise.sample(&mut rng) } else { m };
                rows.push((p, n, m));
            }
        }
        out.insert(q, rows);
    }
    Ok(out)
}
