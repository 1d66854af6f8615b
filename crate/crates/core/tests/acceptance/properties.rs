//! Structural properties of the perturbations: FGSM geometry, backward-pass
//! accounting and universal ascent.

use advrank::adversarial::{
    batch_loss, eps_random_perturbation, fgsm_perturbation, train_step, universal_step, AdversaryState, NormScope, Perturbation,
    PerturbationConfig, Strategy, UniversalState,
};
use advrank::encoders::{EncoderModel, ModelConfig};
use advrank::harness::{train, Checkpoint, Hooks, Phase, RunConfig, StepRecord, TrainData};
use advrank::losses::LossConfig;
use advrank::optim::{adam_step, AdamConfig, AdamState};
use advrank::text::{generate_synthetic, BatchSampler, NegativeSource, Padded, SynthCorpus, SynthSpec, TripletBatch, PAD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

fn corpus() -> SynthCorpus {
    generate_synthetic(&SynthSpec::default()).unwrap()
}

fn model(seed: u64) -> EncoderModel {
    EncoderModel::new(ModelConfig::default(), seed).unwrap()
}

fn batches(s: &SynthCorpus, epochs: usize) -> Vec<TripletBatch> {
    let mut sampler = BatchSampler::new(&s.corpus, &s.splits.train, NegativeSource::Random, 16, 1, 0).unwrap();
    (0..epochs).flat_map(|e| sampler.epoch(e)).collect()
}

/// True when every embedding slot of a pad token is exactly zero.
fn pads_are_zero(delta: &[f64], seqs: &Padded, dim: usize) -> bool {
    seqs.ids
        .iter()
        .zip(delta.chunks(dim))
        .all(|(&t, v)| t != PAD || v.iter().all(|&x| x == 0.0))
}

pub fn fgsm_construction() -> Verdict {
    let s = corpus();
    let loss = LossConfig::default();
    let dim = ModelConfig::default().dim;
    let mut worst = 0.0f64;
    let mut units = 0;
    let mut pads_ok = true;
    let mut steps = 0;
    for scope in [NormScope::JointTriplet, NormScope::PerPart] {
        let cfg = PerturbationConfig {
            strategy: Strategy::Fgsm,
            norm_scope: scope,
            ..PerturbationConfig::default()
        };
        let mut m = model(0);
        let mut adam = AdamState::new(&m.params);
        let mut state = AdversaryState::new(dim, 0);
        for batch in batches(&s, 1) {
            let p = fgsm_perturbation(&m, &batch, &loss, &cfg).unwrap().perturbation;
            for n in p.unit_norms(&batch, dim, scope) {
                if n != 0.0 {
                    worst = worst.max((n - cfg.r_max).abs());
                    units += 1;
                }
            }
            pads_ok &= pads_are_zero(&p.query, &batch.queries, dim)
                && pads_are_zero(&p.positive, &batch.positives, dim)
                && pads_are_zero(&p.negative, &batch.negatives, dim);
            m.params.zero_grads();
            train_step(&mut m, &batch, &loss, &cfg, &mut state).unwrap();
            adam_step(&mut m.params, &mut adam, &AdamConfig::default(), 3e-3).unwrap();
            steps += 1;
        }
    }

    // First-order optimality on frozen models at a small budget.
    let r_max = 1e-3;
    let cfg = PerturbationConfig {
        strategy: Strategy::Fgsm,
        r_max,
        ..PerturbationConfig::default()
    };
    let pool = batches(&s, 4);
    let mut wins = 0;
    for trial in 0..100u64 {
        let m = model(1000 + trial);
        let batch = &pool[trial as usize];
        let clean = batch_loss(&m, batch, &loss, None).unwrap();
        let gain = |d: &Perturbation| batch_loss(&m, batch, &loss, Some(d)).unwrap() - clean;
        let fgsm = gain(&fgsm_perturbation(&m, batch, &loss, &cfg).unwrap().perturbation);
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let best_random = (0..50)
            .map(|_| gain(&eps_random_perturbation(batch, dim, r_max, cfg.norm_scope, &mut rng)))
            .fold(f64::NEG_INFINITY, f64::max);
        if fgsm >= best_random {
            wins += 1;
        }
    }
    Verdict::new(
        worst < 1e-9 && pads_ok && wins >= 95,
        format!(
            "{units} units over {steps} training steps, max |norm - r_max| = {worst:.1e}; pads zero: {pads_ok}; \
             fgsm beat 50 random directions in {wins}/100 trials (need 95)"
        ),
    )
}

pub fn cost_accounting() -> Verdict {
    let s = corpus();
    let mut details = Vec::new();
    let mut pass = true;
    for (strategy, want) in [(Strategy::Fgsm, 2), (Strategy::Universal, 1)] {
        let cfg = RunConfig::default();
        let perturbation = PerturbationConfig {
            strategy,
            ..PerturbationConfig::default()
        };
        let data = TrainData {
            corpus: &s.corpus,
            train: s.splits.train.clone(),
            dev: Vec::new(),
            negatives: NegativeSource::Random,
        };
        let (mut steps, mut off) = (0, 0);
        let mut on_step = |r: &StepRecord| {
            steps += 1;
            if r.backward_passes != want {
                off += 1;
            }
            Ok(())
        };
        let hooks = Hooks {
            on_step: Some(&mut on_step),
            on_epoch: None,
        };
        let phase = Phase {
            epochs: 1,
            learning_rate: cfg.training.learning_rate,
            perturbation: &perturbation,
        };
        train(&cfg, &data, Checkpoint::new(model(0), s.vocab.clone()), &phase, hooks).unwrap();
        pass &= off == 0 && steps > 0;
        details.push(format!("{strategy:?}: {steps} steps, {off} with a count other than {want}"));
    }
    Verdict::new(pass, details.join("; "))
}

pub fn universal_ascent() -> Verdict {
    let s = corpus();
    let batch = &batches(&s, 1)[0];
    let mut m = model(0);
    let frozen = m.params.clone();
    let mut u = UniversalState::new(m.config.dim);
    let cfg = PerturbationConfig {
        strategy: Strategy::Universal,
        ..PerturbationConfig::default()
    };
    let losses: Vec<f64> = (0..20)
        .map(|_| {
            universal_step(&mut u, &mut m, batch, &LossConfig::default(), &cfg)
                .unwrap()
                .adversarial_loss
                .unwrap()
        })
        .collect();
    let unchanged = m.params.iter().zip(frozen.iter()).all(|((_, a), (_, b))| a.data() == b.data());
    let monotone = losses.windows(2).all(|w| w[1] > w[0]);
    Verdict::new(
        losses[19] > losses[0] && unchanged,
        format!(
            "adversarial loss {:.6} -> {:.6} over 20 steps (strictly increasing each step: {monotone}); weights untouched: {unchanged}",
            losses[0], losses[19]
        ),
    )
}
