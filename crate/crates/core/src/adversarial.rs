//! Embedding-space perturbations and the per-strategy training step.
//!
//! Strategies:
//! * `fgsm`: one extra forward/backward on the clean batch gives the input
//!   gradient `g`; each triplet is pushed by `r_max * g / ||g||`.
//! * `universal`: one shared vector added to every real token embedding,
//!   trained by gradient ascent in the same backward pass as the model.
//! * `eps_random`: a random direction with the same norm budget.
//! * `token_random`: a fraction of tokens swapped for random ones.
//!
//! Every strategy trains on `L_clean + L_adv (+ flops)`; `fgsm` costs two
//! backward passes per step, the others one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::{flops_value, EncoderKind, EncoderModel, Embedded, Tower};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::losses::{adversarial_loss, batch_scores, ranking_loss, total_loss, BatchScores, LossConfig};
use crate::optim::BoundParams;
use crate::tensor::Tensor;
use crate::text::{Padded, TripletBatch, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Fgsm,
    Universal,
    EpsRandom,
    TokenRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// One budget over the concatenated (query, positive, negatives) deltas.
    JointTriplet,
    /// Separate budgets for the query, the positive and the negatives.
    PerPart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `+ r_max g / ||g||`: moves uphill on the adversarial loss.
    Ascent,
    /// `- r_max g / ||g||`: moves downhill.
    Descent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub strategy: Strategy,
    pub r_max: f64,
    pub norm_scope: NormScope,
    pub sign: SignConvention,
    pub token_rate: f64,
    pub universal_lr: f64,
    pub universal_clip: Option<f64>,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::None,
            r_max: 0.01,
            norm_scope: NormScope::JointTriplet,
            sign: SignConvention::Ascent,
            token_rate: 0.15,
            universal_lr: 0.01,
            universal_clip: None,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_max > 0.0) {
            return Err(Error::Config(format!("r_max must be > 0, got {}", self.r_max)));
        }
        if !(0.0..=1.0).contains(&self.token_rate) {
            return Err(Error::Config(format!("token_rate {} outside [0, 1]", self.token_rate)));
        }
        if self.universal_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("universal_clip must be > 0".into()));
        }
        Ok(())
    }
}

/// Additive deltas on the token embeddings of a batch, each laid out like
/// the corresponding `[rows, len, d]` embedding tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    /// Scope units whose gradient norm fell below `1e-12` (left at zero).
    pub degenerate: usize,
}

impl Perturbation {
    /// L2 norm of every scope unit, in batch order.
    pub fn unit_norms(&self, batch: &TripletBatch, dim: usize, scope: NormScope) -> Vec<f64> {
        let units = scope_units(batch, dim, scope);
        units
            .iter()
            .map(|u| {
                u.iter()
                    .map(|(part, range)| self.part(*part)[range.clone()].iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    fn part(&self, p: Part) -> &[f64] {
        match p {
            Part::Query => &self.query,
            Part::Positive => &self.positive,
            Part::Negative => &self.negative,
        }
    }

    fn part_mut(&mut self, p: Part) -> &mut Vec<f64> {
        match p {
            Part::Query => &mut self.query,
            Part::Positive => &mut self.positive,
            Part::Negative => &mut self.negative,
        }
    }

    /// Flattened `(query, positive, negatives)` delta of triplet `i`.
    pub fn triplet(&self, batch: &TripletBatch, dim: usize, i: usize) -> Vec<f64> {
        scope_units(batch, dim, NormScope::JointTriplet)[i]
            .iter()
            .flat_map(|(p, r)| self.part(*p)[r.clone()].to_vec())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Query,
    Positive,
    Negative,
}

type Unit = Vec<(Part, std::ops::Range<usize>)>;

/// Flat ranges that share one norm budget.
fn scope_units(batch: &TripletBatch, dim: usize, scope: NormScope) -> Vec<Unit> {
    let (lq, lp, ln) = (batch.queries.len * dim, batch.positives.len * dim, batch.negatives.len * dim);
    let k = batch.k;
    let mut out = Vec::new();
    for i in 0..batch.size() {
        let parts = [
            (Part::Query, i * lq..(i + 1) * lq),
            (Part::Positive, i * lp..(i + 1) * lp),
            (Part::Negative, i * k * ln..(i + 1) * k * ln),
        ];
        match scope {
            NormScope::JointTriplet => out.push(parts.to_vec()),
            NormScope::PerPart => out.extend(parts.into_iter().map(|p| vec![p])),
        }
    }
    out
}

fn expand_mask(seqs: &Padded, dim: usize) -> impl Iterator<Item = bool> + '_ {
    seqs.ids.iter().flat_map(move |&t| std::iter::repeat_n(t != PAD, dim))
}

/// Zeroes pad positions and rescales every scope unit to norm `r_max`.
/// Units with norm below `1e-12` become zero and are counted.
fn normalize(mut raw: Perturbation, batch: &TripletBatch, dim: usize, scope: NormScope, r_max: f64, sign: f64) -> Perturbation {
    for (part, seqs) in [
        (Part::Query, &batch.queries),
        (Part::Positive, &batch.positives),
        (Part::Negative, &batch.negatives),
    ] {
        for (x, keep) in raw.part_mut(part).iter_mut().zip(expand_mask(seqs, dim)) {
            if !keep {
                *x = 0.0;
            }
        }
    }
    let mut degenerate = 0;
    for unit in scope_units(batch, dim, scope) {
        let norm = unit
            .iter()
            .map(|(p, r)| raw.part(*p)[r.clone()].iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let factor = if norm < 1e-12 {
            degenerate += 1;
            0.0
        } else {
            sign * r_max / norm
        };
        for (p, r) in unit {
            raw.part_mut(p)[r].iter_mut().for_each(|x| *x *= factor);
        }
    }
    raw.degenerate = degenerate;
    raw
}

/// Graph nodes of one encoded triplet batch.
pub struct BatchForward {
    pub embedded: [Embedded; 3],
    pub encoded: [Var; 3],
    pub scores: BatchScores,
}

pub fn embed_batch(model: &EncoderModel, graph: &mut Graph, bound: &BoundParams, batch: &TripletBatch) -> Result<[Embedded; 3]> {
    Ok([
        model.embed_tokens(graph, bound, Tower::Query, &batch.queries)?,
        model.embed_tokens(graph, bound, Tower::Document, &batch.positives)?,
        model.embed_tokens(graph, bound, Tower::Document, &batch.negatives)?,
    ])
}

/// Encodes `(query, positive, negative)` token tensors and scores them.
pub fn encode_and_score(
    model: &EncoderModel,
    graph: &mut Graph,
    bound: &BoundParams,
    tokens: [Var; 3],
    embedded: &[Embedded; 3],
    k: usize,
    in_batch: bool,
) -> Result<([Var; 3], BatchScores)> {
    let q = model.encode_with(graph, bound, Tower::Query, tokens[0], &embedded[0].mask)?;
    let p = model.encode_with(graph, bound, Tower::Document, tokens[1], &embedded[1].mask)?;
    let n = model.encode_with(graph, bound, Tower::Document, tokens[2], &embedded[2].mask)?;
    let scores = batch_scores(graph, q, p, n, k, in_batch)?;
    Ok(([q, p, n], scores))
}

pub fn forward_batch(model: &EncoderModel, graph: &mut Graph, bound: &BoundParams, batch: &TripletBatch, loss: &LossConfig) -> Result<BatchForward> {
    let embedded = embed_batch(model, graph, bound, batch)?;
    let tokens = [embedded[0].var, embedded[1].var, embedded[2].var];
    let (encoded, scores) = encode_and_score(model, graph, bound, tokens, &embedded, batch.k, loss.in_batch_negatives)?;
    Ok(BatchForward {
        embedded,
        encoded,
        scores,
    })
}

/// Sum of FLOPS values of the query, positive and negative encodings
/// (sparse models only).
fn flops_term(model: &EncoderModel, graph: &mut Graph, encoded: &[Var; 3]) -> Result<Option<Var>> {
    if model.config.kind != EncoderKind::Sparse {
        return Ok(None);
    }
    let a = flops_value(graph, encoded[0])?;
    let b = flops_value(graph, encoded[1])?;
    let c = flops_value(graph, encoded[2])?;
    let ab = graph.add(a, b)?;
    Ok(Some(graph.add(ab, c)?))
}

/// Clean objective `L + weight * FLOPS` on a forward pass.
struct CleanTerms {
    ranking: Var,
    flops: Option<Var>,
    objective: Var,
}

fn clean_terms(model: &EncoderModel, graph: &mut Graph, fwd: &BatchForward, batch: &TripletBatch, loss: &LossConfig) -> Result<CleanTerms> {
    let ranking = ranking_loss(graph, &fwd.scores, loss, batch.teacher_margins.as_deref())?;
    let flops = flops_term(model, graph, &fwd.encoded)?;
    let objective = total_loss(graph, ranking, None, flops.map(|f| (f, loss.flops_weight)))?;
    Ok(CleanTerms { ranking, flops, objective })
}

/// Output of the FGSM gradient pass.
pub struct FgsmPass {
    pub perturbation: Perturbation,
    pub clean_loss: f64,
    pub flops: Option<f64>,
    /// Clean `[B, 1+K']` candidate scores.
    pub clean_scores: Tensor,
    bound: BoundParams,
    grads: Gradients,
}

impl FgsmPass {
    /// Adds the clean-pass parameter gradients into the model.
    pub fn accumulate_into(&self, model: &mut EncoderModel) -> Result<()> {
        model.params.accumulate(&self.bound, &self.grads)
    }
}

/// One forward + backward on the clean batch; returns the FGSM deltas
/// `sign * r_max * g / ||g||` per scope unit, with `g` the gradient of the
/// clean objective with respect to the token embeddings.
pub fn fgsm_perturbation(model: &EncoderModel, batch: &TripletBatch, loss: &LossConfig, cfg: &PerturbationConfig) -> Result<FgsmPass> {
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let fwd = forward_batch(model, &mut graph, &bound, batch, loss)?;
    let clean = clean_terms(model, &mut graph, &fwd, batch, loss)?;
    let grads = graph.backward(clean.objective)?;
    let grad_of = |e: &Embedded| {
        grads
            .wrt(e.var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; graph.value(e.var).len()])
    };
    let raw = Perturbation {
        query: grad_of(&fwd.embedded[0]),
        positive: grad_of(&fwd.embedded[1]),
        negative: grad_of(&fwd.embedded[2]),
        degenerate: 0,
    };
    let sign = match cfg.sign {
        SignConvention::Ascent => 1.0,
        SignConvention::Descent => -1.0,
    };
    let perturbation = normalize(raw, batch, model.config.dim, cfg.norm_scope, cfg.r_max, sign);
    Ok(FgsmPass {
        perturbation,
        clean_loss: graph.scalar_value(clean.ranking),
        flops: clean.flops.map(|f| graph.scalar_value(f)),
        clean_scores: graph.tensor(fwd.scores.all),
        bound,
        grads,
    })
}

/// Gaussian direction per scope unit, scaled to norm `r_max`; zero at pads.
pub fn eps_random_perturbation(batch: &TripletBatch, dim: usize, r_max: f64, scope: NormScope, rng: &mut impl Rng) -> Perturbation {
    let mut draw = |n: usize| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
    let raw = Perturbation {
        query: draw(batch.queries.ids.len() * dim),
        positive: draw(batch.positives.ids.len() * dim),
        negative: draw(batch.negatives.ids.len() * dim),
        degenerate: 0,
    };
    normalize(raw, batch, dim, scope, r_max, 1.0)
}

/// Independently replaces each real token, with probability `rate`, by a
/// uniform draw over the non-special ids `2..vocab_size`.
pub fn token_random_augment(batch: &TripletBatch, rate: f64, vocab_size: usize, rng: &mut impl Rng) -> TripletBatch {
    let mut out = batch.clone();
    for seqs in [&mut out.queries, &mut out.positives, &mut out.negatives] {
        for t in seqs.ids.iter_mut() {
            if *t != PAD && rng.random::<f64>() < rate {
                *t = rng.random_range(2..vocab_size as u32);
            }
        }
    }
    out
}

/// The shared universal perturbation `eps_all` (a `d`-vector).
#[derive(Clone, Debug, PartialEq)]
pub struct UniversalState {
    pub eps: Vec<f64>,
}

impl UniversalState {
    pub fn new(dim: usize) -> Self {
        Self { eps: vec![0.0; dim] }
    }

    pub fn norm(&self) -> f64 {
        self.eps.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `tokens + mask ⊗ eps`: adds `eps` to every real token embedding.
fn add_broadcast(graph: &mut Graph, emb: &Embedded, eps: Var, dim: usize) -> Result<Var> {
    let col = graph.constant(vec![emb.mask.len(), 1], emb.mask.clone())?;
    let row = graph.reshape(eps, vec![1, dim])?;
    let spread = graph.matmul(col, row)?;
    let spread = graph.reshape(spread, vec![emb.rows, emb.len, dim])?;
    graph.add(emb.var, spread)
}

/// Diagnostics of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub clean_loss: f64,
    pub adversarial_loss: Option<f64>,
    pub flops: Option<f64>,
    pub total_loss: f64,
    pub backward_passes: usize,
    pub degenerate: usize,
    pub universal_norm: Option<f64>,
}

/// Mutable state a strategy carries across steps.
#[derive(Clone, Debug)]
pub struct AdversaryState {
    pub universal: UniversalState,
    pub rng: ChaCha8Rng,
}

impl AdversaryState {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xad5e);
        Self {
            universal: UniversalState::new(dim),
            rng,
        }
    }
}

/// One universal-AT step: a single backward pass yields model gradients
/// (accumulated into `model`) and the ascent update of `eps_all`.
pub fn universal_step(
    state: &mut UniversalState,
    model: &mut EncoderModel,
    batch: &TripletBatch,
    loss: &LossConfig,
    cfg: &PerturbationConfig,
) -> Result<StepStats> {
    let dim = model.config.dim;
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let fwd = forward_batch(model, &mut graph, &bound, batch, loss)?;
    let clean = clean_terms(model, &mut graph, &fwd, batch, loss)?;
    let eps = graph.variable(vec![dim], state.eps.clone())?;
    let adv_tokens = [
        add_broadcast(&mut graph, &fwd.embedded[0], eps, dim)?,
        add_broadcast(&mut graph, &fwd.embedded[1], eps, dim)?,
        add_broadcast(&mut graph, &fwd.embedded[2], eps, dim)?,
    ];
    let (_, adv_scores) = encode_and_score(model, &mut graph, &bound, adv_tokens, &fwd.embedded, batch.k, loss.in_batch_negatives)?;
    let clean_all = graph.detach(fwd.scores.all);
    let adv = adversarial_loss(&mut graph, clean_all, &adv_scores, loss, batch.teacher_margins.as_deref())?;
    let total = total_loss(&mut graph, clean.objective, Some(adv), None)?;
    let grads = graph.backward(total)?;
    model.params.accumulate(&bound, &grads)?;
    if let Some(g) = grads.wrt(eps) {
        for (e, g) in state.eps.iter_mut().zip(g) {
            *e += cfg.universal_lr * g;
        }
    }
    if let Some(clip) = cfg.universal_clip {
        let n = state.norm();
        if n > clip {
            state.eps.iter_mut().for_each(|e| *e *= clip / n);
        }
    }
    Ok(StepStats {
        clean_loss: graph.scalar_value(clean.ranking),
        adversarial_loss: Some(graph.scalar_value(adv)),
        flops: clean.flops.map(|f| graph.scalar_value(f)),
        total_loss: graph.scalar_value(total),
        backward_passes: graph.backward_passes(),
        degenerate: 0,
        universal_norm: Some(state.norm()),
    })
}

/// Adversarial loss with fixed additive deltas on the token embeddings.
fn perturbed_loss(
    model: &EncoderModel,
    graph: &mut Graph,
    bound: &BoundParams,
    batch: &TripletBatch,
    loss: &LossConfig,
    delta: &Perturbation,
    clean_all: Var,
) -> Result<Var> {
    let embedded = embed_batch(model, graph, bound, batch)?;
    let mut tokens = [embedded[0].var; 3];
    for (i, d) in [&delta.query, &delta.positive, &delta.negative].into_iter().enumerate() {
        let c = graph.constant(graph.shape(embedded[i].var).to_vec(), d.clone())?;
        tokens[i] = graph.add(embedded[i].var, c)?;
    }
    let (_, scores) = encode_and_score(model, graph, bound, tokens, &embedded, batch.k, loss.in_batch_negatives)?;
    adversarial_loss(graph, clean_all, &scores, loss, batch.teacher_margins.as_deref())
}

/// Runs one training step of the configured strategy, accumulating
/// parameter gradients into `model`. The caller zeroes gradients before and
/// applies the optimizer after.
pub fn train_step(
    model: &mut EncoderModel,
    batch: &TripletBatch,
    loss: &LossConfig,
    cfg: &PerturbationConfig,
    state: &mut AdversaryState,
) -> Result<StepStats> {
    match cfg.strategy {
        Strategy::None => {
            let mut graph = Graph::new();
            let bound = model.bind(&mut graph);
            let fwd = forward_batch(model, &mut graph, &bound, batch, loss)?;
            let clean = clean_terms(model, &mut graph, &fwd, batch, loss)?;
            let grads = graph.backward(clean.objective)?;
            model.params.accumulate(&bound, &grads)?;
            Ok(StepStats {
                clean_loss: graph.scalar_value(clean.ranking),
                adversarial_loss: None,
                flops: clean.flops.map(|f| graph.scalar_value(f)),
                total_loss: graph.scalar_value(clean.objective),
                backward_passes: graph.backward_passes(),
                ..StepStats::default()
            })
        }
        Strategy::Fgsm => {
            let pass = fgsm_perturbation(model, batch, loss, cfg)?;
            pass.accumulate_into(model)?;
            let mut graph = Graph::new();
            let bound = model.bind(&mut graph);
            let clean_all = graph.input(&pass.clean_scores);
            let adv = perturbed_loss(model, &mut graph, &bound, batch, loss, &pass.perturbation, clean_all)?;
            let grads = graph.backward(adv)?;
            model.params.accumulate(&bound, &grads)?;
            let adv_value = graph.scalar_value(adv);
            let clean_objective = pass.clean_loss + pass.flops.map_or(0.0, |f| f * loss.flops_weight);
            Ok(StepStats {
                clean_loss: pass.clean_loss,
                adversarial_loss: Some(adv_value),
                flops: pass.flops,
                total_loss: clean_objective + adv_value,
                backward_passes: 1 + graph.backward_passes(),
                degenerate: pass.perturbation.degenerate,
                universal_norm: None,
            })
        }
        Strategy::Universal => universal_step(&mut state.universal, model, batch, loss, cfg),
        Strategy::EpsRandom | Strategy::TokenRandom => {
            let mut graph = Graph::new();
            let bound = model.bind(&mut graph);
            let fwd = forward_batch(model, &mut graph, &bound, batch, loss)?;
            let clean = clean_terms(model, &mut graph, &fwd, batch, loss)?;
            let clean_all = graph.detach(fwd.scores.all);
            let adv = if cfg.strategy == Strategy::EpsRandom {
                let delta = eps_random_perturbation(batch, model.config.dim, cfg.r_max, cfg.norm_scope, &mut state.rng);
                perturbed_loss(model, &mut graph, &bound, batch, loss, &delta, clean_all)?
            } else {
                let noisy = token_random_augment(batch, cfg.token_rate, model.config.vocab_size, &mut state.rng);
                let nf = forward_batch(model, &mut graph, &bound, &noisy, loss)?;
                adversarial_loss(&mut graph, clean_all, &nf.scores, loss, noisy.teacher_margins.as_deref())?
            };
            let total = total_loss(&mut graph, clean.objective, Some(adv), None)?;
            let grads = graph.backward(total)?;
            model.params.accumulate(&bound, &grads)?;
            Ok(StepStats {
                clean_loss: graph.scalar_value(clean.ranking),
                adversarial_loss: Some(graph.scalar_value(adv)),
                flops: clean.flops.map(|f| graph.scalar_value(f)),
                total_loss: graph.scalar_value(total),
                backward_passes: graph.backward_passes(),
                ..StepStats::default()
            })
        }
    }
}

/// Clean objective value of a batch, without gradients.
pub fn batch_loss(model: &EncoderModel, batch: &TripletBatch, loss: &LossConfig, delta: Option<&Perturbation>) -> Result<f64> {
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    match delta {
        None => {
            let fwd = forward_batch(model, &mut graph, &bound, batch, loss)?;
            let clean = clean_terms(model, &mut graph, &fwd, batch, loss)?;
            Ok(graph.scalar_value(clean.objective))
        }
        Some(d) => {
            // Clean scores are only read by the KL objective.
            let fwd = forward_batch(model, &mut graph, &bound, batch, loss)?;
            let clean_all = graph.detach(fwd.scores.all);
            let adv = perturbed_loss(model, &mut graph, &bound, batch, loss, d, clean_all)?;
            Ok(graph.scalar_value(adv))
        }
    }
}
