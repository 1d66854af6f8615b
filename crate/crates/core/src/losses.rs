//! Ranking objectives: InfoNCE, margin-MSE distillation, KL on score
//! distributions, and the clean + adversarial composition.

use serde::{Deserialize, Serialize};

use crate::encoders::score;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// InfoNCE for both the clean and the adversarial term.
    Infonce,
    /// Margin-MSE against teacher margins for both terms.
    MarginMse,
    /// InfoNCE on clean scores; the adversarial term is
    /// `KL(softmax(clean) || softmax(perturbed))`.
    KlScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub objective: Objective,
    /// Other queries' positives and negatives join each query's negatives.
    pub in_batch_negatives: bool,
    /// FLOPS regularisation weight (sparse encoders only).
    pub flops_weight: f64,
    /// Use `-softmax(s+)` instead of `-log softmax(s+)`.
    pub raw_softmax_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Infonce,
            in_batch_negatives: true,
            flops_weight: 1e-3,
            raw_softmax_loss: false,
        }
    }
}

/// Candidate scores of a triplet batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchScores {
    /// `s(q_i, d_i+)`, shape `[B]`.
    pub pos: Var,
    /// Every negative of each query, `[B, K']`.
    pub neg: Var,
    /// The query's own `K` negatives, `[B, K]`.
    pub own_neg: Var,
    /// `[pos | neg]`, `[B, 1 + K']`.
    pub all: Var,
}

/// Effective negatives per query: `K`, or `K + (B-1)(1+K)` with in-batch
/// negatives.
pub fn effective_negatives(b: usize, k: usize, in_batch: bool) -> usize {
    if in_batch {
        k + (b - 1) * (1 + k)
    } else {
        k
    }
}

/// Scores queries `[B, D]` against positives `[B, D]` and negatives
/// `[B*K, D]` (row-major by query).
pub fn batch_scores(graph: &mut Graph, q: Var, pos: Var, neg: Var, k: usize, in_batch: bool) -> Result<BatchScores> {
    let b = graph.shape(q)[0];
    if graph.shape(pos)[0] != b || graph.shape(neg)[0] != b * k {
        return Err(Error::shape("batch_scores", graph.shape(q), graph.shape(neg)));
    }
    let sp = score(graph, q, pos)?;
    let sn = score(graph, q, neg)?;
    let width = b + b * k;
    let full = graph.concat_cols(&[sp, sn])?;
    let pos_idx: Vec<usize> = (0..b).map(|i| i * width + i).collect();
    let pos_s = graph.take(full, pos_idx, vec![b])?;
    let own_idx: Vec<usize> = (0..b).flat_map(|i| (0..k).map(move |j| i * width + b + i * k + j)).collect();
    let own = graph.take(full, own_idx, vec![b, k])?;
    let neg_s = if in_batch {
        let idx: Vec<usize> = (0..b)
            .flat_map(|i| (0..width).filter(move |&c| c != i).map(move |c| i * width + c))
            .collect();
        graph.take(full, idx, vec![b, width - 1])?
    } else {
        own
    };
    let pos_col = graph.reshape(pos_s, vec![b, 1])?;
    let all = graph.concat_cols(&[pos_col, neg_s])?;
    Ok(BatchScores {
        pos: pos_s,
        neg: neg_s,
        own_neg: own,
        all,
    })
}

fn check_finite(graph: &Graph, v: Var) -> Result<()> {
    let cols = graph.shape(v).last().copied().unwrap_or(1).max(1);
    match graph.value(v).iter().position(|x| !x.is_finite()) {
        Some(i) if graph.shape(v).len() > 1 => Err(Error::NonFinite { row: i / cols }),
        Some(i) => Err(Error::NonFinite { row: i }),
        None => Ok(()),
    }
}

/// Batch mean of `-log(e^{s+} / (e^{s+} + sum_j e^{s-_j}))`, or of the raw
/// `-softmax` form when `raw` is set.
pub fn infonce(graph: &mut Graph, pos: Var, neg: Var, raw: bool) -> Result<Var> {
    check_finite(graph, pos)?;
    check_finite(graph, neg)?;
    let b = graph.shape(pos).iter().product::<usize>();
    let ns = graph.shape(neg).to_vec();
    if ns.len() != 2 || ns[0] != b {
        return Err(Error::shape("infonce", &[b], &ns));
    }
    let pos_col = graph.reshape(pos, vec![b, 1])?;
    let all = graph.concat_cols(&[pos_col, neg])?;
    let width = ns[1] + 1;
    let first: Vec<usize> = (0..b).map(|i| i * width).collect();
    let per_row = if raw {
        let p = graph.softmax_rows(all);
        graph.take(p, first, vec![b])?
    } else {
        let lp = graph.log_softmax_rows(all);
        graph.take(lp, first, vec![b])?
    };
    let m = graph.mean(per_row);
    Ok(graph.scale(m, -1.0))
}

/// Mean squared error between student and teacher margins.
pub fn margin_mse(graph: &mut Graph, student: Var, teacher: Option<&[f64]>) -> Result<Var> {
    let teacher = teacher.ok_or_else(|| Error::invalid("margin_mse needs teacher margins"))?;
    if teacher.len() != graph.value(student).len() {
        return Err(Error::shape("margin_mse", graph.shape(student), &[teacher.len()]));
    }
    if teacher.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("non-finite teacher margin"));
    }
    let t = graph.constant(graph.shape(student).to_vec(), teacher.to_vec())?;
    let diff = graph.sub(student, t)?;
    let sq = graph.mul(diff, diff)?;
    Ok(graph.mean(sq))
}

/// Student margins `s(q, d+) - s(q, d-_j)` over the own negatives, `[B, K]`.
pub fn student_margins(graph: &mut Graph, scores: &BatchScores) -> Result<Var> {
    let s = graph.shape(scores.own_neg).to_vec();
    let (b, k) = (s[0], s[1]);
    let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let pos = graph.take(scores.pos, rep, vec![b, k])?;
    graph.sub(pos, scores.own_neg)
}

/// Batch mean of `KL(softmax(clean) || softmax(perturbed))`.
pub fn kl_scores(graph: &mut Graph, clean: Var, perturbed: Var) -> Result<Var> {
    if graph.shape(clean) != graph.shape(perturbed) || graph.shape(clean).len() != 2 {
        return Err(Error::shape("kl_scores", graph.shape(clean), graph.shape(perturbed)));
    }
    let rows = graph.shape(clean)[0];
    let lp = graph.log_softmax_rows(clean);
    let lq = graph.log_softmax_rows(perturbed);
    let p = graph.exp(lp);
    let diff = graph.sub(lp, lq)?;
    let terms = graph.mul(p, diff)?;
    let per_row = graph.sum_rows(terms);
    let total = graph.sum(per_row);
    Ok(graph.scale(total, 1.0 / rows as f64))
}

/// `L_clean + L_adv + weight * FLOPS`, skipping absent terms.
pub fn total_loss(graph: &mut Graph, clean: Var, adversarial: Option<Var>, flops: Option<(Var, f64)>) -> Result<Var> {
    let mut total = clean;
    if let Some(adv) = adversarial {
        total = graph.add(total, adv)?;
    }
    if let Some((f, w)) = flops {
        if w != 0.0 {
            let scaled = graph.scale(f, w);
            total = graph.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// The objective's ranking loss on one set of scores.
pub fn ranking_loss(graph: &mut Graph, scores: &BatchScores, cfg: &LossConfig, teacher: Option<&[f64]>) -> Result<Var> {
    match cfg.objective {
        Objective::Infonce | Objective::KlScores => infonce(graph, scores.pos, scores.neg, cfg.raw_softmax_loss),
        Objective::MarginMse => {
            let m = student_margins(graph, scores)?;
            margin_mse(graph, m, teacher)
        }
    }
}

/// Adversarial term on perturbed scores. `clean_all` holds the clean
/// `[B, 1+K']` candidate scores as a constant (used by the KL objective).
pub fn adversarial_loss(
    graph: &mut Graph,
    clean_all: Var,
    perturbed: &BatchScores,
    cfg: &LossConfig,
    teacher: Option<&[f64]>,
) -> Result<Var> {
    match cfg.objective {
        Objective::KlScores => kl_scores(graph, clean_all, perturbed.all),
        _ => ranking_loss(graph, perturbed, cfg, teacher),
    }
}
