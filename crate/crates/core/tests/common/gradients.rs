//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance suite.

use advrank::adversarial::{batch_loss, fgsm_perturbation, train_step, AdversaryState, NormScope, PerturbationConfig, Strategy};
use advrank::encoders::{EncoderKind, EncoderModel, ModelConfig};
use advrank::losses::{kl_scores, LossConfig, Objective};
use advrank::text::{Corpus, TripletBatch};
use advrank::{Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;
const TRIALS: u64 = 100;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Values bounded away from zero so kinks stay out of the difference stencil.
fn draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(0.05..1.5);
            if rng.random::<bool>() {
                x
            } else {
                -x
            }
        })
        .collect()
}

/// Compares analytic and central-difference gradients of
/// `sum(build(inputs) * weights)` for every input element.
fn check<F>(name: &str, inputs: &[(Vec<usize>, Vec<f64>)], rng: &mut ChaCha8Rng, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Vec<f64>], weights: Option<&[f64]>| -> (Graph, Var, Vec<Var>, usize) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(vals)
            .map(|((s, _), v)| g.variable(s.clone(), v.clone()).unwrap())
            .collect();
        let out = build(&mut g, &vars);
        let n = g.value(out).len();
        let w = weights.map(<[f64]>::to_vec).unwrap_or_else(|| vec![1.0; n]);
        let wv = g.constant(g.shape(out).to_vec(), w).unwrap();
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        (g, loss, vars, n)
    };
    let value = |vals: &[Vec<f64>], w: &[f64]| {
        let (g, loss, _, _) = eval(vals, Some(w));
        g.scalar_value(loss)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let n_out = eval(&base, None).3;
    let weights = draw(rng, n_out);
    let (mut g, loss, vars, _) = eval(&base, Some(&weights));
    let grads = g.backward(loss).unwrap();
    for (i, (_, v)) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
        for j in 0..v.len() {
            let mut up = base.clone();
            up[i][j] += STEP;
            let mut down = base.clone();
            down[i][j] -= STEP;
            let numeric = (value(&up, &weights) - value(&down, &weights)) / (2.0 * STEP);
            let e = rel_err(analytic[j], numeric);
            assert!(e < TOL, "{name}: input {i}[{j}] analytic {} numeric {numeric} (err {e})", analytic[j]);
        }
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4))
}

fn each_trial(f: impl Fn(&mut ChaCha8Rng)) {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(&mut rng);
    }
}

pub fn matmul_and_transpose() {
    each_trial(|rng| {
        let (m, k, n) = dims(rng);
        let b = rng.random_range(1..3);
        let a = (vec![b, m, k], draw(rng, b * m * k));
        let w = (vec![k, n], draw(rng, k * n));
        check("matmul", &[a, w], rng, |g, v| g.matmul(v[0], v[1]).unwrap());
        let t = (vec![m, k], draw(rng, m * k));
        check("transpose", &[t], rng, |g, v| g.transpose(v[0]).unwrap());
    });
}

pub fn elementwise_binary() {
    each_trial(|rng| {
        let (m, n, _) = dims(rng);
        let a = (vec![m, n], draw(rng, m * n));
        let b = (vec![m, n], draw(rng, m * n));
        check("add", &[a.clone(), b.clone()], rng, |g, v| g.add(v[0], v[1]).unwrap());
        check("sub", &[a.clone(), b.clone()], rng, |g, v| g.sub(v[0], v[1]).unwrap());
        check("mul", &[a.clone(), b.clone()], rng, |g, v| g.mul(v[0], v[1]).unwrap());
        check("mul_self", &[a.clone()], rng, |g, v| g.mul(v[0], v[0]).unwrap());
        let row = (vec![n], draw(rng, n));
        check("add_row", &[a, row], rng, |g, v| g.add_row(v[0], v[1]).unwrap());
    });
}

pub fn elementwise_unary() {
    each_trial(|rng| {
        let (m, n, _) = dims(rng);
        let a = (vec![m, n], draw(rng, m * n));
        let c: f64 = rng.random_range(-2.0..2.0);
        check("scale", &[a.clone()], rng, |g, v| g.scale(v[0], c));
        check("relu", &[a.clone()], rng, |g, v| g.relu(v[0]));
        check("exp", &[a.clone()], rng, |g, v| g.exp(v[0]));
        let pos = (vec![m, n], a.1.iter().map(|x| x.abs()).collect());
        check("log1p", &[pos], rng, |g, v| g.log1p(v[0]));
    });
}

pub fn row_reductions() {
    each_trial(|rng| {
        let (m, n, b) = dims(rng);
        let a = (vec![b, m, n + 1], draw(rng, b * m * (n + 1)));
        check("softmax_rows", &[a.clone()], rng, |g, v| g.softmax_rows(v[0]));
        check("log_softmax_rows", &[a.clone()], rng, |g, v| g.log_softmax_rows(v[0]));
        check("mean_rows", &[a.clone()], rng, |g, v| g.mean_rows(v[0]));
        check("sum_rows", &[a.clone()], rng, |g, v| g.sum_rows(v[0]));
        check("max_rows", &[a.clone()], rng, |g, v| g.max_rows(v[0]));
        let other = (vec![b, m, n + 1], draw(rng, b * m * (n + 1)));
        check("dot_rows", &[a, other], rng, |g, v| g.dot_rows(v[0], v[1]).unwrap());
    });
}

pub fn scalar_reductions() {
    each_trial(|rng| {
        let (m, n, _) = dims(rng);
        let a = (vec![m, n], draw(rng, m * n));
        check("l2_norm", &[a.clone()], rng, |g, v| g.l2_norm(v[0]));
        check("sum", &[a.clone()], rng, |g, v| g.sum(v[0]));
        check("mean", &[a], rng, |g, v| g.mean(v[0]));
    });
}

pub fn indexing_and_layout() {
    each_trial(|rng| {
        let (m, n, b) = dims(rng);
        let table = (vec![m, n], draw(rng, m * n));
        let idx: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..m)).collect();
        check("gather_rows", &[table.clone()], rng, |g, v| g.gather_rows(v[0], &idx).unwrap());
        let picks: Vec<usize> = (0..4).map(|_| rng.random_range(0..m * n)).collect();
        check("take", &[table.clone()], rng, |g, v| g.take(v[0], picks.clone(), vec![2, 2]).unwrap());
        check("reshape", &[table.clone()], rng, |g, v| g.reshape(v[0], vec![n, m]).unwrap());
        let other = (vec![m, b], draw(rng, m * b));
        check("concat_cols", &[table, other], rng, |g, v| g.concat_cols(&[v[0], v[1]]).unwrap());
    });
}

pub fn masked_pools() {
    each_trial(|rng| {
        let (b, l, d) = dims(rng);
        let x = (vec![b, l, d], draw(rng, b * l * d));
        let mask: Vec<f64> = (0..b * l).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
        check("masked_mean_pool", &[x.clone()], rng, |g, v| g.masked_mean_pool(v[0], &mask).unwrap());
        check("masked_max_pool", &[x], rng, |g, v| g.masked_max_pool(v[0], &mask).unwrap());
    });
}

pub fn kl_against_fixed_clean_scores() {
    each_trial(|rng| {
        let (b, c, _) = dims(rng);
        let clean = draw(rng, b * (c + 1));
        let pert = (vec![b, c + 1], draw(rng, b * (c + 1)));
        check("kl_scores", &[pert], rng, |g, v| {
            let fixed = g.constant(vec![b, c + 1], clean.clone()).unwrap();
            kl_scores(g, fixed, v[0]).unwrap()
        });
    });
}

pub fn composite_chain() {
    each_trial(|rng| {
        let (m, k, n) = dims(rng);
        let a = (vec![m, k], draw(rng, m * k));
        let w = (vec![k, n], draw(rng, k * n));
        check("chain", &[a, w], rng, |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let r = g.relu(h);
            let l = g.log1p(r);
            let s = g.log_softmax_rows(l);
            g.mean(s)
        });
    });
}

fn fixture() -> Corpus {
    let mut c = Corpus::default();
    let docs: [&[u32]; 6] = [&[2, 3, 4, 5], &[6, 7, 8], &[9, 10, 11, 2], &[3, 4, 5], &[6, 11], &[7, 8, 9, 10]];
    for (i, d) in docs.iter().enumerate() {
        c.documents.insert(10 + i as u64, d.to_vec());
    }
    c.queries.insert(1, vec![2, 3]);
    c.queries.insert(2, vec![9, 11, 8]);
    c.queries.insert(3, vec![6]);
    c
}

fn fixture_batch(teacher: bool) -> TripletBatch {
    let trips = vec![(1, 10, vec![11, 13]), (2, 12, vec![14, 15]), (3, 14, vec![10, 11])];
    let margins = teacher.then(|| vec![0.5, -0.2, 1.0, 0.3, 0.0, 2.0]);
    TripletBatch::from_parts(&fixture(), &trips, margins).unwrap()
}

/// End-to-end: parameter gradients of the training objective (including the
/// FLOPS term for sparse models) against central differences. With FGSM the
/// objective is the clean loss plus the loss under the FGSM delta, which is
/// held fixed at its value for the unperturbed weights. The KL term reads
/// detached clean scores, so it is checked at op level instead.
pub fn training_objectives_match_finite_differences() {
    for kind in [EncoderKind::Dense, EncoderKind::Sparse] {
        for objective in [Objective::Infonce, Objective::MarginMse, Objective::KlScores] {
            for strategy in [Strategy::None, Strategy::Fgsm] {
                if objective == Objective::KlScores && strategy == Strategy::Fgsm {
                    continue;
                }
                for layers in [0, 2] {
                    objective_gradients(kind, objective, strategy, layers);
                }
            }
        }
    }
}

fn objective_gradients(kind: EncoderKind, objective: Objective, strategy: Strategy, layers: usize) {
    let cfg = ModelConfig {
        kind,
        vocab_size: 12,
        dim: 4,
        layers,
        init_std: 0.5,
        layer_init_std: 0.3,
        ..ModelConfig::default()
    };
    let mut model = EncoderModel::new(cfg, 17).unwrap();
    let loss = LossConfig {
        objective,
        flops_weight: 0.1,
        ..LossConfig::default()
    };
    let perturbation = PerturbationConfig {
        strategy,
        r_max: 0.3,
        norm_scope: NormScope::PerPart,
        ..PerturbationConfig::default()
    };
    let batch = fixture_batch(objective == Objective::MarginMse);
    let delta = (strategy == Strategy::Fgsm).then(|| fgsm_perturbation(&model, &batch, &loss, &perturbation).unwrap().perturbation);
    let mut state = AdversaryState::new(4, 0);
    model.params.zero_grads();
    train_step(&mut model, &batch, &loss, &perturbation, &mut state).unwrap();
    let objective_at = |m: &EncoderModel| {
        let clean = batch_loss(m, &batch, &loss, None).unwrap();
        clean + delta.as_ref().map_or(0.0, |d| batch_loss(m, &batch, &loss, Some(d)).unwrap())
    };
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let base = objective_at(&model);
    let (mut checked, mut kinks) = (0, 0);
    for name in names {
        let analytic = model.params.get(&name).unwrap().grad().unwrap().to_vec();
        for j in 0..analytic.len() {
            let at = |delta: f64| {
                let mut m = model.clone();
                m.params.get_mut(&name).unwrap().data_mut()[j] += delta;
                objective_at(&m)
            };
            let (up, down) = (at(STEP), at(-STEP));
            let numeric = (up - down) / (2.0 * STEP);
            // A relu input sitting exactly at zero (e.g. a token whose
            // hidden layer is fully inactive) has no derivative there.
            // Smooth curvature makes the one-sided gap shrink with the
            // step; a kink keeps it fixed.
            let gap = |h: f64| (at(h) - base) / h - (base - at(-h)) / h;
            let (near, far) = (gap(STEP), gap(10.0 * STEP));
            if near.abs() > 1e-7 && far.abs() < 3.0 * near.abs() {
                kinks += 1;
                continue;
            }
            checked += 1;
            let e = rel_err(analytic[j], numeric);
            assert!(
                e < TOL,
                "{kind:?}/{objective:?}/{strategy:?}/{layers}: {name}[{j}] analytic {} numeric {numeric}",
                analytic[j]
            );
        }
    }
    assert!(kinks * 5 <= checked, "{kinks} kinks vs {checked} checked");
}

pub fn backward_is_deterministic_and_accumulates() {
    let cfg = ModelConfig {
        kind: EncoderKind::Sparse,
        vocab_size: 12,
        dim: 4,
        ..ModelConfig::default()
    };
    let batch = fixture_batch(false);
    let loss = LossConfig::default();
    let plain = PerturbationConfig::default();
    let run = |times: usize| {
        let mut model = EncoderModel::new(cfg.clone(), 3).unwrap();
        let mut state = AdversaryState::new(4, 0);
        model.params.zero_grads();
        for _ in 0..times {
            train_step(&mut model, &batch, &loss, &plain, &mut state).unwrap();
        }
        model
            .params
            .iter()
            .flat_map(|(_, t)| t.grad().unwrap().to_vec())
            .collect::<Vec<f64>>()
    };
    let once = run(1);
    assert_eq!(once, run(1));
    let twice = run(2);
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
}
