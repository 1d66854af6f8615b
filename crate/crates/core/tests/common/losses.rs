//! Naive-loop references for the ranking losses, shared by the loss tests
//! and the acceptance suite.

use advrank::losses::{batch_scores, infonce, kl_scores, margin_mse};
use advrank::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn naive_nll(pos: f64, negs: &[f64]) -> f64 {
    let mut denom = pos.exp();
    for n in negs {
        denom += n.exp();
    }
    -(pos.exp() / denom).ln()
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn infonce_matches_loops_with_and_without_in_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let (b, k, d) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
        let q = rows(&mut rng, b, d);
        let p = rows(&mut rng, b, d);
        let n = rows(&mut rng, b * k, d);
        for in_batch in [false, true] {
            let mut expected = 0.0;
            for i in 0..b {
                let mut negs = Vec::new();
                if in_batch {
                    for (j, pj) in p.iter().enumerate() {
                        if j != i {
                            negs.push(dot(&q[i], pj));
                        }
                    }
                    for nj in &n {
                        negs.push(dot(&q[i], nj));
                    }
                } else {
                    for nj in &n[i * k..(i + 1) * k] {
                        negs.push(dot(&q[i], nj));
                    }
                }
                expected += naive_nll(dot(&q[i], &p[i]), &negs) / b as f64;
            }
            let mut g = Graph::new();
            let flat = |r: &Vec<Vec<f64>>| r.concat();
            let qv = g.constant(vec![b, d], flat(&q)).unwrap();
            let pv = g.constant(vec![b, d], flat(&p)).unwrap();
            let nv = g.constant(vec![b * k, d], flat(&n)).unwrap();
            let s = batch_scores(&mut g, qv, pv, nv, k, in_batch).unwrap();
            let l = infonce(&mut g, s.pos, s.neg, false).unwrap();
            assert!(close(g.scalar_value(l), expected, 1e-10), "{} vs {expected}", g.scalar_value(l));
        }
    }
}

pub fn margin_mse_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..1000 {
        let (b, k) = (rng.random_range(1..6), rng.random_range(1..5));
        let student: Vec<f64> = (0..b * k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let teacher: Vec<f64> = (0..b * k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut expected = 0.0;
        for (s, t) in student.iter().zip(&teacher) {
            expected += (s - t) * (s - t);
        }
        expected /= (b * k) as f64;
        let mut g = Graph::new();
        let sv = g.constant(vec![b, k], student).unwrap();
        let l = margin_mse(&mut g, sv, Some(&teacher)).unwrap();
        assert!(close(g.scalar_value(l), expected, 1e-10));
    }
}

pub fn kl_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..1000 {
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..8));
        let clean: Vec<f64> = (0..b * c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let pert: Vec<f64> = (0..b * c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut expected = 0.0;
        for i in 0..b {
            let zp: f64 = clean[i * c..(i + 1) * c].iter().map(|x| x.exp()).sum();
            let zq: f64 = pert[i * c..(i + 1) * c].iter().map(|x| x.exp()).sum();
            for j in 0..c {
                let p = clean[i * c + j].exp() / zp;
                let q = pert[i * c + j].exp() / zq;
                expected += p * (p / q).ln() / b as f64;
            }
        }
        let mut g = Graph::new();
        let cv = g.constant(vec![b, c], clean).unwrap();
        let pv = g.constant(vec![b, c], pert).unwrap();
        let l = kl_scores(&mut g, cv, pv).unwrap();
        assert!(close(g.scalar_value(l), expected, 1e-10));
    }
}

/// `-log(1/2)` for one positive tied with one negative, and KL between the
/// two-point distributions (1/2, 1/2) and (3/4, 1/4).
pub fn analytic_cases() {
    let mut g = Graph::new();
    let p = g.constant(vec![1], vec![0.0]).unwrap();
    let n = g.constant(vec![1, 1], vec![0.0]).unwrap();
    let l = infonce(&mut g, p, n, false).unwrap();
    assert!((g.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-12);
    let clean = g.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let pert = g.constant(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap();
    let l = kl_scores(&mut g, clean, pert).unwrap();
    let want = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    assert!((g.scalar_value(l) - want).abs() < 1e-12);
}
