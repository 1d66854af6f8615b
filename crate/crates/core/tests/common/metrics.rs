//! Hand-enumerated metric fixtures and the t-test reference values.

use advrank::metrics::{mrr_at_k, ndcg_at_k, paired_t_test, recall_at_k, RankedList};
use advrank::text::Qrels;

fn ranked(query: u64, docs: impl IntoIterator<Item = u64>) -> RankedList {
    RankedList {
        query,
        docs: docs.into_iter().enumerate().map(|(i, d)| (d, 100.0 - i as f64)).collect(),
    }
}

fn qrels(rows: &[(u64, u64, u32)]) -> Qrels {
    let mut q = Qrels::new();
    for &(a, b, g) in rows {
        q.entry(a).or_default().insert(b, g);
    }
    q
}

/// Five queries; query `q` ranks documents `10q .. 10q + 11` in order.
/// q1 hit at rank 3; q2 hits at ranks 1 and 5; q3 hit at rank 12;
/// q4 grades 1 and 2 at ranks 1 and 2; q5 hit at rank 10.
pub fn five_query_fixture() {
    let runs: Vec<RankedList> = (1..=5u64).map(|q| ranked(q, (0..12).map(|i| q * 10 + i))).collect();
    let judged = qrels(&[(1, 12, 1), (2, 20, 1), (2, 24, 1), (3, 41, 1), (4, 40, 1), (4, 41, 2), (5, 59, 1)]);

    let mrr = mrr_at_k(&runs, &judged, 10).unwrap();
    let want = [1.0 / 3.0, 1.0, 0.0, 1.0, 1.0 / 10.0];
    for (q, w) in (1..=5u64).zip(want) {
        assert_eq!(mrr.per_query[&q], w, "mrr q{q}");
    }
    assert!((mrr.mean - 73.0 / 150.0).abs() <= 1e-15, "{}", mrr.mean);

    let r3 = recall_at_k(&runs, &judged, 3).unwrap();
    for (q, w) in (1..=5u64).zip([1.0, 0.5, 0.0, 1.0, 0.0]) {
        assert_eq!(r3.per_query[&q], w, "recall@3 q{q}");
    }
    assert_eq!(r3.mean, 0.5);
    assert_eq!(recall_at_k(&runs, &judged, 1000).unwrap().mean, 1.0);

    let ndcg = ndcg_at_k(&runs, &judged, 10).unwrap();
    let l2 = |x: f64| x.log2();
    let want = [
        1.0 / l2(4.0),
        (1.0 + 1.0 / l2(6.0)) / (1.0 + 1.0 / l2(3.0)),
        0.0,
        (1.0 + 3.0 / l2(3.0)) / (3.0 + 1.0 / l2(3.0)),
        1.0 / l2(11.0),
    ];
    for (q, w) in (1..=5u64).zip(want) {
        assert!((ndcg.per_query[&q] - w).abs() <= 1e-15, "ndcg q{q}: {} vs {w}", ndcg.per_query[&q]);
    }
    assert!((ndcg.mean - want.iter().sum::<f64>() / 5.0).abs() <= 1e-15);
}

/// One relevant document at rank 2: nDCG = 1 / log2(3).
pub fn ndcg_analytic() {
    let v = ndcg_at_k(&[ranked(1, [4, 5])], &qrels(&[(1, 5, 1)]), 10).unwrap().mean;
    assert!((v - 0.63093).abs() < 1e-5, "{v}");
    assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
}

/// Two-sided p-values from the regularized incomplete beta function
/// evaluated at 40 significant digits.
pub fn t_test_reference() {
    let cases: [([f64; 10], [f64; 10], f64, f64); 3] = [
        (
            [0.4524, 0.5598, 0.9242, 0.4657, 0.5078, 0.5874, 0.1847, 0.5119, 0.6299, 0.793],
            [0.523, 0.6072, 1.0776, 0.5639, 0.4976, 0.56, 0.4418, 0.483, 0.5514, 0.6792],
            -1.0347359783964186,
            0.32779400930996164,
        ),
        (
            [0.1575, 0.015, 0.5284, 0.0596, 0.1902, 0.2419, 0.0301, 0.4639, 0.4405, 0.8424],
            [0.0655, 0.0479, 0.431, 0.1098, 0.1623, 0.3133, 0.4101, 0.509, 0.5747, 0.7601],
            -0.92236873395123437,
            0.38039847111813593,
        ),
        (
            [0.3153, 0.2297, 0.289, 0.0702, 0.7663, 0.4004, 0.8466, 0.3865, 0.958, 0.8473],
            [0.4839, 0.3299, 0.4842, 0.11, 0.9662, 0.488, 1.0729, 0.5489, 1.0721, 0.8693],
            -5.9751996079641997,
            0.00020876135780066992,
        ),
    ];
    for (a, b, t, p) in cases {
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t - t).abs() < 1e-6, "t {} vs {t}", r.t);
        assert!((r.p - p).abs() < 1e-6, "p {} vs {p}", r.p);
    }
}
