//! Acceptance suite: runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

#[path = "../common/mod.rs"]
mod common;
mod determinism;
mod properties;
mod reproduction;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (u32, &'static str, fn() -> Verdict);

fn gradients() -> Verdict {
    use common::gradients as g;
    let start = Instant::now();
    g::matmul_and_transpose();
    g::elementwise_binary();
    g::elementwise_unary();
    g::row_reductions();
    g::scalar_reductions();
    g::indexing_and_layout();
    g::masked_pools();
    g::kl_against_fixed_clean_scores();
    g::composite_chain();
    g::training_objectives_match_finite_differences();
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        secs < 60.0,
        format!("all ops and both encoders x three objectives within 1e-5, {secs:.1}s (limit 60s)"),
    )
}

fn losses() -> Verdict {
    use common::losses as l;
    l::infonce_matches_loops_with_and_without_in_batch();
    l::margin_mse_matches_loop();
    l::kl_matches_loop();
    l::analytic_cases();
    Verdict::new(true, "1000 random instances per loss within 1e-10; ln 2 and two-point KL within 1e-12")
}

fn metrics() -> Verdict {
    use common::metrics as m;
    m::five_query_fixture();
    m::ndcg_analytic();
    m::t_test_reference();
    Verdict::new(true, "5-query fixture exact, nDCG 1/log2(3), t-test within 1e-6 of reference")
}

fn run_one(f: fn() -> Verdict) -> Verdict {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Verdict::new(false, msg)
        }
    }
}

fn main() -> ExitCode {
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "gradient correctness", gradients),
        (2, "loss oracles", losses),
        (3, "fgsm construction", properties::fgsm_construction),
        (4, "cost accounting", properties::cost_accounting),
        (5, "universal ascent", properties::universal_ascent),
        (6, "metric oracles", metrics),
        (7, "robustness trend", reproduction::robustness_trend),
        (8, "domain-shift trend", reproduction::domain_shift_trend),
        (9, "baseline ordering", reproduction::baseline_ordering),
        (10, "pipeline determinism", determinism::pipeline_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = run_one(f);
        let mark = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {mark} {name} [{:.1}s]: {}", start.elapsed().as_secs_f64(), v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
