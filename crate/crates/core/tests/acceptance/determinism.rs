//! gen-corpus → train one epoch → evaluate, twice from scratch.

use std::fs;
use std::path::Path;

use advrank::harness::commands::{evaluate, gen_corpus, train};
use advrank::harness::RunConfig;
use advrank::metrics::EvalReport;
use advrank::text::SynthSpec;

use crate::Verdict;

fn pipeline(dir: &Path) -> (Vec<(String, Vec<u8>)>, EvalReport) {
    let corpus = dir.join("corpus");
    gen_corpus(&SynthSpec::default(), &corpus).unwrap();
    let run_json = corpus.join("run.json");
    let cfg = RunConfig::load(Some(&run_json), &["training.epochs=1".into()]).unwrap();
    train(&cfg, &dir.join("train")).unwrap();
    let ck = format!("paths.checkpoint={}", dir.join("train/best.ckpt").display());
    let cfg = RunConfig::load(Some(&run_json), &[ck]).unwrap();
    let mut report = evaluate(&cfg, &dir.join("eval")).unwrap();
    report.system = None;
    let mut files = Vec::new();
    for sub in ["corpus", "train", "eval"] {
        let mut entries: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            let name = format!("{sub}/{}", p.file_name().unwrap().to_string_lossy());
            // These two embed the run directory.
            if name == "train/config.json" || name == "eval/original.json" {
                continue;
            }
            files.push((name, fs::read(&p).unwrap()));
        }
    }
    (files, report)
}

pub fn pipeline_determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (files_a, report_a) = pipeline(a.path());
    let (files_b, report_b) = pipeline(b.path());
    let differing: Vec<&String> = files_a
        .iter()
        .zip(&files_b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| &x.0)
        .collect();
    let same = files_a.len() == files_b.len() && differing.is_empty() && report_a == report_b;
    Verdict::new(
        same,
        format!(
            "{} files byte-identical across two runs, reports equal: {}, mrr@10 {:.4}{}",
            files_a.len() - differing.len(),
            report_a == report_b,
            report_a.mean("mrr@10").unwrap_or(f64::NAN),
            if differing.is_empty() {
                String::new()
            } else {
                format!("; differing: {differing:?}")
            }
        ),
    )
}
