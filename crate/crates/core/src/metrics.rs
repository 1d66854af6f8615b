//! Exhaustive ranking, MRR@k / Recall@k / nDCG@k, paired t-tests and the
//! JSON report and TREC run formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::encoders::{EncoderModel, Tower};
use crate::error::{Error, Result};
use crate::text::Qrels;

pub const MRR_AT_10: &str = "mrr@10";
pub const RECALL_AT_1000: &str = "recall@1000";
pub const NDCG_AT_10: &str = "ndcg@10";

/// Documents ranked for one query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query: u64,
    pub docs: Vec<(u64, f64)>,
}

/// Top `cutoff` of `(doc id, score)` pairs: descending score, ties by
/// ascending doc id.
pub fn top_k(mut scored: Vec<(u64, f64)>, cutoff: usize) -> Vec<(u64, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(cutoff);
    scored
}

/// Encodes every document and query and ranks the whole collection by dot
/// product.
pub fn rank_all(
    model: &EncoderModel,
    documents: &BTreeMap<u64, Vec<u32>>,
    queries: &BTreeMap<u64, Vec<u32>>,
    cutoff: usize,
) -> Result<Vec<RankedList>> {
    if documents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let doc_ids: Vec<u64> = documents.keys().copied().collect();
    let doc_seqs: Vec<&[u32]> = documents.values().map(Vec::as_slice).collect();
    let doc_vecs = model.encode_texts(Tower::Document, &doc_seqs, 256)?;
    let q_seqs: Vec<&[u32]> = queries.values().map(Vec::as_slice).collect();
    let q_vecs = model.encode_texts(Tower::Query, &q_seqs, 256)?;
    Ok(queries
        .keys()
        .zip(&q_vecs)
        .map(|(&qid, q)| {
            let scored = doc_ids
                .iter()
                .zip(&doc_vecs)
                .map(|(&d, v)| (d, q.iter().zip(v).map(|(a, b)| a * b).sum()))
                .collect();
            RankedList {
                query: qid,
                docs: top_k(scored, cutoff),
            }
        })
        .collect())
}

/// Per-query values of one metric over the judged queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mean: f64,
    pub n: usize,
    /// Queries left out for lack of relevant judgments.
    #[serde(default)]
    pub excluded: usize,
    #[serde(with = "query_keys")]
    pub per_query: BTreeMap<u64, f64>,
}

/// Query ids as JSON object keys (strings), which also survives the
/// buffering done by `#[serde(flatten)]`.
mod query_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<u64, f64>, s: S) -> Result<S::Ok, S::Error> {
        let keyed: BTreeMap<String, f64> = map.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        keyed.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u64, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(D::Error::custom))
            .collect()
    }
}

impl MetricValues {
    fn from_map(per_query: BTreeMap<u64, f64>, excluded: usize) -> Result<Self> {
        if per_query.is_empty() {
            return Err(Error::NoJudgedQueries);
        }
        let n = per_query.len();
        let mean = per_query.values().sum::<f64>() / n as f64;
        Ok(Self {
            mean,
            n,
            excluded,
            per_query,
        })
    }
}

fn grades<'q>(qrels: &'q Qrels, query: u64) -> Option<&'q BTreeMap<u64, u32>> {
    qrels.get(&query).filter(|g| g.values().any(|&x| x >= 1))
}

fn per_query(runs: &[RankedList], qrels: &Qrels, f: impl Fn(&RankedList, &BTreeMap<u64, u32>) -> f64) -> Result<MetricValues> {
    let mut out = BTreeMap::new();
    let mut excluded = 0;
    for run in runs {
        match grades(qrels, run.query) {
            Some(g) => {
                out.insert(run.query, f(run, g));
            }
            None => excluded += 1,
        }
    }
    MetricValues::from_map(out, excluded)
}

pub fn mrr_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Result<MetricValues> {
    per_query(runs, qrels, |run, g| {
        run.docs
            .iter()
            .take(k)
            .position(|(d, _)| g.get(d).is_some_and(|&x| x >= 1))
            .map_or(0.0, |r| 1.0 / (r + 1) as f64)
    })
}

pub fn recall_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Result<MetricValues> {
    per_query(runs, qrels, |run, g| {
        let relevant = g.values().filter(|&&x| x >= 1).count();
        let found = run.docs.iter().take(k).filter(|(d, _)| g.get(d).is_some_and(|&x| x >= 1)).count();
        found as f64 / relevant as f64
    })
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

pub fn ndcg_at_k(runs: &[RankedList], qrels: &Qrels, k: usize) -> Result<MetricValues> {
    per_query(runs, qrels, |run, g| {
        let dcg: f64 = run
            .docs
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, (d, _))| gain(g.get(d).copied().unwrap_or(0)) / ((r + 2) as f64).log2())
            .sum();
        let mut ideal: Vec<u32> = g.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, &x)| gain(x) / ((r + 2) as f64).log2())
            .sum();
        dcg / idcg
    })
}

/// Two-sided paired t-test on per-query differences `a - b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub n: usize,
    pub significant: bool,
    /// Nonzero mean difference with zero variance (`t` saturates at `±f64::MAX`).
    #[serde(default)]
    pub degenerate_variance: bool,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired t-test on {} vs {} values", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let (t, p, degenerate) = if diffs.iter().all(|&d| d == 0.0) {
        (0.0, 1.0, false)
    } else if var == 0.0 {
        // Saturated rather than infinite so the report stays valid JSON.
        (mean.signum() * f64::MAX, 0.0, true)
    } else {
        let t = mean / (var / n as f64).sqrt();
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("n >= 2 gives positive dof");
        (t, (2.0 * dist.sf(t.abs())).min(1.0), false)
    };
    Ok(TTest {
        t,
        p,
        n,
        significant: p < 0.05,
        degenerate_variance: degenerate,
    })
}

/// Pairs two metric tables on their shared query ids.
pub fn paired_test(a: &MetricValues, b: &MetricValues) -> Result<TTest> {
    if a.per_query.len() != b.per_query.len() || a.per_query.keys().any(|q| !b.per_query.contains_key(q)) {
        return Err(Error::invalid("per-query values are not aligned on the same query ids"));
    }
    let xs: Vec<f64> = a.per_query.values().copied().collect();
    let ys: Vec<f64> = b.per_query.values().copied().collect();
    paired_t_test(&xs, &ys)
}

/// Metric tables of one system, with optional significance against a
/// baseline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_test: Option<BTreeMap<String, TTest>>,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, MetricValues>,
}

impl EvalReport {
    pub fn from_runs(runs: &[RankedList], qrels: &Qrels) -> Result<Self> {
        let mut metrics = BTreeMap::new();
        metrics.insert(MRR_AT_10.to_string(), mrr_at_k(runs, qrels, 10)?);
        metrics.insert(RECALL_AT_1000.to_string(), recall_at_k(runs, qrels, 1000)?);
        metrics.insert(NDCG_AT_10.to_string(), ndcg_at_k(runs, qrels, 10)?);
        Ok(Self {
            metrics,
            ..Self::default()
        })
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.mean)
    }

    /// Fills `t_test` with per-metric paired tests of `self` vs `baseline`.
    pub fn test_against(&mut self, baseline: &EvalReport) -> Result<()> {
        let mut tests = BTreeMap::new();
        for (name, values) in &self.metrics {
            if let Some(base) = baseline.metrics.get(name) {
                tests.insert(name.clone(), paired_test(values, base)?);
            }
        }
        self.t_test = Some(tests);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(Error::file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::file(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Ranks `queries` against the corpus and scores the runs.
pub fn evaluate(
    model: &EncoderModel,
    documents: &BTreeMap<u64, Vec<u32>>,
    queries: &BTreeMap<u64, Vec<u32>>,
    qrels: &Qrels,
) -> Result<(EvalReport, Vec<RankedList>)> {
    let runs = rank_all(model, documents, queries, 1000)?;
    Ok((EvalReport::from_runs(&runs, qrels)?, runs))
}

/// Side-by-side table of metric means; `†` marks p < 0.05 against the first
/// report. `tsv` switches from markdown to tab-separated output.
pub fn compare_table(reports: &[(String, EvalReport)], tsv: bool) -> Result<String> {
    let Some((_, base)) = reports.first() else {
        return Err(Error::invalid("nothing to compare"));
    };
    let metrics: Vec<&String> = base.metrics.keys().collect();
    let mut out = String::new();
    let sep = if tsv { "\t" } else { " | " };
    let mut header = vec!["system".to_string()];
    header.extend(metrics.iter().map(|m| m.to_string()));
    let line = |cells: &[String]| {
        if tsv {
            cells.join(sep)
        } else {
            format!("| {} |", cells.join(sep))
        }
    };
    writeln!(out, "{}", line(&header)).expect("writing to a string");
    if !tsv {
        let rule: Vec<String> = header.iter().map(|_| "---".to_string()).collect();
        writeln!(out, "{}", line(&rule)).expect("writing to a string");
    }
    for (i, (name, report)) in reports.iter().enumerate() {
        let mut cells = vec![name.clone()];
        for m in &metrics {
            let Some(values) = report.metrics.get(*m) else {
                cells.push("-".into());
                continue;
            };
            let mark = if i > 0 && paired_test(values, &base.metrics[*m])?.significant {
                "†"
            } else {
                ""
            };
            cells.push(format!("{:.4}{mark}", values.mean));
        }
        writeln!(out, "{}", line(&cells)).expect("writing to a string");
    }
    Ok(out)
}

/// TREC 6-column run file: `<qid> Q0 <docid> <rank> <score> <tag>`.
pub fn write_run(path: &Path, runs: &[RankedList], tag: &str) -> Result<()> {
    let mut out = String::new();
    for run in runs {
        for (r, (d, s)) in run.docs.iter().enumerate() {
            writeln!(out, "{} Q0 {} {} {:?} {}", run.query, d, r + 1, s, tag).expect("writing to a string");
        }
    }
    fs::write(path, out).map_err(Error::file(path))
}

pub fn read_run(path: &Path) -> Result<Vec<RankedList>> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    let mut runs: BTreeMap<u64, Vec<(usize, u64, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let q = cols[0].parse().map_err(|_| bad("bad query id"))?;
        let d = cols[2].parse().map_err(|_| bad("bad doc id"))?;
        let r = cols[3].parse().map_err(|_| bad("bad rank"))?;
        let s = cols[4].parse().map_err(|_| bad("bad score"))?;
        runs.entry(q).or_default().push((r, d, s));
    }
    Ok(runs
        .into_iter()
        .map(|(query, mut rows)| {
            rows.sort_by_key(|r| r.0);
            RankedList {
                query,
                docs: rows.into_iter().map(|(_, d, s)| (d, s)).collect(),
            }
        })
        .collect())
}
