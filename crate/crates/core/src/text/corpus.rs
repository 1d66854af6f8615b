//! TSV corpus ingestion in the MS MARCO layout.
//!
//! * collection / queries: `<id>\t<text>`
//! * qrels: TREC `<qid> 0 <docid> <grade>`
//! * hard negatives: `<qid>\t<docid>,<docid>,...`

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::text::vocab::Vocabulary;

/// Query id → (doc id → relevance grade).
pub type Qrels = BTreeMap<u64, BTreeMap<u64, u32>>;

/// Tokenized documents, queries and relevance judgements.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub documents: BTreeMap<u64, Vec<u32>>,
    pub queries: BTreeMap<u64, Vec<u32>>,
    pub qrels: Qrels,
}

impl Corpus {
    /// Docs judged with grade ≥ 1 for `qid`.
    pub fn relevant(&self, qid: u64) -> impl Iterator<Item = u64> + '_ {
        self.qrels
            .get(&qid)
            .into_iter()
            .flat_map(|m| m.iter().filter(|(_, &g)| g >= 1).map(|(&d, _)| d))
    }

    pub fn is_relevant(&self, qid: u64, doc: u64) -> bool {
        self.qrels
            .get(&qid)
            .and_then(|m| m.get(&doc))
            .is_some_and(|&g| g >= 1)
    }

    /// Same documents and qrels with a different query set.
    pub fn with_queries(&self, queries: BTreeMap<u64, Vec<u32>>) -> Corpus {
        Corpus {
            documents: self.documents.clone(),
            queries,
            qrels: self.qrels.clone(),
        }
    }

    /// Queries restricted to the given ids (missing ids are ignored).
    pub fn subset_queries(&self, ids: &[u64]) -> BTreeMap<u64, Vec<u32>> {
        ids.iter()
            .filter_map(|id| self.queries.get(id).map(|q| (*id, q.clone())))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct CorpusPaths {
    pub collection: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads `<id>\t<text>` lines. Blank lines are skipped.
pub fn read_id_text(path: &Path) -> Result<Vec<(u64, String)>> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, i + 1, "expected `<id>\\t<text>`"))?;
        let id = id
            .trim()
            .parse::<u64>()
            .map_err(|e| parse_err(path, i + 1, format!("bad id `{id}`: {e}")))?;
        out.push((id, body.to_string()));
    }
    Ok(out)
}

pub fn write_id_text<'a>(path: &Path, rows: impl IntoIterator<Item = (u64, &'a str)>) -> Result<()> {
    let mut out = String::new();
    for (id, text) in rows {
        let _ = writeln!(out, "{id}\t{text}");
    }
    fs::write(path, out).map_err(Error::file(path))
}

pub fn load_texts(path: &Path, vocab: &Vocabulary) -> Result<BTreeMap<u64, Vec<u32>>> {
    Ok(read_id_text(path)?
        .into_iter()
        .map(|(id, text)| (id, vocab.tokenize(&text)))
        .collect())
}

/// Parses TREC qrels. When `documents` is given, every judged doc must exist.
pub fn load_qrels(path: &Path, documents: Option<&BTreeMap<u64, Vec<u32>>>) -> Result<Qrels> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() != 4 {
            return Err(parse_err(path, i + 1, format!("expected 4 columns, got {}", cols.len())));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|e| parse_err(path, i + 1, format!("bad field `{s}`: {e}")));
        let (qid, doc) = (num(cols[0])?, num(cols[2])?);
        let grade = cols[3]
            .parse::<u32>()
            .map_err(|e| parse_err(path, i + 1, format!("bad grade `{}`: {e}", cols[3])))?;
        if let Some(docs) = documents {
            if !docs.contains_key(&doc) {
                return Err(parse_err(path, i + 1, format!("unknown doc id {doc}")));
            }
        }
        qrels.entry(qid).or_default().insert(doc, grade);
    }
    Ok(qrels)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut out = String::new();
    for (q, docs) in qrels {
        for (d, g) in docs {
            let _ = writeln!(out, "{q} 0 {d} {g}");
        }
    }
    fs::write(path, out).map_err(Error::file(path))
}

/// Loads collection, queries and qrels, mapping words through `vocab`
/// (out-of-vocabulary words become `<unk>`).
pub fn load_corpus(paths: &CorpusPaths, vocab: &Vocabulary) -> Result<Corpus> {
    let documents = load_texts(&paths.collection, vocab)?;
    let queries = load_texts(&paths.queries, vocab)?;
    let qrels = load_qrels(&paths.qrels, Some(&documents))?;
    Ok(Corpus {
        documents,
        queries,
        qrels,
    })
}

pub fn write_corpus(corpus: &Corpus, vocab: &Vocabulary, paths: &CorpusPaths) -> Result<()> {
    let docs: Vec<(u64, String)> = corpus.documents.iter().map(|(&id, t)| (id, vocab.detokenize(t))).collect();
    write_id_text(&paths.collection, docs.iter().map(|(i, s)| (*i, s.as_str())))?;
    let qs: Vec<(u64, String)> = corpus.queries.iter().map(|(&id, t)| (id, vocab.detokenize(t))).collect();
    write_id_text(&paths.queries, qs.iter().map(|(i, s)| (*i, s.as_str())))?;
    write_qrels(&paths.qrels, &corpus.qrels)
}

/// Query id → ranked candidate negative doc ids.
pub type HardNegatives = HashMap<u64, Vec<u64>>;

pub fn load_hard_negatives(path: &Path) -> Result<HardNegatives> {
    let mut out = HardNegatives::new();
    for (i, (qid, list)) in read_id_text(path)?.into_iter().enumerate() {
        let docs = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u64>().map_err(|e| parse_err(path, i + 1, format!("bad doc id `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.insert(qid, docs);
    }
    Ok(out)
}

pub fn write_hard_negatives(path: &Path, negatives: &BTreeMap<u64, Vec<u64>>) -> Result<()> {
    let mut out = String::new();
    for (q, docs) in negatives {
        let list: Vec<String> = docs.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "{q}\t{}", list.join(","));
    }
    fs::write(path, out).map_err(Error::file(path))
}
