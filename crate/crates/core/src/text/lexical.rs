//! Exact-match lexical scorer: the number of distinct query tokens that
//! occur in a document. Used for hard-negative mining and as the oracle
//! teacher for distillation.

use std::collections::{BTreeMap, HashMap};

use crate::text::corpus::Corpus;
use crate::text::vocab::{PAD, UNK};

pub struct LexicalIndex {
    doc_ids: Vec<u64>,
    postings: HashMap<u32, Vec<usize>>,
}

impl LexicalIndex {
    pub fn new(documents: &BTreeMap<u64, Vec<u32>>) -> Self {
        let mut postings: HashMap<u32, Vec<usize>> = HashMap::new();
        for (pos, toks) in documents.values().enumerate() {
            let mut uniq = toks.clone();
            uniq.sort_unstable();
            uniq.dedup();
            for t in uniq {
                postings.entry(t).or_default().push(pos);
            }
        }
        Self {
            doc_ids: documents.keys().copied().collect(),
            postings,
        }
    }

    pub fn doc_ids(&self) -> &[u64] {
        &self.doc_ids
    }

    /// Overlap score of `query` against every document, in doc-id order.
    pub fn score_all(&self, query: &[u32]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_ids.len()];
        let mut uniq: Vec<u32> = query.iter().copied().filter(|&t| t != PAD && t != UNK).collect();
        uniq.sort_unstable();
        uniq.dedup();
        for t in uniq {
            if let Some(docs) = self.postings.get(&t) {
                for &d in docs {
                    scores[d] += 1.0;
                }
            }
        }
        scores
    }

    /// Top `k` documents by overlap, ties broken by ascending doc id.
    pub fn rank(&self, query: &[u32], k: usize) -> Vec<(u64, f64)> {
        let scores = self.score_all(query);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(k);
        order.into_iter().map(|i| (self.doc_ids[i], scores[i])).collect()
    }
}

/// Distinct-token overlap between a query and one document.
pub fn overlap(query: &[u32], doc: &[u32]) -> f64 {
    let mut uniq: Vec<u32> = query.iter().copied().filter(|&t| t != PAD && t != UNK).collect();
    uniq.sort_unstable();
    uniq.dedup();
    uniq.iter().filter(|t| doc.contains(t)).count() as f64
}

/// Lexically mined negatives: top-`n` non-relevant documents per query.
pub fn mine_hard_negatives(corpus: &Corpus, query_ids: &[u64], n: usize) -> BTreeMap<u64, Vec<u64>> {
    let index = LexicalIndex::new(&corpus.documents);
    let mut out = BTreeMap::new();
    for &q in query_ids {
        let Some(toks) = corpus.queries.get(&q) else { continue };
        let cands: Vec<u64> = index
            .rank(toks, n + corpus.relevant(q).count())
            .into_iter()
            .map(|(d, _)| d)
            .filter(|&d| !corpus.is_relevant(q, d))
            .take(n)
            .collect();
        out.insert(q, cands);
    }
    out
}
