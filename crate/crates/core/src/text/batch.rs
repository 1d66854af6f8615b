//! Triplet batch assembly.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::corpus::{Corpus, HardNegatives};
use crate::text::vocab::PAD;

/// Token sequences right-padded with `<pad>` to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub len: usize,
}

impl Padded {
    /// Pads to the longest sequence (at least one position).
    pub fn new(seqs: &[&[u32]]) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; seqs.len() * len];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * len..r * len + s.len()].copy_from_slice(s);
        }
        Self {
            ids,
            rows: seqs.len(),
            len,
        }
    }

    /// 1.0 at real tokens, 0.0 at padding.
    pub fn mask(&self) -> Vec<f64> {
        self.ids.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }

    pub fn num_tokens(&self) -> usize {
        self.ids.iter().filter(|&&t| t != PAD).count()
    }
}

/// `B` queries, their positives, and `B x K` negatives (row-major by query).
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub query_ids: Vec<u64>,
    pub positive_ids: Vec<u64>,
    pub negative_ids: Vec<u64>,
    pub queries: Padded,
    pub positives: Padded,
    pub negatives: Padded,
    pub k: usize,
    /// Teacher `s(q, d+) - s(q, d-)` margins, `B x K`, in distillation mode.
    pub teacher_margins: Option<Vec<f64>>,
}

impl TripletBatch {
    pub fn size(&self) -> usize {
        self.query_ids.len()
    }

    /// Builds a batch from explicit triplets.
    pub fn from_parts(
        corpus: &Corpus,
        triplets: &[(u64, u64, Vec<u64>)],
        teacher_margins: Option<Vec<f64>>,
    ) -> Result<Self> {
        let k = triplets.first().map_or(0, |t| t.2.len());
        if k == 0 || triplets.iter().any(|t| t.2.len() != k) {
            return Err(Error::invalid("triplet batch needs a uniform K >= 1"));
        }
        if let Some(m) = &teacher_margins {
            if m.len() != triplets.len() * k {
                return Err(Error::invalid("teacher margins must be B x K"));
            }
        }
        fn lookup<'m>(map: &'m BTreeMap<u64, Vec<u32>>, id: u64, what: &str) -> Result<&'m [u32]> {
            map.get(&id)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::invalid(format!("unknown {what} id {id}")))
        }
        let mut qs = Vec::new();
        let mut ps = Vec::new();
        let mut ns = Vec::new();
        for (q, p, negs) in triplets {
            qs.push(lookup(&corpus.queries, *q, "query")?);
            ps.push(lookup(&corpus.documents, *p, "doc")?);
            for n in negs {
                ns.push(lookup(&corpus.documents, *n, "doc")?);
            }
        }
        Ok(Self {
            query_ids: triplets.iter().map(|t| t.0).collect(),
            positive_ids: triplets.iter().map(|t| t.1).collect(),
            negative_ids: triplets.iter().flat_map(|t| t.2.iter().copied()).collect(),
            queries: Padded::new(&qs),
            positives: Padded::new(&ps),
            negatives: Padded::new(&ns),
            k,
            teacher_margins,
        })
    }
}

/// Teacher-scored triplets per query: `(positive, negative, margin)`.
pub type TeacherMargins = BTreeMap<u64, Vec<(u64, u64, f64)>>;

pub fn load_teacher_margins(path: &Path) -> Result<TeacherMargins> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    let mut out = TeacherMargins::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated columns, got {}", cols.len())));
        }
        let id = |s: &str| s.trim().parse::<u64>().map_err(|e| bad(format!("bad id `{s}`: {e}")));
        let margin: f64 = cols[3]
            .trim()
            .parse()
            .map_err(|e| bad(format!("bad margin `{}`: {e}", cols[3])))?;
        if !margin.is_finite() {
            return Err(bad("non-finite margin".into()));
        }
        out.entry(id(cols[0])?).or_default().push((id(cols[1])?, id(cols[2])?, margin));
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::invalid(format!("teacher file {} is empty", path.display())));
    }
    Ok(out)
}

pub fn write_teacher_margins(path: &Path, margins: &TeacherMargins) -> Result<()> {
    let mut out = String::new();
    for (q, rows) in margins {
        for (p, n, m) in rows {
            // `{:?}` prints the shortest representation that parses back exactly.
            let _ = writeln!(out, "{q}\t{p}\t{n}\t{m:?}");
        }
    }
    fs::write(path, out).map_err(Error::file(path))
}

/// Where negatives come from.
#[derive(Clone, Debug)]
pub enum NegativeSource {
    /// Uniform over non-relevant documents.
    Random,
    /// Ranked candidates per query; relevant candidates are dropped and
    /// shortfalls are topped up at random.
    Hard(HardNegatives),
    /// Triplets scored by a teacher; queries without `K` scored negatives
    /// for the sampled positive are skipped.
    Teacher(TeacherMargins),
}

/// Deterministic per-seed batch stream over a fixed set of training queries.
pub struct BatchSampler<'a> {
    corpus: &'a Corpus,
    query_ids: Vec<u64>,
    doc_ids: Vec<u64>,
    negatives: NegativeSource,
    batch_size: usize,
    k: usize,
    seed: u64,
    skipped: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        corpus: &'a Corpus,
        query_ids: &[u64],
        negatives: NegativeSource,
        batch_size: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 || k == 0 {
            return Err(Error::Config("batch size and negatives per query must be >= 1".into()));
        }
        if corpus.documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            corpus,
            query_ids: query_ids.to_vec(),
            doc_ids: corpus.documents.keys().copied().collect(),
            negatives,
            batch_size,
            k,
            seed,
            skipped: 0,
        })
    }

    /// Queries skipped so far (no positive, or no teacher coverage).
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.query_ids.len().div_ceil(self.batch_size)
    }

    fn random_negatives(&self, rng: &mut ChaCha8Rng, qid: u64, taken: &mut HashSet<u64>, out: &mut Vec<u64>) {
        let non_rel = self.doc_ids.len() - self.corpus.relevant(qid).count();
        let mut attempts = 0;
        while out.len() < self.k {
            let d = self.doc_ids[rng.random_range(0..self.doc_ids.len())];
            attempts += 1;
            if self.corpus.is_relevant(qid, d) {
                continue;
            }
            // Sample with replacement only once distinct docs run out.
            if taken.insert(d) || taken.len() >= non_rel || attempts > 64 * self.k {
                out.push(d);
            }
        }
    }

    fn triplet(&self, rng: &mut ChaCha8Rng, qid: u64) -> Option<(u64, u64, Vec<u64>, Option<Vec<f64>>)> {
        let positives: Vec<u64> = self.corpus.relevant(qid).collect();
        if positives.is_empty() || positives.len() == self.doc_ids.len() {
            return None;
        }
        match &self.negatives {
            NegativeSource::Random => {
                let pos = positives[rng.random_range(0..positives.len())];
                let mut negs = Vec::with_capacity(self.k);
                self.random_negatives(rng, qid, &mut HashSet::new(), &mut negs);
                Some((qid, pos, negs, None))
            }
            NegativeSource::Hard(map) => {
                let pos = positives[rng.random_range(0..positives.len())];
                let cands: Vec<u64> = map
                    .get(&qid)
                    .map(|c| c.iter().copied().filter(|&d| !self.corpus.is_relevant(qid, d)).collect())
                    .unwrap_or_default();
                let mut negs: Vec<u64> = index::sample(rng, cands.len(), self.k.min(cands.len()))
                    .into_iter()
                    .map(|i| cands[i])
                    .collect();
                let mut taken: HashSet<u64> = negs.iter().copied().collect();
                self.random_negatives(rng, qid, &mut taken, &mut negs);
                Some((qid, pos, negs, None))
            }
            NegativeSource::Teacher(margins) => {
                let rows = margins.get(&qid)?;
                let mut pos_ids: Vec<u64> = rows.iter().map(|r| r.0).collect();
                pos_ids.sort_unstable();
                pos_ids.dedup();
                let pos = pos_ids[rng.random_range(0..pos_ids.len())];
                let scored: Vec<&(u64, u64, f64)> = rows
                    .iter()
                    .filter(|r| r.0 == pos && !self.corpus.is_relevant(qid, r.1) && self.corpus.documents.contains_key(&r.1))
                    .collect();
                if scored.len() < self.k || !self.corpus.documents.contains_key(&pos) {
                    return None;
                }
                let pick = index::sample(rng, scored.len(), self.k);
                let negs = pick.iter().map(|i| scored[i].1).collect();
                let m = pick.iter().map(|i| scored[i].2).collect();
                Some((qid, pos, negs, Some(m)))
            }
        }
    }

    /// All batches of one epoch: every training query once, shuffled. The
    /// last batch may be short.
    pub fn epoch(&mut self, epoch: usize) -> Vec<TripletBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order = self.query_ids.clone();
        order.shuffle(&mut rng);
        let mut batches = Vec::new();
        for chunk in order.chunks(self.batch_size) {
            let mut triplets = Vec::new();
            let mut margins = Vec::new();
            let mut distill = false;
            for &q in chunk {
                match self.triplet(&mut rng, q) {
                    Some((q, p, n, m)) => {
                        if let Some(m) = m {
                            distill = true;
                            margins.extend(m);
                        }
                        triplets.push((q, p, n));
                    }
                    None => {
                        self.skipped += 1;
                        log::warn!("skipping query {q}: no usable positive/negatives");
                    }
                }
            }
            if triplets.is_empty() {
                continue;
            }
            let batch = TripletBatch::from_parts(self.corpus, &triplets, distill.then_some(margins))
                .expect("sampled ids come from the corpus");
            batches.push(batch);
        }
        batches
    }
}
