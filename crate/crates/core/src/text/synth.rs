//! Topic-structured synthetic corpora.
//!
//! Every topic owns a disjoint set of salient tokens. A document draws a
//! focus subset of its topic's salient set and fills its positions from
//! that subset, swapping in background tokens at the noise rate. A query
//! takes distinct salient tokens that occur in one document; that document
//! is its single relevant judgement.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::corpus::Corpus;
use crate::text::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub topics: usize,
    pub docs_per_topic: usize,
    /// Inclusive `[min, max]` document length in tokens.
    pub doc_len: [usize; 2],
    /// Inclusive `[min, max]` query length in tokens.
    pub query_len: [usize; 2],
    pub salient_per_topic: usize,
    /// Distinct salient tokens a single document draws from.
    pub doc_focus: usize,
    pub noise_rate: f64,
    pub train_queries: usize,
    pub dev_queries: usize,
    pub test_queries: usize,
    /// Also judge same-topic documents with grade 0.
    pub judge_same_topic: bool,
    /// Number of lexical hard negatives written per train query (0 = none).
    pub hard_negatives: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            topics: 20,
            docs_per_topic: 50,
            doc_len: [16, 32],
            query_len: [3, 5],
            salient_per_topic: 40,
            doc_focus: 4,
            noise_rate: 0.1,
            train_queries: 500,
            dev_queries: 100,
            test_queries: 100,
            judge_same_topic: false,
            hard_negatives: 0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.topics == 0 || self.docs_per_topic == 0 || self.salient_per_topic == 0 || self.doc_focus == 0 {
            return fail("topics, docs_per_topic, salient_per_topic and doc_focus must be positive".into());
        }
        if self.doc_len[0] == 0 || self.doc_len[0] > self.doc_len[1] {
            return fail(format!("bad doc_len range {:?}", self.doc_len));
        }
        if self.query_len[0] == 0 || self.query_len[0] > self.query_len[1] {
            return fail(format!("bad query_len range {:?}", self.query_len));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return fail(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        if self.doc_focus > self.salient_per_topic {
            return fail("doc_focus exceeds salient_per_topic".into());
        }
        if self.train_queries + self.dev_queries + self.test_queries == 0 {
            return fail("no queries requested".into());
        }
        if self.vocab_size > MAX_WORDS + 2 {
            return fail(format!("vocab_size above {}", MAX_WORDS + 2));
        }
        let salient = self.topics * self.salient_per_topic;
        let regular = self.vocab_size.saturating_sub(2);
        if salient > regular || (self.noise_rate > 0.0 && salient == regular) {
            return fail(format!(
                "{} topics x {} salient tokens leave no background pool in a vocabulary of {}",
                self.topics, self.salient_per_topic, self.vocab_size
            ));
        }
        Ok(())
    }

    pub fn num_docs(&self) -> usize {
        self.topics * self.docs_per_topic
    }
}

/// Query id splits of a generated corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub dev: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub splits: Splits,
    /// Topic of every document, by doc id.
    pub doc_topic: BTreeMap<u64, usize>,
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";
const SYLLABLES: usize = 18 * 5;
const MAX_WORDS: usize = SYLLABLES * SYLLABLES * SYLLABLES;

/// Deterministic six-letter pseudo-word for a regular token index.
/// Distinct for every `i < 729000`.
pub fn pseudo_word(i: usize) -> String {
    let code = (i * 7919 + 104_729) % MAX_WORDS;
    let mut out = String::with_capacity(6);
    let mut rest = code;
    for _ in 0..3 {
        let syl = rest % SYLLABLES;
        rest /= SYLLABLES;
        out.push(CONSONANTS[syl / 5] as char);
        out.push(VOWELS[syl % 5] as char);
    }
    out
}

/// The vocabulary used by every synthetic corpus of size `vocab_size`,
/// independent of the seed.
pub fn synthetic_vocabulary(vocab_size: usize) -> Vocabulary {
    Vocabulary::new((0..vocab_size.saturating_sub(2)).map(pseudo_word))
}

/// Generates a synthetic corpus. Identical specs give identical output.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = synthetic_vocabulary(spec.vocab_size);

    let mut regular: Vec<u32> = (2..spec.vocab_size as u32).collect();
    regular.shuffle(&mut rng);
    let s = spec.salient_per_topic;
    let salient: Vec<&[u32]> = (0..spec.topics).map(|t| &regular[t * s..(t + 1) * s]).collect();
    let background = &regular[spec.topics * s..];

    let mut corpus = Corpus::default();
    let mut doc_topic = BTreeMap::new();
    let mut doc_focus: Vec<Vec<u32>> = Vec::new();
    for doc in 0..spec.num_docs() {
        let topic = doc / spec.docs_per_topic;
        let focus: Vec<u32> = index::sample(&mut rng, s, spec.doc_focus)
            .into_iter()
            .map(|i| salient[topic][i])
            .collect();
        let len = rng.random_range(spec.doc_len[0]..=spec.doc_len[1]);
        let tokens: Vec<u32> = (0..len)
            .map(|_| {
                if rng.random::<f64>() < spec.noise_rate {
                    background[rng.random_range(0..background.len())]
                } else {
                    focus[rng.random_range(0..focus.len())]
                }
            })
            .collect();
        corpus.documents.insert(doc as u64, tokens);
        doc_topic.insert(doc as u64, topic);
        doc_focus.push(focus);
    }

    let total = spec.train_queries + spec.dev_queries + spec.test_queries;
    let mut splits = Splits::default();
    for q in 0..total as u64 {
        let doc = rng.random_range(0..spec.num_docs());
        let topic = doc / spec.docs_per_topic;
        let mut present: Vec<u32> = corpus.documents[&(doc as u64)]
            .iter()
            .copied()
            .filter(|t| doc_focus[doc].contains(t))
            .collect();
        present.sort_unstable();
        present.dedup();
        if present.is_empty() {
            // All-noise document: fall back to its focus set.
            present = doc_focus[doc].clone();
        }
        let want = rng.random_range(spec.query_len[0]..=spec.query_len[1]).min(present.len());
        let tokens: Vec<u32> = index::sample(&mut rng, present.len(), want)
            .into_iter()
            .map(|i| {
                if rng.random::<f64>() < spec.noise_rate {
                    salient[topic][rng.random_range(0..s)]
                } else {
                    present[i]
                }
            })
            .collect();
        corpus.queries.insert(q, tokens);
        let judged = corpus.qrels.entry(q).or_default();
        if spec.judge_same_topic {
            for other in topic * spec.docs_per_topic..(topic + 1) * spec.docs_per_topic {
                judged.insert(other as u64, 0);
            }
        }
        judged.insert(doc as u64, 1);
        let split = if (q as usize) < spec.train_queries {
            &mut splits.train
        } else if (q as usize) < spec.train_queries + spec.dev_queries {
            &mut splits.dev
        } else {
            &mut splits.test
        };
        split.push(q);
    }

    Ok(SynthCorpus {
        corpus,
        vocab,
        splits,
        doc_topic,
    })
}
