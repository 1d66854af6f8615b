//! Seeded query-variation generators: character typos, stop-word removal,
//! word reordering and lexicon synonyms.
//!
//! Every query draws from its own random substream (`seed`, stream = query
//! id), so output is independent of file order and can be generated in
//! parallel.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::corpus::{read_id_text, write_id_text};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    RandomChar,
    NeighbChar,
    QwertyChar,
    RmStopwords,
    RandomOrder,
    LexiconSyn,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::RandomChar,
        Family::NeighbChar,
        Family::QwertyChar,
        Family::RmStopwords,
        Family::RandomOrder,
        Family::LexiconSyn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::RandomChar => "random_char",
            Family::NeighbChar => "neighb_char",
            Family::QwertyChar => "qwerty_char",
            Family::RmStopwords => "rm_stopwords",
            Family::RandomOrder => "random_order",
            Family::LexiconSyn => "lexicon_syn",
        }
    }

    pub fn is_char_edit(self) -> bool {
        matches!(self, Family::RandomChar | Family::NeighbChar | Family::QwertyChar)
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variation family `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationSpec {
    pub family: Family,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stopwords: Option<PathBuf>,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default = "default_min_word_len")]
    pub min_word_len: usize,
    #[serde(default = "default_edits")]
    pub edits_per_query: usize,
}

fn default_min_word_len() -> usize {
    4
}

fn default_edits() -> usize {
    1
}

impl VariationSpec {
    pub fn new(family: Family, seed: u64) -> Self {
        Self {
            family,
            seed,
            stopwords: None,
            lexicon: None,
            min_word_len: default_min_word_len(),
            edits_per_query: default_edits(),
        }
    }
}

/// Why a query was left (partly) unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    NoEligibleWord,
    AllStopwords,
    SingleDistinctWord,
    NoLexiconEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variation {
    pub text: String,
    pub edit: String,
    pub flags: Vec<Flag>,
}

#[derive(Serialize)]
struct ManifestRecord<'a> {
    id: u64,
    family: Family,
    edit: &'a str,
    flags: &'a [Flag],
}

pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

/// `<word>\t<syn1>,<syn2>,...` per line.
pub fn load_lexicon(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (word, syns) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected `word<TAB>syn1,syn2,...`".into(),
        })?;
        let syns: Vec<String> = syns
            .split(',')
            .map(|s| s.trim().to_lowercase())
            .filter(|s| !s.is_empty())
            .collect();
        if !syns.is_empty() {
            out.insert(word.trim().to_lowercase(), syns);
        }
    }
    Ok(out)
}

const KEY_ROWS: [&str; 3] = ["qwertyuiop", "asdfghjkl", "zxcvbnm"];

/// Keys physically adjacent to `c` on a staggered QWERTY layout (same-row
/// neighbours plus the touching keys above and below), lowercase letters only.
pub fn qwerty_neighbors(c: char) -> Vec<char> {
    let c = c.to_ascii_lowercase();
    let rows: Vec<Vec<char>> = KEY_ROWS.iter().map(|r| r.chars().collect()).collect();
    let Some((r, i)) = rows
        .iter()
        .enumerate()
        .find_map(|(r, keys)| keys.iter().position(|&k| k == c).map(|i| (r, i)))
    else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut push = |row: usize, idx: isize| {
        if idx >= 0 {
            if let Some(&k) = rows[row].get(idx as usize) {
                out.push(k);
            }
        }
    };
    let i = i as isize;
    push(r, i - 1);
    push(r, i + 1);
    // Each row sits half a key (or less) right of the one above.
    if r > 0 {
        push(r - 1, i);
        push(r - 1, i + 1);
    }
    if r < 2 {
        push(r + 1, i - 1);
        push(r + 1, i);
    }
    out
}

/// A loaded variation generator.
pub struct Varier {
    spec: VariationSpec,
    stopwords: HashSet<String>,
    lexicon: BTreeMap<String, Vec<String>>,
}

impl Varier {
    /// Loads the family's resource file, if it needs one.
    pub fn new(spec: VariationSpec) -> Result<Self> {
        let need = |p: &Option<PathBuf>, what: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("{} needs a {what} file", spec.family.name())))
        };
        let stopwords = match spec.family {
            Family::RmStopwords => load_stopwords(&need(&spec.stopwords, "stopword")?)?,
            _ => HashSet::new(),
        };
        let lexicon = match spec.family {
            Family::LexiconSyn => load_lexicon(&need(&spec.lexicon, "lexicon")?)?,
            _ => BTreeMap::new(),
        };
        Ok(Self::with_resources(spec, stopwords, lexicon))
    }

    pub fn with_resources(spec: VariationSpec, stopwords: HashSet<String>, lexicon: BTreeMap<String, Vec<String>>) -> Self {
        Self { spec, stopwords, lexicon }
    }

    pub fn spec(&self) -> &VariationSpec {
        &self.spec
    }

    /// Varies one query with its own substream.
    pub fn vary_query(&self, id: u64, text: &str) -> Result<Variation> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(id);
        self.vary(text, &mut rng)
    }

    pub fn vary(&self, text: &str, rng: &mut impl Rng) -> Result<Variation> {
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err(Error::invalid("cannot vary an empty query"));
        }
        let out = match self.spec.family {
            f if f.is_char_edit() => self.char_edits(words, rng),
            Family::RmStopwords => self.rm_stopwords(words),
            Family::RandomOrder => random_order(words, rng),
            _ => self.lexicon_syn(words, rng),
        };
        Ok(out)
    }

    fn char_edits(&self, mut words: Vec<String>, rng: &mut impl Rng) -> Variation {
        let mut edits = Vec::new();
        let mut flags = Vec::new();
        for _ in 0..self.spec.edits_per_query {
            let eligible: Vec<usize> = (0..words.len())
                .filter(|&i| {
                    let chars: Vec<char> = words[i].chars().collect();
                    chars.len() >= self.spec.min_word_len.max(1) && self.editable(&chars)
                })
                .collect();
            let Some(&w) = eligible.choose(rng) else {
                flags.push(Flag::NoEligibleWord);
                break;
            };
            let mut chars: Vec<char> = words[w].chars().collect();
            let before = words[w].clone();
            match self.spec.family {
                Family::RandomChar => {
                    let p = rng.random_range(0..chars.len());
                    let old = chars[p];
                    let letters: Vec<char> = ('a'..='z').filter(|&c| c != old).collect();
                    chars[p] = *letters.choose(rng).expect("25 letters remain");
                }
                Family::NeighbChar => {
                    let spots = transposable(&chars);
                    let p = *spots.choose(rng).expect("eligible word has a spot");
                    chars.swap(p, p + 1);
                }
                _ => {
                    let spots: Vec<usize> = (0..chars.len()).filter(|&p| !qwerty_neighbors(chars[p]).is_empty()).collect();
                    let p = *spots.choose(rng).expect("eligible word has a key");
                    chars[p] = *qwerty_neighbors(chars[p]).choose(rng).expect("nonempty");
                }
            }
            words[w] = chars.into_iter().collect();
            edits.push(format!("{w}:{before}->{}", words[w]));
        }
        Variation {
            text: words.join(" "),
            edit: if edits.is_empty() { "none".into() } else { edits.join(";") },
            flags,
        }
    }

    fn editable(&self, chars: &[char]) -> bool {
        match self.spec.family {
            Family::NeighbChar => !transposable(chars).is_empty(),
            Family::QwertyChar => chars.iter().any(|&c| !qwerty_neighbors(c).is_empty()),
            _ => true,
        }
    }

    fn rm_stopwords(&self, words: Vec<String>) -> Variation {
        let kept: Vec<&String> = words.iter().filter(|w| !self.stopwords.contains(&w.to_lowercase())).collect();
        if kept.is_empty() {
            return Variation {
                text: words.join(" "),
                edit: "none".into(),
                flags: vec![Flag::AllStopwords],
            };
        }
        let removed = words.len() - kept.len();
        Variation {
            text: kept.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" "),
            edit: format!("removed {removed}"),
            flags: Vec::new(),
        }
    }

    fn lexicon_syn(&self, mut words: Vec<String>, rng: &mut impl Rng) -> Variation {
        let candidates: Vec<usize> = (0..words.len())
            .filter(|&i| self.lexicon.contains_key(&words[i].to_lowercase()))
            .collect();
        let Some(&w) = candidates.choose(rng) else {
            return Variation {
                text: words.join(" "),
                edit: "none".into(),
                flags: vec![Flag::NoLexiconEntry],
            };
        };
        let syn = self.lexicon[&words[w].to_lowercase()].choose(rng).expect("entries are nonempty").clone();
        let edit = format!("{w}:{}->{syn}", words[w]);
        words[w] = syn;
        Variation {
            text: words.join(" "),
            edit,
            flags: Vec::new(),
        }
    }

    /// Varies every query of a TSV file, writing the varied TSV and a
    /// JSON-lines manifest with one record per query.
    pub fn vary_file(&self, queries: &Path, output: &Path, manifest: &Path) -> Result<usize> {
        let rows = read_id_text(queries)?;
        let mut varied = Vec::with_capacity(rows.len());
        let mut log = String::new();
        for (id, text) in &rows {
            let v = self.vary_query(*id, text)?;
            let rec = ManifestRecord {
                id: *id,
                family: self.spec.family,
                edit: &v.edit,
                flags: &v.flags,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?).expect("writing to a string");
            varied.push((*id, v.text));
        }
        write_id_text(output, varied.iter().map(|(id, t)| (*id, t.as_str())))?;
        fs::write(manifest, log).map_err(Error::file(manifest))?;
        Ok(rows.len())
    }
}

/// Interior positions `i` such that swapping `i` and `i + 1` keeps the first
/// and last characters fixed and changes the word.
fn transposable(chars: &[char]) -> Vec<usize> {
    if chars.len() < 4 {
        return Vec::new();
    }
    (1..chars.len() - 2).filter(|&i| chars[i] != chars[i + 1]).collect()
}

fn random_order(mut words: Vec<String>, rng: &mut impl Rng) -> Variation {
    let distinct: HashSet<&String> = words.iter().collect();
    if distinct.len() < 2 {
        return Variation {
            text: words.join(" "),
            edit: "none".into(),
            flags: vec![Flag::SingleDistinctWord],
        };
    }
    let original = words.clone();
    let mut tries = 0;
    while words == original {
        words.shuffle(rng);
        tries += 1;
    }
    Variation {
        text: words.join(" "),
        edit: format!("shuffled ({tries} draws)"),
        flags: Vec::new(),
    }
}
