//! Binary checkpoints.
//!
//! Layout: `b"ADVR"`, format version (`u32` LE), header length in bytes
//! (`u64` LE), a JSON header, then every tensor as little-endian `f64`s at
//! the element offsets listed in the header's tensor directory.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::AdversaryState;
use crate::encoders::{EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamState, ParamSet};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"ADVR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
    Universal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMeta {
    /// Epochs of parameter updates behind these weights, across resumes.
    pub epochs_done: usize,
    pub steps_done: usize,
    pub config_hash: String,
    pub dev_mrr: Option<f64>,
    pub strategy: Option<String>,
}

/// Position of a ChaCha stream, enough to continue it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// 128-bit word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: TrainingMeta,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
    adam_step: Option<u64>,
    rng: Option<RngState>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub vocab: Vocabulary,
    pub meta: TrainingMeta,
    pub adam: Option<AdamState>,
    pub adversary: Option<AdversaryState>,
}

impl Checkpoint {
    pub fn new(model: EncoderModel, vocab: Vocabulary) -> Self {
        Self {
            model,
            vocab,
            meta: TrainingMeta::default(),
            adam: None,
            adversary: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: &str, role, shape: Vec<usize>, data: &[f64]| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                role,
                shape,
                offset: payload.len(),
            });
            payload.extend_from_slice(data);
        };
        for (name, t) in self.model.params.iter() {
            push(name, TensorRole::Param, t.shape().to_vec(), t.data());
        }
        if let Some(adam) = &self.adam {
            for (((name, t), m), v) in self.model.params.iter().zip(&adam.m).zip(&adam.v) {
                push(name, TensorRole::AdamM, t.shape().to_vec(), m);
                push(name, TensorRole::AdamV, t.shape().to_vec(), v);
            }
        }
        if let Some(adv) = &self.adversary {
            push("universal", TensorRole::Universal, vec![adv.universal.eps.len()], &adv.universal.eps);
        }
        let header = Header {
            model: self.model.config.clone(),
            meta: self.meta.clone(),
            vocab: self.vocab.tokens().to_vec(),
            tensors,
            adam_step: self.adam.as_ref().map(|a| a.step),
            rng: self.adversary.as_ref().map(|a| RngState::capture(&a.rng)),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for x in payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (missing ADVR magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let raw = &bytes[16 + hlen..];
        if raw.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let payload: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let slice = |e: &TensorEntry| -> Result<Vec<f64>> {
            let n: usize = e.shape.iter().product();
            payload
                .get(e.offset..e.offset + n)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", e.name)))
        };
        let mut params = ParamSet::new();
        let (mut m, mut v, mut eps) = (Vec::new(), Vec::new(), None);
        for e in &header.tensors {
            let data = slice(e)?;
            match e.role {
                TensorRole::Param => params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?),
                TensorRole::AdamM => m.push(data),
                TensorRole::AdamV => v.push(data),
                TensorRole::Universal => eps = Some(data),
            }
        }
        let model = EncoderModel::from_params(header.model, params)?;
        let adam = match header.adam_step {
            Some(step) if m.len() == model.params.len() && v.len() == m.len() => Some(AdamState { step, m, v }),
            Some(_) => return Err(bad("optimizer state does not cover every parameter")),
            None => None,
        };
        let adversary = match (header.rng, eps) {
            (Some(rng), Some(eps)) => {
                let mut state = AdversaryState::new(eps.len(), 0);
                state.universal.eps = eps;
                state.rng = rng.restore()?;
                Some(state)
            }
            _ => None,
        };
        Ok(Self {
            model,
            vocab: Vocabulary::new(header.vocab),
            meta: header.meta,
            adam,
            adversary,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(Error::file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(Error::file(path))?)
    }
}
