//! Toy bi-encoders.
//!
//! * Dense: masked mean of token embeddings, then an MLP.
//! * Sparse (SPLADE-style): per-token MLP, projection onto the vocabulary,
//!   `log(1 + relu(.))` activation and masked max pooling over positions.
//!
//! Both expose the gathered token embeddings as a separate graph node so
//! perturbations can be added before encoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{BoundParams, ParamSet};
use crate::tensor::Tensor;
use crate::text::Padded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Dense,
    Sparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: EncoderKind,
    pub vocab_size: usize,
    pub dim: usize,
    /// Number of (weight, bias) layers; relu between consecutive layers.
    pub layers: usize,
    /// Sparse only: project with the transposed embedding table.
    pub tied_projection: bool,
    /// Query and document towers share all weights.
    pub shared_towers: bool,
    /// Std of the initial embedding entries.
    pub init_std: f64,
    /// Std of the noise added to the identity-initialised layers.
    pub layer_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Dense,
            vocab_size: 1000,
            dim: 32,
            layers: 1,
            tied_projection: true,
            shared_towers: true,
            init_std: 1.0,
            layer_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.dim == 0 {
            return Err(Error::Config("model needs vocab_size >= 3 and dim >= 1".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Dense => self.dim,
            EncoderKind::Sparse => self.vocab_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tower {
    Query,
    Document,
}

/// Token embeddings of a padded batch: `[B, L, d]` plus its mask.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub var: Var,
    pub mask: Vec<f64>,
    pub rows: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("std is positive");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::new(shape, data).expect("shape matches data")
}

impl EncoderModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let towers: &[&str] = if config.shared_towers { &[""] } else { &["query.", "doc."] };
        let (v, d) = (config.vocab_size, config.dim);
        for p in towers {
            params.insert(format!("{p}embedding"), normal_tensor(&mut rng, vec![v, d], config.init_std));
            for l in 0..config.layers {
                let mut w = normal_tensor(&mut rng, vec![d, d], config.layer_init_std);
                for i in 0..d {
                    w.data_mut()[i * d + i] += 1.0;
                }
                params.insert(format!("{p}layer{l}.weight"), w);
                params.insert(format!("{p}layer{l}.bias"), Tensor::zeros(vec![d]));
            }
            if config.kind == EncoderKind::Sparse {
                if !config.tied_projection {
                    params.insert(format!("{p}output.weight"), normal_tensor(&mut rng, vec![d, v], config.init_std));
                }
                params.insert(format!("{p}output.bias"), Tensor::zeros(vec![v]));
            }
        }
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters, checking that every expected tensor exists
    /// with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let fresh = Self::new(config.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(Error::shape("from_params", t.shape(), p.shape())),
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    fn prefix(&self, tower: Tower) -> &'static str {
        match (self.config.shared_towers, tower) {
            (true, _) => "",
            (false, Tower::Query) => "query.",
            (false, Tower::Document) => "doc.",
        }
    }

    fn param(&self, bound: &BoundParams, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"));
        bound.var(idx)
    }

    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        self.params.bind(graph)
    }

    /// Gathers token embeddings for a padded batch: `[B, L, d]`.
    pub fn embed_tokens(&self, graph: &mut Graph, bound: &BoundParams, tower: Tower, seqs: &Padded) -> Result<Embedded> {
        let table = self.param(bound, &format!("{}embedding", self.prefix(tower)));
        let idx: Vec<usize> = seqs.ids.iter().map(|&t| t as usize).collect();
        let flat = graph.gather_rows(table, &idx)?;
        let var = graph.reshape(flat, vec![seqs.rows, seqs.len, self.config.dim])?;
        Ok(Embedded {
            var,
            mask: seqs.mask(),
            rows: seqs.rows,
            len: seqs.len,
        })
    }

    fn mlp(&self, graph: &mut Graph, bound: &BoundParams, tower: Tower, mut h: Var) -> Result<Var> {
        let p = self.prefix(tower);
        for l in 0..self.config.layers {
            if l > 0 {
                h = graph.relu(h);
            }
            let w = self.param(bound, &format!("{p}layer{l}.weight"));
            let b = self.param(bound, &format!("{p}layer{l}.bias"));
            h = graph.matmul(h, w)?;
            h = graph.add_row(h, b)?;
        }
        Ok(h)
    }

    /// Dense encoding: masked mean over positions, then the MLP. `[B, d]`.
    pub fn encode_dense(&self, graph: &mut Graph, bound: &BoundParams, tower: Tower, tokens: Var, mask: &[f64]) -> Result<Var> {
        if self.config.kind != EncoderKind::Dense {
            return Err(Error::invalid("encode_dense on a sparse model"));
        }
        let pooled = graph.masked_mean_pool(tokens, mask)?;
        let out = self.mlp(graph, bound, tower, pooled)?;
        // An all-pad row stays zero even when the MLP has biases.
        let rows = graph.shape(out)[0];
        let (d, len) = (self.config.dim, mask.len() / rows.max(1));
        let keep: Vec<f64> = mask
            .chunks(len.max(1))
            .flat_map(|m| {
                let any = m.iter().any(|&x| x > 0.0);
                std::iter::repeat_n(if any { 1.0 } else { 0.0 }, d)
            })
            .collect();
        if keep.iter().all(|&k| k == 1.0) {
            return Ok(out);
        }
        let keep = graph.constant(vec![rows, d], keep)?;
        graph.mul(out, keep)
    }

    /// Sparse encoding over the vocabulary. `[B, V]`, elementwise >= 0.
    pub fn encode_sparse(&self, graph: &mut Graph, bound: &BoundParams, tower: Tower, tokens: Var, mask: &[f64]) -> Result<Var> {
        if self.config.kind != EncoderKind::Sparse {
            return Err(Error::invalid("encode_sparse on a dense model"));
        }
        let p = self.prefix(tower);
        let h = self.mlp(graph, bound, tower, tokens)?;
        let proj = if self.config.tied_projection {
            let e = self.param(bound, &format!("{p}embedding"));
            graph.transpose(e)?
        } else {
            self.param(bound, &format!("{p}output.weight"))
        };
        let logits = graph.matmul(h, proj)?;
        let bias = self.param(bound, &format!("{p}output.bias"));
        let logits = graph.add_row(logits, bias)?;
        let act = graph.relu(logits);
        let act = graph.log1p(act);
        graph.masked_max_pool(act, mask)
    }

    pub fn encode(&self, graph: &mut Graph, bound: &BoundParams, tower: Tower, emb: &Embedded) -> Result<Var> {
        self.encode_with(graph, bound, tower, emb.var, &emb.mask)
    }

    pub fn encode_with(&self, graph: &mut Graph, bound: &BoundParams, tower: Tower, tokens: Var, mask: &[f64]) -> Result<Var> {
        match self.config.kind {
            EncoderKind::Dense => self.encode_dense(graph, bound, tower, tokens, mask),
            EncoderKind::Sparse => self.encode_sparse(graph, bound, tower, tokens, mask),
        }
    }

    /// Gradient-free encoding of many sequences, `chunk` rows at a time.
    pub fn encode_texts(&self, tower: Tower, seqs: &[&[u32]], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        let mut frozen = self.params.clone();
        frozen.iter_mut().for_each(|(_, t)| t.set_requires_grad(false));
        for part in seqs.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let bound = frozen.bind(&mut g);
            let padded = Padded::new(part);
            let emb = self.embed_tokens(&mut g, &bound, tower, &padded)?;
            let enc = self.encode(&mut g, &bound, tower, &emb)?;
            let dim = self.config.output_dim();
            out.extend(g.value(enc).chunks(dim).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

/// Dot-product score matrix `q [B, D] x d [M, D]^T -> [B, M]`.
pub fn score(graph: &mut Graph, q: Var, d: Var) -> Result<Var> {
    let (sq, sd) = (graph.shape(q).to_vec(), graph.shape(d).to_vec());
    if sq.len() != 2 || sd.len() != 2 || sq[1] != sd[1] {
        return Err(Error::shape("score", &sq, &sd));
    }
    let dt = graph.transpose(d)?;
    graph.matmul(q, dt)
}

/// FLOPS regularizer `sum_j (mean_i w_ij)^2` of a `[B, V]` batch.
pub fn flops_value(graph: &mut Graph, w: Var) -> Result<Var> {
    let s = graph.shape(w).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::shape("flops_value", &s, &[]));
    }
    let avg = graph.constant(vec![1, s[0]], vec![1.0 / s[0] as f64; s[0]])?;
    let means = graph.matmul(avg, w)?;
    let sq = graph.mul(means, means)?;
    Ok(graph.sum(sq))
}
