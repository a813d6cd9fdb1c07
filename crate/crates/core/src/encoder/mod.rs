//! BERT-style encoder with ALiBi attention biases, optional flattened QK
//! layer normalization, a tied MLM head and mean pooling.
//!
//! Blocks are post-norm. There are no position embeddings, token-type
//! embeddings or NSP head: position enters only through the ALiBi bias, which
//! is what lets a model trained on short sequences run on longer ones.

mod attention;
mod checkpoint;

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use attention::{
    alibi_bias, alibi_slope, attention_bias, attention_layer, ffn_layer, AttentionOutput,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, ScalarWidth};

use crate::error::{Error, Result, TensorError};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{BpeModel, CLS, PAD, SEP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Longest sequence seen in training. Inference may exceed it.
    pub trained_max_len: usize,
    pub qk_norm: bool,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
    /// Standard deviation of the normal initializer for weight matrices.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 256,
            vocab_size: 4096,
            trained_max_len: 128,
            qk_norm: false,
            dropout_rate: 0.0,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    /// The 12-layer, 768-wide base configuration with the larger of the two
    /// bilingual vocabularies.
    pub fn base_bilingual() -> Self {
        EncoderConfig {
            layers: 12,
            hidden_dim: 768,
            heads: 12,
            ffn_dim: 3072,
            vocab_size: 61_056,
            trained_max_len: 512,
            qk_norm: false,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("trained_max_len", self.trained_max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.heads ({}) must divide model.hidden_dim ({})",
                self.heads, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("model.dropout_rate must be in [0, 1)".into()));
        }
        if self.layer_norm_eps <= 0.0 || self.init_std <= 0.0 {
            return Err(Error::Config(
                "model.layer_norm_eps and model.init_std must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Parameter names and shapes; this is the checkpoint schema.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.hidden_dim, self.ffn_dim, self.vocab_size);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![v, d]),
            ("embeddings.norm.gain".to_string(), vec![d]),
            ("embeddings.norm.bias".to_string(), vec![d]),
            ("mlm.bias".to_string(), vec![v]),
        ];
        for l in 0..self.layers {
            let p = format!("layers.{l}");
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{p}.attn.{proj}.weight"), vec![d, d]));
                out.push((format!("{p}.attn.{proj}.bias"), vec![d]));
            }
            if self.qk_norm {
                for n in ["q_norm", "k_norm"] {
                    out.push((format!("{p}.attn.{n}.gain"), vec![d]));
                    out.push((format!("{p}.attn.{n}.bias"), vec![d]));
                }
            }
            out.push((format!("{p}.ffn.in.weight"), vec![d, f]));
            out.push((format!("{p}.ffn.in.bias"), vec![f]));
            out.push((format!("{p}.ffn.out.weight"), vec![f, d]));
            out.push((format!("{p}.ffn.out.bias"), vec![d]));
            for n in ["attn_norm", "ffn_norm"] {
                out.push((format!("{p}.{n}.gain"), vec![d]));
                out.push((format!("{p}.{n}.bias"), vec![d]));
            }
        }
        out.sort();
        out
    }
}

/// Token ids of a padded batch, row-major `[batch, seq]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Right-pads every sequence with `PAD` to the longest one.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || seq == 0 {
            return Err(Error::EmptyInput("batch has no tokens".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            if s.is_empty() {
                return Err(Error::EmptyInput("sequence with no tokens".into()));
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD).take(seq - s.len()));
            mask.extend(std::iter::repeat(true).take(s.len()));
            mask.extend(std::iter::repeat(false).take(seq - s.len()));
        }
        Ok(Batch {
            ids,
            mask,
            batch: seqs.len(),
            seq,
        })
    }

    /// Single sequence with an explicit padding mask.
    pub fn single(ids: &[u32], mask: &[bool]) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::Input(format!(
                "{} ids but {} mask entries",
                ids.len(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyInput("every position is padding".into()));
        }
        Ok(Batch {
            ids: ids.to_vec(),
            mask: mask.to_vec(),
            batch: 1,
            seq: ids.len(),
        })
    }
}

/// `[CLS] tokens [SEP]`, truncated so the whole frame fits `max_len`.
pub fn frame_ids(tokens: &[u32], max_len: usize) -> Vec<u32> {
    let body = max_len.saturating_sub(2).min(tokens.len());
    let mut out = Vec::with_capacity(body + 2);
    out.push(CLS);
    out.extend_from_slice(&tokens[..body]);
    out.push(SEP);
    out
}

/// Tokenizes and frames a batch of texts.
pub fn texts_to_batch(tokenizer: &BpeModel, texts: &[&str], max_len: usize) -> Result<Batch> {
    let seqs: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| frame_ids(&tokenizer.encode(t).ids, max_len))
        .collect();
    Batch::from_sequences(&seqs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: BTreeMap<String, Tensor>,
}

/// Model parameters registered on a tape, plus the dropout state of one
/// forward pass.
pub struct Bound<'t> {
    config: EncoderConfig,
    vars: BTreeMap<String, Var<'t>>,
    tape: &'t Tape,
    dropout: Option<RefCell<ChaCha8Rng>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from model"))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var<'t>> {
        &self.vars
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Inverted dropout when training with a positive rate; identity otherwise.
    pub fn dropout(&self, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let rate = self.config.dropout_rate;
        let Some(rng) = self.dropout.as_ref().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let mut rng = rng.borrow_mut();
        let keep = 1.0 / (1.0 - rate);
        let shape = x.shape();
        let n = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        x.mul(self.tape.constant(Tensor::new(shape, mask)?))
    }
}

impl EncoderModel {
    /// Fresh model: normal(0, init_std) weights, zero biases, unit gains.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).expect("positive std");
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?.with_requires_grad(true));
        }
        Ok(EncoderModel { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers parameters on `tape`. `dropout_seed` enables dropout.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool, dropout_seed: Option<u64>) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let var = if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), var)
            })
            .collect();
        Bound {
            config: self.config.clone(),
            vars,
            tape,
            dropout: dropout_seed.map(|s| RefCell::new(ChaCha8Rng::seed_from_u64(s))),
        }
    }

    /// Binds caller-provided variables (one per parameter name) instead of
    /// copying the stored parameters.
    pub fn bind_vars<'t>(&self, tape: &'t Tape, vars: BTreeMap<String, Var<'t>>) -> Bound<'t> {
        Bound {
            config: self.config.clone(),
            vars,
            tape,
            dropout: None,
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(Error::IdRange {
                id: id as usize,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Final-layer hidden states `[batch, seq, hidden]`.
    pub fn forward_hidden<'t>(&self, bound: &Bound<'t>, batch: &Batch) -> Result<Var<'t>> {
        self.check_ids(&batch.ids)?;
        let cfg = &self.config;
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let mut x = bound
            .get("embeddings.token")
            .gather_rows(&ids)?
            .reshape(&[batch.batch, batch.seq, cfg.hidden_dim])?;
        x = x.layer_norm(
            bound.get("embeddings.norm.gain"),
            bound.get("embeddings.norm.bias"),
            cfg.layer_norm_eps,
        )?;
        x = bound.dropout(x)?;
        let bias = attention_bias(batch, cfg.heads);
        for layer in 0..cfg.layers {
            x = attention_layer(x, bound, layer, &bias)?.output;
            x = ffn_layer(x, bound, layer)?;
        }
        Ok(x)
    }

    /// MLM logits `[rows, vocab]` for the selected flat positions of
    /// `hidden` (`batch * seq` rows).
    pub fn mlm_logits<'t>(
        &self,
        bound: &Bound<'t>,
        hidden: Var<'t>,
        positions: &[usize],
    ) -> Result<Var<'t>> {
        let d = self.config.hidden_dim;
        let rows = hidden.shape().iter().product::<usize>() / d;
        let flat = hidden.reshape(&[rows, d])?;
        let picked = flat.gather_rows(positions)?;
        let emb_t = bound.get("embeddings.token").transpose()?;
        Ok(picked.matmul(emb_t)?.add(bound.get("mlm.bias"))?)
    }

    /// Logits for every position of one sequence, `[seq, vocab]`.
    pub fn forward_mlm(&self, ids: &[u32], pad_mask: &[bool]) -> Result<Tensor> {
        let batch = Batch::single(ids, pad_mask)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false, None);
        let hidden = self.forward_hidden(&bound, &batch)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        Ok(self.mlm_logits(&bound, hidden, &positions)?.value())
    }

    /// Mean of hidden states over non-pad positions, `[batch, hidden]`.
    pub fn pool<'t>(&self, bound: &Bound<'t>, hidden: Var<'t>, batch: &Batch) -> Result<Var<'t>> {
        let mask: Vec<f64> = batch.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let counts: Vec<f64> = mask.chunks(batch.seq).map(|r| r.iter().sum()).collect();
        if counts.iter().any(|&c| c == 0.0) {
            return Err(Error::EmptyInput("sequence with only padding".into()));
        }
        let tape = bound.tape();
        let mask = tape.constant(Tensor::new(vec![batch.batch, batch.seq, 1], mask)?);
        let counts = tape.constant(Tensor::new(vec![batch.batch, 1], counts)?);
        Ok(hidden.mul(mask)?.sum_axis(1, false)?.div(counts)?)
    }

    /// Pooled embeddings `[batch, hidden]` recorded on `bound`'s tape.
    pub fn embed_batch<'t>(&self, bound: &Bound<'t>, batch: &Batch) -> Result<Var<'t>> {
        if batch.mask.chunks(batch.seq).any(|r| !r.iter().any(|&m| m)) {
            return Err(Error::EmptyInput("sequence with only padding".into()));
        }
        let hidden = self.forward_hidden(bound, batch)?;
        self.pool(bound, hidden, batch)
    }

    /// Unnormalized mean-pooled embedding of one sequence.
    pub fn embed(&self, ids: &[u32], pad_mask: &[bool]) -> Result<Vec<f64>> {
        let batch = Batch::single(ids, pad_mask)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false, None);
        Ok(self.embed_batch(&bound, &batch)?.value().into_data())
    }

    /// Embeds texts in chunks of `chunk` sequences, returning one row each.
    pub fn embed_texts(
        &self,
        tokenizer: &BpeModel,
        texts: &[&str],
        max_len: usize,
        chunk: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let d = self.config.hidden_dim;
        // Padding does not leak into pooled outputs, so chunks are independent
        // and can be embedded in parallel without changing any value.
        let groups: Vec<Vec<Vec<f64>>> = texts
            .par_chunks(chunk.max(1))
            .map(|group| {
                let batch = texts_to_batch(tokenizer, group, max_len)?;
                let tape = Tape::new();
                let bound = self.bind(&tape, false, None);
                let emb = self.embed_batch(&bound, &batch)?.value();
                Ok(emb.data().chunks(d).map(<[f64]>::to_vec).collect())
            })
            .collect::<Result<_>>()?;
        Ok(groups.into_iter().flatten().collect())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds tape gradients into each parameter's grad buffer.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_>, grads: &crate::tensor::Gradients) {
        for (name, var) in bound.vars() {
            if let (Some(g), Some(p)) = (grads.get(*var), self.params.get_mut(name)) {
                p.accumulate_grad(g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

/// Anything that maps texts to fixed-width vectors.
pub trait TextEmbedder: Sync {
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
}

/// An encoder paired with its tokenizer.
#[derive(Clone, Copy)]
pub struct EncoderEmbedder<'a> {
    pub model: &'a EncoderModel,
    pub tokenizer: &'a BpeModel,
    pub max_len: usize,
    pub chunk: usize,
}

impl<'a> EncoderEmbedder<'a> {
    pub fn new(model: &'a EncoderModel, tokenizer: &'a BpeModel) -> Self {
        EncoderEmbedder {
            model,
            tokenizer,
            max_len: model.config.trained_max_len,
            chunk: 32,
        }
    }
}

impl TextEmbedder for EncoderEmbedder<'_> {
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        self.model
            .embed_texts(self.tokenizer, texts, self.max_len, self.chunk)
    }
}

/// A fixed text → vector table; unknown texts are an input error.
#[derive(Clone, Debug, Default)]
pub struct LookupEmbedder {
    pub table: std::collections::HashMap<String, Vec<f64>>,
}

impl LookupEmbedder {
    pub fn insert(&mut self, text: impl Into<String>, v: Vec<f64>) {
        self.table.insert(text.into(), v);
    }
}

impl TextEmbedder for LookupEmbedder {
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(*t)
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("no embedding for {t:?}")))
            })
            .collect()
    }
}
