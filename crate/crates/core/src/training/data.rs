use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::read_jsonl;
use crate::error::{Error, Result};
use crate::tokenizer::{split_words, BpeModel, TokenizedText};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub q: String,
    pub p: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalExample {
    pub q: String,
    pub p: String,
    pub negs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsExample {
    pub q: String,
    pub p: String,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Pair,
    Retrieval,
    Sts,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskRecords {
    Pair(Vec<PairExample>),
    Retrieval(Vec<RetrievalExample>),
    Sts(Vec<StsExample>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub weight: f64,
    pub records: TaskRecords,
}

impl TaskDataset {
    pub fn new(name: impl Into<String>, weight: f64, records: TaskRecords) -> Result<Self> {
        let name = name.into();
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::Config(format!("{name}: weight must be positive, got {weight}")));
        }
        let len = match &records {
            TaskRecords::Pair(r) => r.len(),
            TaskRecords::Retrieval(r) => {
                if r.iter().any(|x| x.negs.is_empty()) {
                    return Err(Error::Input(format!(
                        "{name}: every retrieval record needs at least one negative"
                    )));
                }
                r.len()
            }
            TaskRecords::Sts(r) => {
                if let Some(x) = r.iter().find(|x| !(0.0..=1.0).contains(&x.score)) {
                    return Err(Error::Input(format!(
                        "{name}: STS score {} outside [0, 1] after rescaling",
                        x.score
                    )));
                }
                r.len()
            }
        };
        if len == 0 {
            return Err(Error::EmptyInput(format!("{name}: dataset has no records")));
        }
        Ok(TaskDataset {
            name,
            weight,
            records,
        })
    }

    pub fn kind(&self) -> TaskKind {
        match self.records {
            TaskRecords::Pair(_) => TaskKind::Pair,
            TaskRecords::Retrieval(_) => TaskKind::Retrieval,
            TaskRecords::Sts(_) => TaskKind::Sts,
        }
    }

    pub fn len(&self) -> usize {
        match &self.records {
            TaskRecords::Pair(r) => r.len(),
            TaskRecords::Retrieval(r) => r.len(),
            TaskRecords::Sts(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where a dataset lives and how to interpret it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: TaskKind,
    pub path: String,
    #[serde(default = "one")]
    pub weight: f64,
    /// Ceiling of the raw STS scale; scores are divided by it on load.
    #[serde(default)]
    pub score_max: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl DatasetManifest {
    /// Loads the file; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<TaskDataset> {
        let path = base.join(&self.path);
        let records = match self.kind {
            TaskKind::Pair => TaskRecords::Pair(read_jsonl(&path)?),
            TaskKind::Retrieval => TaskRecords::Retrieval(read_jsonl(&path)?),
            TaskKind::Sts => {
                let ceiling = self.score_max.unwrap_or(5.0);
                if !(ceiling > 0.0) {
                    return Err(Error::Config(format!(
                        "{}: score_max must be positive",
                        self.name
                    )));
                }
                let mut rows: Vec<StsExample> = read_jsonl(&path)?;
                rows.iter_mut().for_each(|r| r.score /= ceiling);
                TaskRecords::Sts(rows)
            }
        };
        TaskDataset::new(self.name.clone(), self.weight, records)
    }
}

/// Weighted categorical draw over datasets; returns the index.
pub fn sample_task<R: Rng>(datasets: &[TaskDataset], rng: &mut R) -> Result<usize> {
    if datasets.is_empty() {
        return Err(Error::Config("no datasets to sample from".into()));
    }
    let weights: Vec<f64> = datasets.iter().map(|d| d.weight).collect();
    sample_weighted(&weights, rng)
}

pub fn sample_weighted<R: Rng>(weights: &[f64], rng: &mut R) -> Result<usize> {
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::Config("sampling weights must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(weights.len() - 1)
}

/// Sequential epochs over `0..n`, reshuffled every epoch. A batch never
/// spans two epochs, so it contains no repeated item.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = EpochSampler {
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    /// Next `min(k, n)` indices.
    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let k = k.min(self.order.len());
        if self.pos + k > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let out = self.order[self.pos..self.pos + k].to_vec();
        self.pos += k;
        out
    }
}

/// Tokenized MLM examples of one language, with a held-out split.
#[derive(Clone, Debug, Default)]
pub struct MlmCorpus {
    pub name: String,
    pub train: Vec<TokenizedText>,
    pub held_out: Vec<TokenizedText>,
}

/// Splits a tokenized text into pieces of at most `max_tokens` tokens at word
/// boundaries; a single word longer than the limit is cut.
pub fn chunk_words(tok: &TokenizedText, max_tokens: usize) -> Vec<TokenizedText> {
    let mut out = Vec::new();
    let mut cur = TokenizedText::default();
    for &(s, e) in &tok.word_spans {
        let e = e.min(s + max_tokens);
        if !cur.ids.is_empty() && cur.ids.len() + (e - s) > max_tokens {
            out.push(std::mem::take(&mut cur));
        }
        let start = cur.ids.len();
        cur.ids.extend_from_slice(&tok.ids[s..e]);
        cur.word_spans.push((start, cur.ids.len()));
    }
    if !cur.ids.is_empty() {
        out.push(cur);
    }
    out
}

impl MlmCorpus {
    /// One document per non-empty line. A seeded `held_out_frac` of the
    /// documents (at least one when there are two or more) is set aside.
    pub fn from_text(
        name: &str,
        tokenizer: &BpeModel,
        text: &str,
        max_tokens: usize,
        held_out_frac: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut docs: Vec<&str> = text
            .lines()
            .filter(|l| split_words(l).next().is_some())
            .collect();
        if docs.is_empty() {
            return Err(Error::EmptyInput(format!("{name}: corpus has no text")));
        }
        docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut held = (docs.len() as f64 * held_out_frac).round() as usize;
        if docs.len() > 1 {
            held = held.clamp(1, docs.len() - 1);
        } else {
            held = 0;
        }
        let split = docs.len() - held;
        let chunked = |ds: &[&str]| -> Vec<TokenizedText> {
            ds.iter()
                .flat_map(|d| chunk_words(&tokenizer.encode(d), max_tokens))
                .collect()
        };
        Ok(MlmCorpus {
            name: name.to_string(),
            train: chunked(&docs[..split]),
            held_out: chunked(&docs[split..]),
        })
    }
}
