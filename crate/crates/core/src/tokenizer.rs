//! Byte-level BPE shared by two languages.
//!
//! Ids `0..5` are the special tokens, `5..261` the 256 byte symbols, and every
//! merge appends one id in rank order. Text is split into words on Unicode
//! whitespace; every word except the first of a text carries a leading space
//! byte, so decoding reproduces the input up to whitespace normalization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

const SPECIAL_NAMES: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
const NUM_SPECIALS: usize = SPECIAL_NAMES.len();
const BYTE_OFFSET: u32 = NUM_SPECIALS as u32;
/// Specials plus the byte alphabet.
pub const BASE_VOCAB: usize = NUM_SPECIALS + 256;

const FORMAT_HEADER: &str = "biembed-bpe 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl Default for Specials {
    fn default() -> Self {
        Specials {
            pad: PAD,
            unk: UNK,
            cls: CLS,
            sep: SEP,
            mask: MASK,
        }
    }
}

/// Token ids of one text plus the half-open token range of each word.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    pub word_spans: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BpeModel {
    /// Byte content of every non-special id; empty for specials.
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    vocab: HashMap<Vec<u8>, u32>,
    specials: Specials,
    target_vocab_size: usize,
}

/// Diagnostics of a training run: pair frequency of each merge when it was
/// chosen.
#[derive(Clone, Debug, Default)]
pub struct TrainStats {
    pub merge_counts: Vec<usize>,
    pub chars_per_corpus: usize,
}

/// Splits on Unicode whitespace. Punctuation stays attached to its word.
pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Whitespace-normalized form that `decode(encode(x))` reproduces.
pub fn normalize(text: &str) -> String {
    split_words(text).collect::<Vec<_>>().join(" ")
}

fn word_bytes(word: &str, first: bool) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(word.len() + 1);
    if !first {
        bytes.push(b' ');
    }
    bytes.extend_from_slice(word.as_bytes());
    bytes
}

/// Leading `budget` characters of `text`, cut back to a whitespace boundary
/// so no partial word is counted.
fn char_prefix(text: &str, budget: usize) -> &str {
    match text.char_indices().nth(budget) {
        None => text,
        Some((cut, _)) => {
            let head = &text[..cut];
            let next_is_space = text[cut..].starts_with(char::is_whitespace);
            if next_is_space {
                head
            } else {
                head.rfind(char::is_whitespace).map_or("", |i| &head[..i])
            }
        }
    }
}

/// Trains on two corpora, each contributing the same number of characters
/// (the shorter corpus's length). Merges are chosen greedily by pair count,
/// ties broken by the smaller `(left, right)` id pair.
pub fn train_bpe(corpus_a: &str, corpus_b: &str, target_vocab_size: usize) -> Result<BpeModel> {
    train_bpe_with_stats(corpus_a, corpus_b, target_vocab_size).map(|(m, _)| m)
}

pub fn train_bpe_with_stats(
    corpus_a: &str,
    corpus_b: &str,
    target_vocab_size: usize,
) -> Result<(BpeModel, TrainStats)> {
    if corpus_a.trim().is_empty() || corpus_b.trim().is_empty() {
        return Err(Error::EmptyInput("tokenizer corpora must be non-empty".into()));
    }
    if target_vocab_size <= BASE_VOCAB {
        return Err(Error::Config(format!(
            "target_vocab_size {target_vocab_size} must exceed the {BASE_VOCAB} base symbols"
        )));
    }
    let budget = corpus_a.chars().count().min(corpus_b.chars().count());

    let mut counts: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
    for corpus in [corpus_a, corpus_b] {
        for line in char_prefix(corpus, budget).lines() {
            for (i, w) in split_words(line).enumerate() {
                *counts.entry(word_bytes(w, i == 0)).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(Vec<u32>, usize)> = counts
        .into_iter()
        .map(|(bytes, c)| (bytes.iter().map(|&b| BYTE_OFFSET + b as u32).collect(), c))
        .collect();

    let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += c;
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut model = BpeModel::base(target_vocab_size);
    let mut stats = TrainStats {
        merge_counts: Vec::new(),
        chars_per_corpus: budget,
    };
    while model.tokens.len() < target_vocab_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)))
            .map(|(&p, &c)| (p, c));
        let Some((pair, count)) = best else { break };
        let new_id = model.push_merge(pair);
        stats.merge_counts.push(count);

        let mut affected: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            for p in syms.windows(2) {
                let key = (p[0], p[1]);
                if let Some(v) = pair_counts.get_mut(&key) {
                    *v -= *c;
                }
            }
            *syms = merge_pair(syms, pair, new_id);
            for p in syms.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() += *c;
                where_.entry(key).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }
    Ok((model, stats))
}

fn merge_pair(syms: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

impl BpeModel {
    fn base(target_vocab_size: usize) -> Self {
        let mut tokens = vec![Vec::new(); NUM_SPECIALS];
        let mut vocab = HashMap::new();
        for b in 0..=255u8 {
            vocab.insert(vec![b], tokens.len() as u32);
            tokens.push(vec![b]);
        }
        BpeModel {
            tokens,
            merges: Vec::new(),
            ranks: HashMap::new(),
            vocab,
            specials: Specials::default(),
            target_vocab_size,
        }
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let id = self.tokens.len() as u32;
        let mut bytes = self.tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.tokens[pair.1 as usize]);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        // Distinct merge sequences can spell the same bytes; keep the first id.
        self.vocab.entry(bytes.clone()).or_insert(id);
        self.tokens.push(bytes);
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn target_vocab_size(&self) -> usize {
        self.target_vocab_size
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Byte content of a non-special token.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        if self.is_special(id) {
            return None;
        }
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Display form of a token: sentinel for specials, lossy UTF-8 otherwise.
    pub fn token_str(&self, id: u32) -> Option<String> {
        if self.is_special(id) {
            return Some(SPECIAL_NAMES[id as usize].to_string());
        }
        self.token_bytes(id)
            .map(|b| String::from_utf8_lossy(b).into_owned())
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.vocab.get(bytes).copied()
    }

    fn encode_word(&self, bytes: &[u8]) -> Vec<u32> {
        let mut syms: Vec<u32> = bytes.iter().map(|&b| BYTE_OFFSET + b as u32).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            let new_id = BASE_VOCAB as u32 + rank;
            syms = merge_pair(&syms, pair, new_id);
        }
        syms
    }

    /// Encodes `text`, applying merges in rank order within each word.
    pub fn encode(&self, text: &str) -> TokenizedText {
        let mut out = TokenizedText::default();
        for (i, word) in split_words(text).enumerate() {
            let start = out.ids.len();
            out.ids.extend(self.encode_word(&word_bytes(word, i == 0)));
            out.word_spans.push((start, out.ids.len()));
        }
        out
    }

    /// Concatenates token bytes; specials render as their sentinel names.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id as usize >= self.tokens.len() {
                return Err(Error::IdRange {
                    id: id as usize,
                    size: self.tokens.len(),
                });
            }
            if self.is_special(id) {
                bytes.extend_from_slice(SPECIAL_NAMES[id as usize].as_bytes());
            } else {
                bytes.extend_from_slice(&self.tokens[id as usize]);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Text serialization; see `docs/formats.md`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_HEADER}");
        let _ = writeln!(s, "target_vocab_size {}", self.target_vocab_size);
        for (id, name) in SPECIAL_NAMES.iter().enumerate() {
            let _ = writeln!(s, "special {name} {id}");
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        let _ = writeln!(s, "vocab {}", self.tokens.len());
        for id in 0..self.tokens.len() {
            if self.is_special(id as u32) {
                let _ = writeln!(s, "{id} {}", SPECIAL_NAMES[id]);
            } else {
                let hex: String = self.tokens[id].iter().map(|b| format!("{b:02x}")).collect();
                let _ = writeln!(s, "{id} {hex}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| format!("missing {what}"));
        if next("header")? != FORMAT_HEADER {
            return Err("unrecognized header".into());
        }
        let target = parse_kv(next("target")?, "target_vocab_size")?;
        for (id, name) in SPECIAL_NAMES.iter().enumerate() {
            let want = format!("special {name} {id}");
            if next("special")? != want {
                return Err(format!("expected `{want}`"));
            }
        }
        let n_merges = parse_kv(next("merges")?, "merges")?;
        let mut model = BpeModel::base(target);
        for _ in 0..n_merges {
            let line = next("merge")?;
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| format!("bad merge line `{line}`"))?;
            let l: u32 = l.parse().map_err(|e| format!("bad merge `{line}`: {e}"))?;
            let r: u32 = r.parse().map_err(|e| format!("bad merge `{line}`: {e}"))?;
            let known = model.tokens.len() as u32;
            if l >= known || r >= known || (l as usize) < NUM_SPECIALS || (r as usize) < NUM_SPECIALS
            {
                return Err(format!("merge `{line}` references an underivable token"));
            }
            model.push_merge((l, r));
        }
        let n_vocab = parse_kv(next("vocab")?, "vocab")?;
        if n_vocab != model.tokens.len() {
            return Err(format!(
                "vocab lists {n_vocab} tokens but merges derive {}",
                model.tokens.len()
            ));
        }
        for id in 0..n_vocab {
            let line = next("vocab entry")?;
            let (lid, body) = line
                .split_once(' ')
                .ok_or_else(|| format!("bad vocab line `{line}`"))?;
            if lid.parse::<usize>().ok() != Some(id) {
                return Err(format!("vocab ids not contiguous at `{line}`"));
            }
            let consistent = if id < NUM_SPECIALS {
                body == SPECIAL_NAMES[id]
            } else {
                decode_hex(body).as_deref() == Some(model.tokens[id].as_slice())
            };
            if !consistent {
                return Err(format!("vocab entry `{line}` disagrees with merges"));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::parse(path, e))
    }
}

fn parse_kv(line: &str, key: &str) -> std::result::Result<usize, String> {
    line.strip_prefix(key)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("expected `{key} <n>`, got `{line}`"))
}

fn decode_hex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}
