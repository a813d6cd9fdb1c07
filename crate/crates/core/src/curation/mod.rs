//! Pair-data curation: quality filtering, refinement, near-deduplication and
//! consistency filtering, applied in that order.

mod minhash;

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::TextEmbedder;
use crate::error::{Error, Result};
use crate::losses::cosine_sim;

pub use minhash::{fnv1a, jaccard, lsh_duplicates, shingles, MinHasher};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub q: String,
    pub p: String,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub lang: String,
}

impl PairRecord {
    pub fn new(q: impl Into<String>, p: impl Into<String>) -> Self {
        PairRecord {
            q: q.into(),
            p: p.into(),
            source: String::new(),
            lang: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub min_chars: usize,
    pub max_chars: usize,
    pub max_dup_line_frac: f64,
    pub max_dup_ngram_frac: f64,
    pub dup_ngram_n: usize,
    pub dedup_jaccard_threshold: f64,
    pub minhash_permutations: usize,
    pub lsh_bands: usize,
    pub consistency_top_k: usize,
    pub consistency_sample_size: usize,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            min_chars: 20,
            max_chars: 20_000,
            max_dup_line_frac: 0.3,
            max_dup_ngram_frac: 0.2,
            dup_ngram_n: 3,
            dedup_jaccard_threshold: 0.8,
            minhash_permutations: 128,
            lsh_bands: 32,
            consistency_top_k: 2,
            consistency_sample_size: 1000,
            seed: 0,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.min_chars > self.max_chars {
            return fail(format!(
                "min_chars {} exceeds max_chars {}",
                self.min_chars, self.max_chars
            ));
        }
        for (name, v) in [
            ("max_dup_line_frac", self.max_dup_line_frac),
            ("max_dup_ngram_frac", self.max_dup_ngram_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.dedup_jaccard_threshold > 0.0 && self.dedup_jaccard_threshold < 1.0) {
            return fail(format!(
                "dedup_jaccard_threshold must lie in (0, 1), got {}",
                self.dedup_jaccard_threshold
            ));
        }
        if self.dup_ngram_n == 0 {
            return fail("dup_ngram_n must be positive".into());
        }
        if self.lsh_bands == 0
            || self.minhash_permutations == 0
            || self.minhash_permutations % self.lsh_bands != 0
        {
            return fail(format!(
                "lsh_bands ({}) must divide minhash_permutations ({})",
                self.lsh_bands, self.minhash_permutations
            ));
        }
        if self.consistency_top_k == 0 || self.consistency_sample_size == 0 {
            return fail("consistency_top_k and consistency_sample_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    TooShort,
    TooLong,
    DupLines,
    DupNgrams,
    EmptyAfterRefine,
    NearDuplicate,
    Inconsistent,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DropReason::TooShort => "too_short",
            DropReason::TooLong => "too_long",
            DropReason::DupLines => "dup_lines",
            DropReason::DupNgrams => "dup_ngrams",
            DropReason::EmptyAfterRefine => "empty_after_refine",
            DropReason::NearDuplicate => "near_duplicate",
            DropReason::Inconsistent => "inconsistent",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop(DropReason),
}

fn nonempty_lines(text: &str) -> Vec<&str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

/// Fraction of lines that repeat an earlier line.
pub fn dup_line_fraction(text: &str) -> f64 {
    let lines = nonempty_lines(text);
    if lines.is_empty() {
        return 0.0;
    }
    let distinct: BTreeSet<&str> = lines.iter().copied().collect();
    (lines.len() - distinct.len()) as f64 / lines.len() as f64
}

/// Fraction of word `n`-grams that repeat an earlier `n`-gram.
pub fn dup_ngram_fraction(text: &str, n: usize) -> f64 {
    let words: Vec<&str> = text.split_whitespace().collect();
    if n == 0 || words.len() < n {
        return 0.0;
    }
    let grams: Vec<&[&str]> = words.windows(n).collect();
    let distinct: BTreeSet<&[&str]> = grams.iter().copied().collect();
    (grams.len() - distinct.len()) as f64 / grams.len() as f64
}

/// Checks each rule on both sides before moving on to the next rule, so the
/// reason is the first rule either side fails.
pub fn quality_filter(rec: &PairRecord, cfg: &CurationConfig) -> Verdict {
    let sides = [rec.q.as_str(), rec.p.as_str()];
    let chars = sides.map(|s| s.chars().count());
    if chars.iter().any(|&c| c < cfg.min_chars) {
        return Verdict::Drop(DropReason::TooShort);
    }
    if chars.iter().any(|&c| c > cfg.max_chars) {
        return Verdict::Drop(DropReason::TooLong);
    }
    if sides.iter().any(|s| dup_line_fraction(s) > cfg.max_dup_line_frac) {
        return Verdict::Drop(DropReason::DupLines);
    }
    if sides
        .iter()
        .any(|s| dup_ngram_fraction(s, cfg.dup_ngram_n) > cfg.max_dup_ngram_frac)
    {
        return Verdict::Drop(DropReason::DupNgrams);
    }
    Verdict::Keep
}

fn ends_sentence(line: &str) -> bool {
    let core = line.trim_end_matches(['"', '\'', ')', ']', '»', '”', '’']);
    core.ends_with(['.', '!', '?', '…', '。', '！', '？'])
}

/// Trims every line, drops one-word lines, then drops trailing unfinished
/// lines. The first remaining line is never dropped for being unfinished, so
/// single-line queries without final punctuation survive.
pub fn refine_text(text: &str) -> String {
    let mut lines: Vec<&str> = nonempty_lines(text)
        .into_iter()
        .filter(|l| l.split_whitespace().nth(1).is_some())
        .collect();
    while lines.len() > 1 && !ends_sentence(lines[lines.len() - 1]) {
        lines.pop();
    }
    lines.join("\n")
}

/// Refines both sides; `None` signals that a side was emptied.
pub fn refine(rec: &PairRecord) -> Option<PairRecord> {
    let q = refine_text(&rec.q);
    let p = refine_text(&rec.p);
    if q.is_empty() || p.is_empty() {
        return None;
    }
    Some(PairRecord {
        q,
        p,
        source: rec.source.clone(),
        lang: rec.lang.clone(),
    })
}

/// Shingle set of a whole pair.
pub fn record_shingles(rec: &PairRecord) -> BTreeSet<u64> {
    shingles(&format!("{}\n{}", rec.q, rec.p), 3)
}

/// Flags records that are near-duplicates of an earlier record.
pub fn near_duplicate_flags(records: &[PairRecord], cfg: &CurationConfig) -> Vec<bool> {
    let sets: Vec<BTreeSet<u64>> = records.par_iter().map(record_shingles).collect();
    lsh_duplicates(
        &sets,
        cfg.minhash_permutations,
        cfg.lsh_bands,
        cfg.dedup_jaccard_threshold,
        cfg.seed,
    )
}

/// Keeps the first record of every near-duplicate cluster, in input order.
pub fn near_dedup(records: Vec<PairRecord>, cfg: &CurationConfig) -> Vec<PairRecord> {
    let flags = near_duplicate_flags(&records, cfg);
    records
        .into_iter()
        .zip(flags)
        .filter_map(|(r, dup)| (!dup).then_some(r))
        .collect()
}

/// The fixed candidate sample shared by every record.
pub fn consistency_sample(n: usize, cfg: &CurationConfig) -> Result<Vec<usize>> {
    if cfg.consistency_sample_size > n {
        return Err(Error::Config(format!(
            "consistency_sample_size {} exceeds the {n} available records",
            cfg.consistency_sample_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picked = sample(&mut rng, n, cfg.consistency_sample_size).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Candidate pool for record `i`: its own passage plus the first
/// `sample_size - 1` sampled passages other than it.
pub fn candidate_pool(i: usize, sampled: &[usize]) -> Vec<usize> {
    let mut pool = vec![i];
    pool.extend(
        sampled
            .iter()
            .copied()
            .filter(|&j| j != i)
            .take(sampled.len().saturating_sub(1)),
    );
    pool
}

/// 1-based rank of `p_i` among its candidate pool by cosine to `q_i`, ties
/// broken by record index.
pub fn consistency_ranks(
    q_embs: &[Vec<f64>],
    p_embs: &[Vec<f64>],
    sampled: &[usize],
) -> Result<Vec<usize>> {
    (0..q_embs.len())
        .into_par_iter()
        .map(|i| {
            let own = cosine_sim(&q_embs[i], &p_embs[i])?;
            let mut rank = 1;
            for j in candidate_pool(i, sampled).into_iter().skip(1) {
                let s = cosine_sim(&q_embs[i], &p_embs[j])?;
                if s > own || (s == own && j < i) {
                    rank += 1;
                }
            }
            Ok(rank)
        })
        .collect()
}

/// Keep flags from round-trip retrieval of each passage for its query.
pub fn consistency_flags(
    records: &[PairRecord],
    embedder: &dyn TextEmbedder,
    cfg: &CurationConfig,
) -> Result<Vec<bool>> {
    let sampled = consistency_sample(records.len(), cfg)?;
    let qs: Vec<&str> = records.iter().map(|r| r.q.as_str()).collect();
    let ps: Vec<&str> = records.iter().map(|r| r.p.as_str()).collect();
    let q_embs = embedder.embed_texts(&qs)?;
    let p_embs = embedder.embed_texts(&ps)?;
    Ok(consistency_ranks(&q_embs, &p_embs, &sampled)?
        .into_iter()
        .map(|r| r <= cfg.consistency_top_k)
        .collect())
}

pub fn consistency_filter(
    records: Vec<PairRecord>,
    embedder: &dyn TextEmbedder,
    cfg: &CurationConfig,
) -> Result<Vec<PairRecord>> {
    let keep = consistency_flags(&records, embedder, cfg)?;
    Ok(records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect())
}

/// One dropped input record; `line` is 1-based in the input file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropEntry {
    pub line: usize,
    pub reason: DropReason,
}

#[derive(Clone, Debug, Default)]
pub struct CurationOutput {
    pub kept: Vec<PairRecord>,
    pub dropped: Vec<DropEntry>,
}

/// Runs every stage. Consistency filtering is skipped without an embedder
/// or when fewer records remain than the candidate sample needs.
pub fn run_pipeline(
    records: Vec<PairRecord>,
    embedder: Option<&dyn TextEmbedder>,
    cfg: &CurationConfig,
) -> Result<CurationOutput> {
    cfg.validate()?;
    let mut dropped = Vec::new();
    let staged: Vec<(usize, std::result::Result<PairRecord, DropReason>)> = records
        .into_par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let out = match quality_filter(&rec, cfg) {
                Verdict::Drop(reason) => Err(reason),
                Verdict::Keep => refine(&rec).ok_or(DropReason::EmptyAfterRefine),
            };
            (i + 1, out)
        })
        .collect();
    let mut lines = Vec::new();
    let mut survivors = Vec::new();
    for (line, out) in staged {
        match out {
            Ok(rec) => {
                lines.push(line);
                survivors.push(rec);
            }
            Err(reason) => dropped.push(DropEntry { line, reason }),
        }
    }

    let dup = near_duplicate_flags(&survivors, cfg);
    let (mut lines_k, mut kept) = (Vec::new(), Vec::new());
    for ((line, rec), d) in lines.into_iter().zip(survivors).zip(dup) {
        if d {
            dropped.push(DropEntry {
                line,
                reason: DropReason::NearDuplicate,
            });
        } else {
            lines_k.push(line);
            kept.push(rec);
        }
    }

    if let Some(embedder) = embedder {
        if kept.len() >= cfg.consistency_sample_size {
            let flags = consistency_flags(&kept, embedder, cfg)?;
            let mut out = Vec::new();
            for ((line, rec), k) in lines_k.into_iter().zip(kept).zip(flags) {
                if k {
                    out.push(rec);
                } else {
                    dropped.push(DropEntry {
                        line,
                        reason: DropReason::Inconsistent,
                    });
                }
            }
            kept = out;
        } else {
            log::warn!(
                "consistency filter skipped: {} records, sample size {}",
                kept.len(),
                cfg.consistency_sample_size
            );
        }
    }
    dropped.sort_by_key(|d| d.line);
    Ok(CurationOutput { kept, dropped })
}

/// Reads one JSON object per line, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
