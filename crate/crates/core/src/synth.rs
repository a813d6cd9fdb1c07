//! Seeded synthetic corpora and tasks: two artificial languages with
//! disjoint syllable inventories, patterned MLM text, topic-key pairs,
//! retrieval rows with hard negatives, graded STS pairs and planted
//! near-duplicate documents.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{write_jsonl, PairRecord};
use crate::error::{Error, Result};
use crate::eval::{Qrels, RetrievalTask, StsTask};
use crate::training::{Lang, PairExample, RetrievalExample, StsExample};

const KEYS: usize = 240;
const POLARITY: usize = 4;

/// Word list of one synthetic language, partitioned into topic keys,
/// polarity markers and filler.
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub lang: Lang,
    pub keys: Vec<String>,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub filler: Vec<String>,
}

fn syllable(lang: Lang, rng: &mut ChaCha8Rng) -> String {
    let (onsets, nuclei, codas): (&[&str], &[&str], &[&str]) = match lang {
        Lang::A => (&["p", "t", "k", "b", "d", "g", "f", "h"], &["a", "e", "i", "o", "u"], &[""]),
        Lang::B => (
            &["m", "n", "l", "r", "s", "v", "z", "sch"],
            &["ä", "ö", "ü", "a", "y"],
            &["", "n", "r"],
        ),
    };
    format!(
        "{}{}{}",
        onsets.choose(rng).unwrap(),
        nuclei.choose(rng).unwrap(),
        codas.choose(rng).unwrap()
    )
}

impl Lexicon {
    pub fn new(lang: Lang, filler: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (lang as u64 + 1) * 0x1234_5678);
        let total = KEYS + 2 * POLARITY + filler;
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(total);
        while words.len() < total {
            let n = rng.gen_range(1..=3);
            let w: String = (0..n).map(|_| syllable(lang, &mut rng)).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let filler = words.split_off(KEYS + 2 * POLARITY);
        let negative = words.split_off(KEYS + POLARITY);
        let positive = words.split_off(KEYS);
        Lexicon {
            lang,
            keys: words,
            positive,
            negative,
            filler,
        }
    }

    fn all_words(&self) -> Vec<&str> {
        self.keys
            .iter()
            .chain(&self.positive)
            .chain(&self.negative)
            .chain(&self.filler)
            .map(String::as_str)
            .collect()
    }

    /// `n` words spread evenly over the whole lexicon (all of them when
    /// `n` is 0 or too large).
    pub fn active_words(&self, n: usize) -> Vec<&str> {
        let all = self.all_words();
        if n == 0 || n >= all.len() {
            return all;
        }
        (0..n).map(|i| all[i * all.len() / n]).collect()
    }

    fn fillers(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        (0..n).map(|_| self.filler.choose(rng).unwrap().clone()).collect()
    }
}

/// MLM documents, one per line, over `vocab_words` words of the lexicon
/// (0 = all): half follow a sparse Markov chain, half repeat a short random
/// cycle of words.
pub fn mlm_corpus(lex: &Lexicon, docs: usize, max_words: usize, vocab_words: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = lex.active_words(vocab_words);
    let n = words.len();
    let mut out = String::new();
    for d in 0..docs {
        let len = rng.gen_range(8..=max_words.max(8));
        let line: Vec<&str> = if d % 2 == 0 {
            let mut cur = rng.gen_range(0..n);
            (0..len)
                .map(|_| {
                    let w = words[cur];
                    let u: f64 = rng.gen();
                    cur = if u < 0.8 {
                        (cur * 7 + 3) % n
                    } else if u < 0.95 {
                        (cur * 13 + 5) % n
                    } else {
                        rng.gen_range(0..n)
                    };
                    w
                })
                .collect()
        } else {
            periodic_line(&words, len, &mut rng)
        };
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn periodic_line<'w>(words: &[&'w str], len: usize, rng: &mut ChaCha8Rng) -> Vec<&'w str> {
    let period = rng.gen_range(2..=6);
    let cycle: Vec<&str> = (0..period).map(|_| *words.choose(rng).unwrap()).collect();
    (0..len).map(|i| cycle[i % period]).collect()
}

/// Purely periodic documents of exactly `words_per_doc` words.
pub fn periodic_corpus(
    lex: &Lexicon,
    docs: usize,
    words_per_doc: usize,
    vocab_words: usize,
    seed: u64,
) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = lex.active_words(vocab_words);
    let mut out = String::new();
    for _ in 0..docs {
        out.push_str(&periodic_line(&words, words_per_doc, &mut rng).join(" "));
        out.push('\n');
    }
    out
}

/// Plain text of roughly `bytes` bytes, for tokenizer training.
pub fn bulk_text(lex: &Lexicon, bytes: usize, seed: u64) -> String {
    let mut out = String::with_capacity(bytes + 256);
    let mut s = seed;
    while out.len() < bytes {
        out.push_str(&mlm_corpus(lex, 64, 40, 0, s));
        s = s.wrapping_add(1);
    }
    out
}

fn distinct_keys(lex: &Lexicon, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    lex.keys.choose_multiple(rng, n).cloned().collect()
}

fn sentence(mut parts: Vec<String>, rng: &mut ChaCha8Rng) -> String {
    parts.shuffle(rng);
    parts.join(" ")
}

/// Query/passage pairs sharing four topic keys; passages add filler. Each
/// pair is monolingual, alternating languages.
pub fn topic_pairs(lexicons: &[Lexicon; 2], n: usize, seed: u64) -> Vec<PairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let lex = &lexicons[out.len() % 2];
        let keys = distinct_keys(lex, 4, &mut rng);
        let mut sig = keys.clone();
        sig.sort();
        if !used.insert(sig) {
            continue;
        }
        let mut q = keys.clone();
        q.extend(lex.fillers(1, &mut rng));
        let mut p = keys;
        let extra = rng.gen_range(4..=8);
        p.extend(lex.fillers(extra, &mut rng));
        out.push(PairExample {
            q: sentence(q, &mut rng),
            p: sentence(p, &mut rng),
        });
    }
    out
}

fn polarity_word(lex: &Lexicon, positive: bool, rng: &mut ChaCha8Rng) -> String {
    let pool = if positive { &lex.positive } else { &lex.negative };
    pool.choose(rng).unwrap().clone()
}

/// Retrieval rows: the positive shares all four keys; each hard negative
/// shares two. Polarity words are attached at random, so they carry no
/// retrieval signal.
pub fn retrieval_rows(lexicons: &[Lexicon; 2], n: usize, negs: usize, seed: u64) -> Vec<RetrievalExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let lex = &lexicons[i % 2];
            let keys = distinct_keys(lex, 4, &mut rng);
            let mut q = keys.clone();
            q.push(polarity_word(lex, rng.gen(), &mut rng));
            let mut p = keys.clone();
            p.push(polarity_word(lex, rng.gen(), &mut rng));
            p.extend(lex.fillers(3, &mut rng));
            let negs = (0..negs)
                .map(|_| {
                    let mut n: Vec<String> = keys.choose_multiple(&mut rng, 2).cloned().collect();
                    while n.len() < 4 {
                        let k = lex.keys.choose(&mut rng).unwrap();
                        if !keys.contains(k) && !n.contains(k) {
                            n.push(k.clone());
                        }
                    }
                    n.push(polarity_word(lex, rng.gen(), &mut rng));
                    n.extend(lex.fillers(3, &mut rng));
                    sentence(n, &mut rng)
                })
                .collect();
            RetrievalExample {
                q: sentence(q, &mut rng),
                p: sentence(p, &mut rng),
                negs,
            }
        })
        .collect()
}

/// Graded pairs on a 0–5 scale: `5 · overlap/4`, halved when the polarity
/// markers disagree.
pub fn sts_rows(lexicons: &[Lexicon; 2], n: usize, seed: u64) -> Vec<StsExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let lex = &lexicons[i % 2];
            let keys = distinct_keys(lex, 8, &mut rng);
            let overlap = rng.gen_range(0..=4);
            let left: Vec<String> = keys[..4].to_vec();
            let mut right: Vec<String> = keys[..overlap].to_vec();
            right.extend_from_slice(&keys[4..8 - overlap]);
            let pol_left: bool = rng.gen();
            let same = rng.gen_bool(0.5);
            let pol_right = if same { pol_left } else { !pol_left };
            let mut l = left;
            l.push(polarity_word(lex, pol_left, &mut rng));
            l.extend(lex.fillers(2, &mut rng));
            let mut r = right;
            r.push(polarity_word(lex, pol_right, &mut rng));
            r.extend(lex.fillers(2, &mut rng));
            let score = 5.0 * overlap as f64 / 4.0 * if same { 1.0 } else { 0.5 };
            StsExample {
                q: sentence(l, &mut rng),
                p: sentence(r, &mut rng),
                score,
            }
        })
        .collect()
}

/// Retrieval task built from held-out pairs: one relevant passage each.
pub fn retrieval_task(name: &str, pairs: &[PairExample]) -> Result<RetrievalTask> {
    let mut queries = BTreeMap::new();
    let mut corpus = BTreeMap::new();
    let mut qrels = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let (qid, did) = (format!("q{i:05}"), format!("d{i:05}"));
        queries.insert(qid.clone(), p.q.clone());
        corpus.insert(did.clone(), p.p.clone());
        qrels.insert(qid, Qrels::from([(did, 1)]));
    }
    RetrievalTask::new(name, queries, corpus, qrels)
}

pub fn sts_task(name: &str, rows: &[StsExample]) -> Result<StsTask> {
    StsTask::new(
        name,
        rows.iter().map(|r| (r.q.clone(), r.p.clone())).collect(),
        rows.iter().map(|r| r.score).collect(),
    )
}

/// Documents for deduplication: originals plus planted variants. Near
/// copies substitute one word in 40; far variants replace a third.
pub fn dedup_docs(lex: &Lexicon, n: usize, seed: u64) -> Vec<PairRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = lex.all_words();
    let mut out: Vec<PairRecord> = Vec::with_capacity(n);
    while out.len() < n {
        if out.len() >= 10 && rng.gen_bool(0.3) {
            let src = out[rng.gen_range(0..out.len())].clone();
            let near = rng.gen_bool(0.6);
            let mut p: Vec<String> = src.p.split(' ').map(str::to_string).collect();
            let changes = if near { 1 } else { p.len() / 3 };
            for _ in 0..changes {
                let i = rng.gen_range(0..p.len());
                p[i] = words.choose(&mut rng).unwrap().to_string();
            }
            out.push(PairRecord::new(src.q.clone(), p.join(" ")));
        } else {
            let q: Vec<&str> = (0..8).map(|_| *words.choose(&mut rng).unwrap()).collect();
            let p: Vec<&str> = (0..40).map(|_| *words.choose(&mut rng).unwrap()).collect();
            out.push(PairRecord::new(q.join(" "), p.join(" ")));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub filler_words: usize,
    pub mlm_docs: usize,
    pub mlm_max_words: usize,
    /// Words of each lexicon used by the MLM and periodic corpora (0 = all).
    pub mlm_vocab_words: usize,
    pub periodic_docs: usize,
    pub periodic_words: usize,
    pub pairs_train: usize,
    pub pairs_eval: usize,
    pub retrieval_rows: usize,
    pub negatives: usize,
    pub sts_train: usize,
    pub sts_eval: usize,
    pub dedup_docs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            filler_words: 200,
            mlm_docs: 4000,
            mlm_max_words: 30,
            mlm_vocab_words: 48,
            periodic_docs: 64,
            periodic_words: 120,
            pairs_train: 5000,
            pairs_eval: 500,
            retrieval_rows: 2000,
            negatives: 2,
            sts_train: 2000,
            sts_eval: 400,
            dedup_docs: 1000,
        }
    }
}

pub fn lexicons(cfg: &SynthConfig) -> [Lexicon; 2] {
    [
        Lexicon::new(Lang::A, cfg.filler_words, cfg.seed),
        Lexicon::new(Lang::B, cfg.filler_words, cfg.seed),
    ]
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every corpus and task file into `dir`.
pub fn write_bundle(dir: &Path, cfg: &SynthConfig) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let lex = lexicons(cfg);
    let s = cfg.seed;
    let mut files = Vec::new();
    let mut text = |name: &str, body: String| -> Result<()> {
        write_text(&dir.join(name), &body)?;
        files.push(name.to_string());
        Ok(())
    };
    text("corpus_a.txt", mlm_corpus(&lex[0], cfg.mlm_docs, cfg.mlm_max_words, cfg.mlm_vocab_words, s + 1))?;
    text("corpus_b.txt", mlm_corpus(&lex[1], cfg.mlm_docs, cfg.mlm_max_words, cfg.mlm_vocab_words, s + 2))?;
    text("periodic_a.txt", periodic_corpus(&lex[0], cfg.periodic_docs, cfg.periodic_words, cfg.mlm_vocab_words, s + 3))?;
    text("periodic_b.txt", periodic_corpus(&lex[1], cfg.periodic_docs, cfg.periodic_words, cfg.mlm_vocab_words, s + 4))?;

    let all_pairs = topic_pairs(&lex, cfg.pairs_train + cfg.pairs_eval, s + 5);
    let (train, held) = all_pairs.split_at(cfg.pairs_train);
    let mut jsonl = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        f(&dir.join(name))?;
        files.push(name.to_string());
        Ok(())
    };
    jsonl("pairs.jsonl", &|p| write_jsonl(p, train))?;
    jsonl("retrieval.jsonl", &|p| {
        write_jsonl(p, &retrieval_rows(&lex, cfg.retrieval_rows, cfg.negatives, s + 6))
    })?;
    jsonl("sts_train.jsonl", &|p| write_jsonl(p, &sts_rows(&lex, cfg.sts_train, s + 7)))?;
    jsonl("sts_eval.jsonl", &|p| write_jsonl(p, &sts_rows(&lex, cfg.sts_eval, s + 8)))?;
    jsonl("raw_pairs.jsonl", &|p| write_jsonl(p, &dedup_docs(&lex[0], cfg.dedup_docs, s + 9)))?;

    #[derive(Serialize)]
    struct TextRow<'a> {
        id: String,
        text: &'a str,
    }
    #[derive(Serialize)]
    struct QrelRow {
        qid: String,
        docid: String,
        rel: u32,
    }
    let queries: Vec<TextRow> = held
        .iter()
        .enumerate()
        .map(|(i, p)| TextRow { id: format!("q{i:05}"), text: &p.q })
        .collect();
    let corpus: Vec<TextRow> = held
        .iter()
        .enumerate()
        .map(|(i, p)| TextRow { id: format!("d{i:05}"), text: &p.p })
        .collect();
    let qrels: Vec<QrelRow> = (0..held.len())
        .map(|i| QrelRow {
            qid: format!("q{i:05}"),
            docid: format!("d{i:05}"),
            rel: 1,
        })
        .collect();
    jsonl("eval_queries.jsonl", &|p| write_jsonl(p, &queries))?;
    jsonl("eval_corpus.jsonl", &|p| write_jsonl(p, &corpus))?;
    jsonl("eval_qrels.jsonl", &|p| write_jsonl(p, &qrels))?;
    Ok(files)
}
