//! Metrics and task runners for STS and retrieval evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::read_jsonl;
use crate::encoder::TextEmbedder;
use crate::error::{Error, Result};
use crate::losses::cosine_sim;

/// Relevance grades of one query's judged documents.
pub type Qrels = BTreeMap<String, u32>;

fn check_pair_lengths(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Input(format!(
            "correlation of {} and {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Input("correlation needs at least 2 values".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in correlation input".into()));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair_lengths(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant sequence".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation (Pearson of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair_lengths(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

fn gain(rel: u32) -> f64 {
    2f64.powi(rel as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// nDCG@k with exponential gain; 0 when no judged document is relevant.
pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], qrels: &Qrels, k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(qrels.get(d.as_ref()).copied().unwrap_or(0)) / discount(i + 1))
        .sum();
    let mut ideal: Vec<u32> = qrels.values().copied().filter(|&r| r > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| gain(r) / discount(i + 1))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

fn relevant_count(qrels: &Qrels) -> usize {
    qrels.values().filter(|&&r| r > 0).count()
}

/// Fraction of relevant documents found in the top `k`.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], qrels: &Qrels, k: usize) -> Option<f64> {
    let total = relevant_count(qrels);
    if total == 0 {
        return None;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|d| qrels.get(d.as_ref()).is_some_and(|&r| r > 0))
        .count();
    Some(hits as f64 / total as f64)
}

/// Binary-relevance average precision; `None` without relevant documents.
pub fn average_precision<S: AsRef<str>>(ranked: &[S], qrels: &Qrels) -> Option<f64> {
    let total = relevant_count(qrels);
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranked.iter().enumerate() {
        if qrels.get(d.as_ref()).is_some_and(|&r| r > 0) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// MAP over queries; queries without relevant documents are excluded and
/// counted in the second return value.
pub fn mean_average_precision<S: AsRef<str>>(runs: &[(Vec<S>, Qrels)]) -> Result<(f64, usize)> {
    let aps: Vec<Option<f64>> = runs.iter().map(|(r, q)| average_precision(r, q)).collect();
    let counted: Vec<f64> = aps.iter().flatten().copied().collect();
    let excluded = aps.len() - counted.len();
    if excluded > 0 {
        log::warn!("{excluded} queries without relevant documents excluded from MAP");
    }
    if counted.is_empty() {
        return Err(Error::Degenerate("no query has a relevant document".into()));
    }
    Ok((counted.iter().sum::<f64>() / counted.len() as f64, excluded))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsTask {
    pub name: String,
    pub pairs: Vec<(String, String)>,
    pub gold: Vec<f64>,
}

#[derive(Deserialize)]
struct StsLine {
    q: String,
    p: String,
    score: f64,
}

impl StsTask {
    pub fn new(name: impl Into<String>, pairs: Vec<(String, String)>, gold: Vec<f64>) -> Result<Self> {
        if pairs.len() != gold.len() || pairs.len() < 2 {
            return Err(Error::Input(format!(
                "STS task needs at least 2 pairs with one score each ({} pairs, {} scores)",
                pairs.len(),
                gold.len()
            )));
        }
        Ok(StsTask {
            name: name.into(),
            pairs,
            gold,
        })
    }

    /// One `{q, p, score}` object per line.
    pub fn load(name: &str, path: &Path) -> Result<Self> {
        let lines: Vec<StsLine> = read_jsonl(path)?;
        let (pairs, gold) = lines.into_iter().map(|l| ((l.q, l.p), l.score)).unzip();
        StsTask::new(name, pairs, gold)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub name: String,
    pub queries: BTreeMap<String, String>,
    pub corpus: BTreeMap<String, String>,
    pub qrels: BTreeMap<String, Qrels>,
}

#[derive(Deserialize)]
struct TextLine {
    id: String,
    text: String,
}

#[derive(Deserialize)]
struct QrelLine {
    qid: String,
    docid: String,
    rel: u32,
}

impl RetrievalTask {
    pub fn new(
        name: impl Into<String>,
        queries: BTreeMap<String, String>,
        corpus: BTreeMap<String, String>,
        qrels: BTreeMap<String, Qrels>,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("retrieval corpus is empty".into()));
        }
        for (qid, docs) in &qrels {
            if !queries.contains_key(qid) {
                return Err(Error::Input(format!("qrels name unknown query {qid}")));
            }
            if let Some(d) = docs.keys().find(|d| !corpus.contains_key(*d)) {
                return Err(Error::Input(format!(
                    "qrels for {qid} name unknown document {d}"
                )));
            }
        }
        Ok(RetrievalTask {
            name: name.into(),
            queries,
            corpus,
            qrels,
        })
    }

    /// Corpus and queries are `{id, text}` lines; qrels are `{qid, docid, rel}`.
    pub fn load(name: &str, corpus: &Path, queries: &Path, qrels: &Path) -> Result<Self> {
        let to_map = |lines: Vec<TextLine>| lines.into_iter().map(|l| (l.id, l.text)).collect();
        let corpus_map = to_map(read_jsonl(corpus)?);
        let query_map = to_map(read_jsonl(queries)?);
        let mut judged: BTreeMap<String, Qrels> = BTreeMap::new();
        for l in read_jsonl::<QrelLine>(qrels)? {
            judged.entry(l.qid).or_default().insert(l.docid, l.rel);
        }
        RetrievalTask::new(name, query_map, corpus_map, judged)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub model: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub excluded_queries: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Plain-text table: one row per report, one column per metric name.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut names: Vec<&str> = reports
        .iter()
        .flat_map(|r| r.metrics.keys().map(String::as_str))
        .collect();
    names.sort_unstable();
    names.dedup();
    let mut header = vec!["task".to_string(), "model".to_string()];
    header.extend(names.iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.task.clone(), r.model.clone()];
            row.extend(names.iter().map(|n| {
                r.metrics
                    .get(*n)
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
            }));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, &header);
    line(
        &mut out,
        &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
    );
    for r in &rows {
        line(&mut out, r);
    }
    out
}

/// Cosine similarities of each STS pair, then Spearman and Pearson vs gold.
pub fn run_sts_eval(embedder: &dyn TextEmbedder, task: &StsTask, model: &str) -> Result<MetricReport> {
    let left: Vec<&str> = task.pairs.iter().map(|(a, _)| a.as_str()).collect();
    let right: Vec<&str> = task.pairs.iter().map(|(_, b)| b.as_str()).collect();
    let a = embedder.embed_texts(&left)?;
    let b = embedder.embed_texts(&right)?;
    let sims: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| cosine_sim(x, y))
        .collect::<Result<_>>()?;
    let mut metrics = BTreeMap::new();
    metrics.insert("spearman".to_string(), spearman(&sims, &task.gold)?);
    metrics.insert("pearson".to_string(), pearson(&sims, &task.gold)?);
    Ok(MetricReport {
        task: task.name.clone(),
        model: model.to_string(),
        metrics,
        excluded_queries: 0,
    })
}

/// Document indices sorted by descending cosine to `query`; equal scores
/// keep index order, which is doc-id order for a sorted corpus.
pub fn rank_documents(query: &[f64], docs: &[Vec<f64>]) -> Result<Vec<usize>> {
    let scores: Vec<f64> = docs
        .iter()
        .map(|d| cosine_sim(query, d))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Exact ranking of the whole corpus for every judged query; reports
/// nDCG@k, MAP and recall@{1,k} averaged over queries with a relevant doc.
pub fn run_retrieval_eval(
    embedder: &dyn TextEmbedder,
    task: &RetrievalTask,
    k: usize,
    model: &str,
) -> Result<MetricReport> {
    if task.corpus.is_empty() {
        return Err(Error::Input("retrieval corpus is empty".into()));
    }
    let doc_ids: Vec<&String> = task.corpus.keys().collect();
    let doc_texts: Vec<&str> = task.corpus.values().map(String::as_str).collect();
    let doc_embs = embedder.embed_texts(&doc_texts)?;

    let judged: Vec<(&String, &Qrels)> = task
        .qrels
        .iter()
        .filter(|(_, q)| relevant_count(q) > 0)
        .collect();
    let excluded = task.queries.len() - judged.len();
    if excluded > 0 {
        log::warn!("{}: {excluded} queries without relevant documents excluded", task.name);
    }
    if judged.is_empty() {
        return Err(Error::Degenerate(format!(
            "{}: no query has a relevant document",
            task.name
        )));
    }
    let query_texts: Vec<&str> = judged.iter().map(|(id, _)| task.queries[*id].as_str()).collect();
    let query_embs = embedder.embed_texts(&query_texts)?;

    let per_query: Vec<[f64; 4]> = judged
        .par_iter()
        .zip(&query_embs)
        .map(|((_, qrels), emb)| {
            let ranked: Vec<&str> = rank_documents(emb, &doc_embs)?
                .into_iter()
                .map(|i| doc_ids[i].as_str())
                .collect();
            Ok([
                ndcg_at_k(&ranked, qrels, k),
                average_precision(&ranked, qrels).unwrap_or(0.0),
                recall_at_k(&ranked, qrels, 1).unwrap_or(0.0),
                recall_at_k(&ranked, qrels, k).unwrap_or(0.0),
            ])
        })
        .collect::<Result<_>>()?;
    let n = per_query.len() as f64;
    let mean = |c: usize| per_query.iter().map(|m| m[c]).sum::<f64>() / n;
    let mut metrics = BTreeMap::new();
    metrics.insert(format!("ndcg@{k}"), mean(0));
    metrics.insert("map".to_string(), mean(1));
    metrics.insert("recall@1".to_string(), mean(2));
    metrics.insert(format!("recall@{k}"), mean(3));
    Ok(MetricReport {
        task: task.name.clone(),
        model: model.to_string(),
        metrics,
        excluded_queries: excluded,
    })
}
