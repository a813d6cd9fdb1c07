//! Contrastive and correlation objectives over batches of embeddings.
//!
//! `info_nce` sums over the batch while the triplet loss averages over rows;
//! both are kept as defined, so learning rates must account for the factor
//! of `k` between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::tensor::{cosine_matrix, cosine_rows, Tape, Tensor, Var};

/// Similarity used inside the losses. Cosine is the default; raw dot
/// products are available for experiments with unnormalized embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

impl Similarity {
    fn matrix<'t>(self, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>, TensorError> {
        match self {
            Similarity::Cosine => cosine_matrix(x, y),
            Similarity::Dot => x.matmul(y.transpose()?),
        }
    }

    fn rows<'t>(self, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>, TensorError> {
        match self {
            Similarity::Cosine => cosine_rows(x, y),
            Similarity::Dot => x.mul(y)?.sum_axis(1, false),
        }
    }
}

/// Cosine similarity of two plain vectors.
pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Input(format!(
            "cosine of vectors with {} and {} entries",
            x.len(),
            y.len()
        )));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok(dot / (nx * ny))
}

fn rows_of(v: Var<'_>) -> Result<(usize, usize)> {
    match v.shape().as_slice() {
        &[k, d] => Ok((k, d)),
        s => Err(Error::Input(format!("expected a [k, d] embedding matrix, got {s:?}"))),
    }
}

fn check_nonzero_rows(v: Var<'_>, what: &str) -> Result<()> {
    let d = *v.shape().last().unwrap_or(&1);
    let data = v.data();
    if data.chunks(d).any(|r| r.iter().all(|&x| x == 0.0)) {
        return Err(Error::Degenerate(format!("zero-norm {what} embedding")));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate(format!("non-finite {what} embedding")));
    }
    Ok(())
}

/// In-batch pairs: row `i` of `q` is paired with row `i` of `p`.
#[derive(Clone, Copy, Debug)]
pub struct PairBatch<'t> {
    pub q: Var<'t>,
    pub p: Var<'t>,
    pub similarity: Similarity,
}

impl<'t> PairBatch<'t> {
    pub fn new(q: Var<'t>, p: Var<'t>) -> Result<Self> {
        let (kq, dq) = rows_of(q)?;
        let (kp, dp) = rows_of(p)?;
        if kq != kp || dq != dp {
            return Err(Error::Input(format!(
                "pair batch sides disagree: [{kq}, {dq}] vs [{kp}, {dp}]"
            )));
        }
        if kq < 2 {
            return Err(Error::Input("pair batch needs at least 2 rows".into()));
        }
        check_nonzero_rows(q, "query")?;
        check_nonzero_rows(p, "passage")?;
        Ok(PairBatch {
            q,
            p,
            similarity: Similarity::Cosine,
        })
    }

    pub fn with_similarity(mut self, similarity: Similarity) -> Self {
        self.similarity = similarity;
        self
    }

    /// The batch with the roles of the two sides swapped.
    pub fn swapped(self) -> Self {
        PairBatch {
            q: self.p,
            p: self.q,
            similarity: self.similarity,
        }
    }

    pub fn len(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Retrieval rows `(q, p, n_1..n_m)`; `negs` is `[k, m, d]`.
#[derive(Clone, Copy, Debug)]
pub struct TripletBatch<'t> {
    pub q: Var<'t>,
    pub p: Var<'t>,
    pub negs: Var<'t>,
    pub similarity: Similarity,
}

impl<'t> TripletBatch<'t> {
    pub fn new(q: Var<'t>, p: Var<'t>, negs: Var<'t>) -> Result<Self> {
        let (k, d) = rows_of(q)?;
        if p.shape() != [k, d] {
            return Err(Error::Input(format!(
                "passages {:?} do not match queries [{k}, {d}]",
                p.shape()
            )));
        }
        match negs.shape().as_slice() {
            &[nk, m, nd] if nk == k && nd == d && m >= 1 => {}
            s => {
                return Err(Error::Input(format!(
                    "negatives must be [{k}, m >= 1, {d}], got {s:?}"
                )))
            }
        }
        check_nonzero_rows(q, "query")?;
        check_nonzero_rows(p, "passage")?;
        check_nonzero_rows(negs, "negative")?;
        Ok(TripletBatch {
            q,
            p,
            negs,
            similarity: Similarity::Cosine,
        })
    }

    pub fn with_similarity(mut self, similarity: Similarity) -> Self {
        self.similarity = similarity;
        self
    }
}

/// Scored pairs `(q, p, t)`.
#[derive(Clone, Debug)]
pub struct StsBatch<'t> {
    pub q: Var<'t>,
    pub p: Var<'t>,
    pub scores: Vec<f64>,
    pub similarity: Similarity,
}

impl<'t> StsBatch<'t> {
    pub fn new(q: Var<'t>, p: Var<'t>, scores: Vec<f64>) -> Result<Self> {
        let (k, d) = rows_of(q)?;
        if p.shape() != [k, d] || scores.len() != k {
            return Err(Error::Input(format!(
                "STS batch mismatch: q [{k}, {d}], p {:?}, {} scores",
                p.shape(),
                scores.len()
            )));
        }
        if k < 2 {
            return Err(Error::Input("STS batch needs at least 2 rows".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input("non-finite STS score".into()));
        }
        check_nonzero_rows(q, "query")?;
        check_nonzero_rows(p, "passage")?;
        Ok(StsBatch {
            q,
            p,
            scores,
            similarity: Similarity::Cosine,
        })
    }

    pub fn with_similarity(mut self, similarity: Similarity) -> Self {
        self.similarity = similarity;
        self
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// `-Σ_i ln softmax_j(s(q_i, p_j)/τ)[i]`, summed over the batch.
pub fn info_nce<'t>(batch: &PairBatch<'t>, tau: f64) -> Result<Var<'t>> {
    check_temperature(tau)?;
    let k = batch.len();
    let logits = batch.similarity.matrix(batch.q, batch.p)?.scale(1.0 / tau);
    let diag: Vec<usize> = (0..k).collect();
    Ok(logits.log_softmax().take_along_rows(&diag)?.sum().neg())
}

/// `info_nce(B) + info_nce(B†)`.
pub fn bidirectional_info_nce<'t>(batch: &PairBatch<'t>, tau: f64) -> Result<Var<'t>> {
    let forward = info_nce(batch, tau)?;
    let backward = info_nce(&batch.swapped(), tau)?;
    Ok(forward.add(backward)?)
}

/// Hard-negative InfoNCE, averaged over rows.
///
/// The query-side softmax of row `i` ranges over every in-batch passage and
/// all `k·m` negatives; the passage-side softmax ranges over in-batch queries
/// only.
pub fn triplet_info_nce<'t>(batch: &TripletBatch<'t>, tau: f64) -> Result<Var<'t>> {
    check_temperature(tau)?;
    let shape = batch.negs.shape();
    let (k, m, d) = (shape[0], shape[1], shape[2]);
    let tape: &Tape = tape_of(batch.q);
    let flat_negs = batch.negs.reshape(&[k * m, d])?;
    let candidates = tape.concat(&[batch.p, flat_negs], 0)?;
    let diag: Vec<usize> = (0..k).collect();

    let forward = batch
        .similarity
        .matrix(batch.q, candidates)?
        .scale(1.0 / tau)
        .log_softmax()
        .take_along_rows(&diag)?
        .mean()
        .neg();
    let backward = batch
        .similarity
        .matrix(batch.p, batch.q)?
        .scale(1.0 / tau)
        .log_softmax()
        .take_along_rows(&diag)?
        .mean()
        .neg();
    Ok(forward.add(backward)?)
}

fn tape_of(v: Var<'_>) -> &Tape {
    v.tape()
}

fn centered(values: &[f64]) -> Vec<f64> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| v - mean).collect()
}

fn variance(values: &[f64]) -> f64 {
    centered(values).iter().map(|v| v * v).sum::<f64>() / values.len() as f64
}

/// Negative Pearson correlation between similarities and gold scores, with
/// biased (1/k) batch statistics.
pub fn pearson_sts_loss<'t>(batch: &StsBatch<'t>) -> Result<Var<'t>> {
    let tape = tape_of(batch.q);
    let k = batch.scores.len();
    let sims = batch.similarity.rows(batch.q, batch.p)?;
    let sim_values = sims.data().to_vec();
    if variance(&batch.scores) <= 1e-12 {
        return Err(Error::Degenerate("STS scores have zero variance".into()));
    }
    if variance(&sim_values) <= 1e-12 {
        return Err(Error::Degenerate("STS similarities have zero variance".into()));
    }
    let tc = centered(&batch.scores);
    let sigma_t = (tc.iter().map(|v| v * v).sum::<f64>() / k as f64).sqrt();
    let tc = tape.constant(Tensor::new(vec![k], tc)?);
    let sc = sims.sub(sims.mean())?;
    let cov = sc.mul(tc)?.mean();
    let sigma_s = sc.square().mean().sqrt();
    Ok(cov.div(sigma_s)?.scale(-1.0 / sigma_t))
}

/// Mean squared error between similarities and gold scores.
pub fn mse_sts_loss<'t>(batch: &StsBatch<'t>) -> Result<Var<'t>> {
    let tape = tape_of(batch.q);
    let k = batch.scores.len();
    let sims = batch.similarity.rows(batch.q, batch.p)?;
    let target = tape.constant(Tensor::new(vec![k], batch.scores.clone())?);
    Ok(sims.sub(target)?.square().mean())
}
