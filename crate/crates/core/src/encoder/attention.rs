use super::{Batch, Bound};
use crate::error::TensorError;
use crate::tensor::{Tensor, Var};

/// Per-head ALiBi slope: the geometric sequence `2^(-8(h+1)/heads)`.
pub fn alibi_slope(head: usize, heads: usize) -> f64 {
    2f64.powf(-8.0 * (head + 1) as f64 / heads as f64)
}

/// Symmetric linear distance penalty `bias[h,i,j] = -slope(h)·|i-j|`.
pub fn alibi_bias(heads: usize, qlen: usize, klen: usize) -> Tensor {
    let mut data = Vec::with_capacity(heads * qlen * klen);
    for h in 0..heads {
        let slope = alibi_slope(h, heads);
        for i in 0..qlen {
            for j in 0..klen {
                data.push(-slope * i.abs_diff(j) as f64);
            }
        }
    }
    Tensor::new(vec![heads, qlen, klen], data).expect("positive alibi dims")
}

/// ALiBi plus `-inf` at padded keys, shaped `[batch, heads, seq, seq]`.
pub fn attention_bias(batch: &Batch, heads: usize) -> Tensor {
    let s = batch.seq;
    let alibi = alibi_bias(heads, s, s);
    let mut data = Vec::with_capacity(batch.batch * heads * s * s);
    for b in 0..batch.batch {
        let mask = &batch.mask[b * s..(b + 1) * s];
        for row in alibi.data().chunks(s) {
            data.extend(
                row.iter()
                    .zip(mask)
                    .map(|(&v, &keep)| if keep { v } else { f64::NEG_INFINITY }),
            );
        }
    }
    Tensor::new(vec![batch.batch, heads, s, s], data).expect("positive dims")
}

pub struct AttentionOutput<'t> {
    /// `[batch, seq, hidden]`, after the residual connection and post-norm.
    pub output: Var<'t>,
    /// `[batch, heads, seq, seq]` attention probabilities.
    pub probs: Var<'t>,
}

fn linear<'t>(x: Var<'t>, bound: &Bound<'t>, prefix: &str) -> Result<Var<'t>, TensorError> {
    x.matmul(bound.get(&format!("{prefix}.weight")))?
        .add(bound.get(&format!("{prefix}.bias")))
}

fn norm<'t>(x: Var<'t>, bound: &Bound<'t>, prefix: &str, eps: f64) -> Result<Var<'t>, TensorError> {
    x.layer_norm(
        bound.get(&format!("{prefix}.gain")),
        bound.get(&format!("{prefix}.bias")),
        eps,
    )
}

/// Multi-head self-attention block of one layer.
///
/// With `qk_norm`, queries and keys are layer-normalized over the full hidden
/// axis (all heads at once) before being split into heads.
pub fn attention_layer<'t>(
    x: Var<'t>,
    bound: &Bound<'t>,
    layer: usize,
    bias: &Tensor,
) -> Result<AttentionOutput<'t>, TensorError> {
    let cfg = bound.config();
    let shape = x.shape();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let (heads, dh) = (cfg.heads, cfg.hidden_dim / cfg.heads);
    let p = format!("layers.{layer}.attn");

    let mut q = linear(x, bound, &format!("{p}.q"))?;
    let mut k = linear(x, bound, &format!("{p}.k"))?;
    let v = linear(x, bound, &format!("{p}.v"))?;
    if cfg.qk_norm {
        q = norm(q, bound, &format!("{p}.q_norm"), cfg.layer_norm_eps)?;
        k = norm(k, bound, &format!("{p}.k_norm"), cfg.layer_norm_eps)?;
    }
    let q = q.reshape(&[b, s, heads, dh])?.permute(&[0, 2, 1, 3])?;
    let k_t = k.reshape(&[b, s, heads, dh])?.permute(&[0, 2, 3, 1])?;
    let v = v.reshape(&[b, s, heads, dh])?.permute(&[0, 2, 1, 3])?;

    let scores = q.matmul(k_t)?.scale(1.0 / (dh as f64).sqrt());
    let probs = scores.softmax(Some(bias))?;
    let ctx = probs
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, s, d])?;
    let out = bound.dropout(linear(ctx, bound, &format!("{p}.o"))?)?;
    let output = norm(x.add(out)?, bound, &format!("layers.{layer}.attn_norm"), cfg.layer_norm_eps)?;
    Ok(AttentionOutput { output, probs })
}

/// Position-wise feed-forward block with residual and post-norm.
pub fn ffn_layer<'t>(x: Var<'t>, bound: &Bound<'t>, layer: usize) -> Result<Var<'t>, TensorError> {
    let p = format!("layers.{layer}.ffn");
    let h = linear(x, bound, &format!("{p}.in"))?.gelu();
    let h = bound.dropout(linear(h, bound, &format!("{p}.out"))?)?;
    norm(
        x.add(h)?,
        bound,
        &format!("layers.{layer}.ffn_norm"),
        bound.config().layer_norm_eps,
    )
}
