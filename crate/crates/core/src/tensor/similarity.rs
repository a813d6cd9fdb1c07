use super::Var;
use crate::error::TensorError;

/// Divides each row (last axis) by its Euclidean norm.
pub fn l2_normalize_rows(x: Var<'_>) -> Result<Var<'_>, TensorError> {
    let rank = x.shape().len();
    let norms = x.square().sum_axis(rank - 1, true)?.sqrt();
    x.div(norms)
}

/// Row-wise cosine similarity of two `[k, d]` inputs, giving `[k]`.
pub fn cosine_rows<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>, TensorError> {
    let prod = l2_normalize_rows(x)?.mul(l2_normalize_rows(y)?)?;
    let rank = prod.shape().len();
    prod.sum_axis(rank - 1, false)
}

/// All-pairs cosine similarity `[k, d] x [n, d] -> [k, n]`.
pub fn cosine_matrix<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>, TensorError> {
    l2_normalize_rows(x)?.matmul(l2_normalize_rows(y)?.transpose()?)
}
