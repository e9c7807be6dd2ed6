use super::weights::Model;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul, softmax_in_place, Tensor2D};

/// Projects `x` onto one head's query, key and value column blocks.
pub fn project_qkv(
    model: &Model,
    x: &Tensor2D,
    layer: usize,
    head: usize,
) -> Result<(Tensor2D, Tensor2D, Tensor2D)> {
    let cfg = &model.config;
    if x.cols() != cfg.d_model {
        return Err(shape_err(
            "project_qkv",
            format!("input has {} columns, d_model is {}", x.cols(), cfg.d_model),
        ));
    }
    if layer >= cfg.num_layers || head >= cfg.num_heads {
        return Err(shape_err(
            "project_qkv",
            format!("layer {layer} / head {head} out of range"),
        ));
    }
    let w = &model.weights.layers[layer];
    let start = head * cfg.d_head;
    let project = |m: &Tensor2D| matmul(x, &m.col_block(start, cfg.d_head));
    Ok((project(&w.wq)?, project(&w.wk)?, project(&w.wv)?))
}

/// Scaled dot-product attention of a single query against `t` cached rows,
/// addressed through accessor closures so callers need not materialise a
/// matrix. Returns `(output, scores)`.
pub(crate) fn attend<'a>(
    q: &[f32],
    t: usize,
    key: impl Fn(usize) -> &'a [f32],
    value: impl Fn(usize) -> &'a [f32],
) -> (Vec<f32>, Vec<f32>) {
    let scale = 1.0 / (q.len() as f32).sqrt();
    let mut scores: Vec<f32> = (0..t)
        .map(|i| dot(q, key(i)) * scale)
        .collect();
    softmax_in_place(&mut scores, |_| true);
    let mut out = vec![0.0f32; q.len()];
    for (i, &p) in scores.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(value(i)) {
            *o += p * v;
        }
    }
    (out, scores)
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `softmax(q·Kᵀ / √d_head) · V` for a single query row.
pub fn attention_head(
    q: &Tensor2D,
    keys: &Tensor2D,
    values: &Tensor2D,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if keys.rows() == 0 {
        return Err(Error::Empty("attention over an empty cache"));
    }
    if q.rows() != 1
        || keys.cols() != q.cols()
        || values.cols() != q.cols()
        || values.rows() != keys.rows()
    {
        return Err(shape_err(
            "attention_head",
            format!(
                "q {:?}, K {:?}, V {:?}",
                q.shape(),
                keys.shape(),
                values.shape()
            ),
        ));
    }
    Ok(attend(q.row(0), keys.rows(), |i| keys.row(i), |i| values.row(i)))
}

/// Concatenates per-head outputs and projects them through `W_O`.
pub fn multi_head_merge(head_outputs: &[Vec<f32>], w_o: &Tensor2D, num_heads: usize) -> Result<Vec<f32>> {
    if head_outputs.len() != num_heads {
        return Err(shape_err(
            "multi_head_merge",
            format!("{} head outputs for {num_heads} heads", head_outputs.len()),
        ));
    }
    let concat: Vec<f32> = head_outputs.concat();
    if concat.len() != w_o.rows() {
        return Err(shape_err(
            "multi_head_merge",
            format!("concatenation has {} values, W_O has {} rows", concat.len(), w_o.rows()),
        ));
    }
    Ok(matmul(&Tensor2D::row_vector(&concat), w_o)?.into_data())
}
