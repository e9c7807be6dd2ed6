//! Attention lost by an eviction, and how far the key-norm eviction order
//! falls behind the attention-optimal order.

use crate::error::{shape_err, Error, Result};

/// Sums values in ascending order. Floating-point addition is monotone in
/// each argument, so if one sorted list dominates another element-wise its
/// sum is never smaller. That keeps oracle comparisons exact.
fn ascending_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Attention mass placed on the `dropped` indices of `scores`.
pub fn attention_loss(scores: &[f32], dropped: &[usize]) -> Result<f64> {
    let mut seen = vec![false; scores.len()];
    let mut values = Vec::with_capacity(dropped.len());
    for &p in dropped {
        if p >= scores.len() {
            return Err(Error::MissingPosition(p));
        }
        if !std::mem::replace(&mut seen[p], true) {
            values.push(scores[p] as f64);
        }
    }
    Ok(ascending_sum(values))
}

/// Indices in the order the keep-low-norm policy drops them: highest norm
/// first, earlier index first among equal norms.
pub fn norm_drop_order(key_norms: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..key_norms.len()).collect();
    order.sort_by(|&a, &b| key_norms[b].total_cmp(&key_norms[a]).then(a.cmp(&b)));
    order
}

/// Indices in attention-optimal drop order: lowest score first, earlier
/// index first among equal scores.
pub fn score_drop_order(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// `Y^m` for `m = 1..=n`: the attention lost by dropping the `m` highest-norm
/// keys minus the least attention any `m` drops could lose.
///
/// Each `Y^m` is computed from the symmetric difference of the two drop
/// sets. Every score only the reference drops is no larger than every score
/// only the norm order drops, so pairing both sides in sorted order gives
/// non-negative terms, and identical sets give exactly zero.
pub fn alr_curve(scores: &[f32], key_norms: &[f32]) -> Result<Vec<f64>> {
    if scores.len() != key_norms.len() {
        return Err(shape_err(
            "alr_curve",
            format!("{} scores, {} key norms", scores.len(), key_norms.len()),
        ));
    }
    let n = scores.len();
    let by_norm = norm_drop_order(key_norms);
    let by_score = score_drop_order(scores);
    let mut in_norm = vec![false; n];
    let mut in_ref = vec![false; n];
    // Positions dropped by exactly one of the two orders.
    let mut only_norm: Vec<usize> = Vec::new();
    let mut only_ref: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(n);
    for m in 0..n {
        let (p, r) = (by_norm[m], by_score[m]);
        in_norm[p] = true;
        if in_ref[p] {
            only_ref.retain(|&x| x != p);
        } else {
            only_norm.push(p);
        }
        in_ref[r] = true;
        if in_norm[r] {
            only_norm.retain(|&x| x != r);
        } else {
            only_ref.push(r);
        }
        let mut a: Vec<f64> = only_norm.iter().map(|&i| scores[i] as f64).collect();
        let mut b: Vec<f64> = only_ref.iter().map(|&i| scores[i] as f64).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        curve.push(ascending_sum(a.iter().zip(&b).map(|(x, y)| x - y).collect()));
    }
    Ok(curve)
}

/// `Σ_m Y^m`; zero when the norm order is attention-optimal.
pub fn alr(scores: &[f32], key_norms: &[f32]) -> Result<f64> {
    Ok(alr_curve(scores, key_norms)?.iter().sum())
}
