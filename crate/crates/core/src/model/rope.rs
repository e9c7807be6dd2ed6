//! Rotary positional encoding over consecutive dimension pairs.
//!
//! Pair `i` (dimensions `2i`, `2i+1`) at position `p` is rotated by
//! `p · base^(-2i / d_head)` with `base = 10000`.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor2D;

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotates one row in place. `inverse` rotates by the negated angle, which is
/// the transpose of the forward rotation and is what the backward pass needs.
pub fn rotate_row(row: &mut [f32], position: usize, inverse: bool) {
    let d = row.len();
    let sign = if inverse { -1.0 } else { 1.0 };
    for (i, pair) in row.chunks_exact_mut(2).enumerate() {
        let theta = ROPE_BASE.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = (sign * position as f64 * theta).sin_cos();
        let (x0, x1) = (pair[0] as f64, pair[1] as f64);
        pair[0] = (x0 * c - x1 * s) as f32;
        pair[1] = (x0 * s + x1 * c) as f32;
    }
}

pub fn apply_rope(m: &Tensor2D, positions: &[usize]) -> Result<Tensor2D> {
    if m.cols() % 2 != 0 {
        return Err(shape_err("apply_rope", format!("odd head width {}", m.cols())));
    }
    if positions.len() != m.rows() {
        return Err(shape_err(
            "apply_rope",
            format!("{} positions for {} rows", positions.len(), m.rows()),
        ));
    }
    let mut out = m.clone();
    for (r, &p) in positions.iter().enumerate() {
        rotate_row(out.row_mut(r), p, false);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{l2_norm, seeded_init, InitScheme};

    #[test]
    fn position_zero_is_identity() {
        let m = seeded_init(3, 8, InitScheme::Normal { std: 1.0 }, 1).unwrap();
        assert_eq!(apply_rope(&m, &[0, 0, 0]).unwrap(), m);
    }

    #[test]
    fn single_pair_hand_rotation() {
        let m = Tensor2D::row_vector(&[1.0, 0.0]);
        let r = apply_rope(&m, &[1]).unwrap();
        assert!((r.get(0, 0) - 1f32.cos()).abs() < 1e-7);
        assert!((r.get(0, 1) - 1f32.sin()).abs() < 1e-7);
    }

    #[test]
    fn preserves_row_norms_and_inverts() {
        let m = seeded_init(16, 32, InitScheme::Normal { std: 1.0 }, 2).unwrap();
        let positions: Vec<usize> = (0..16).map(|i| i * 37).collect();
        let r = apply_rope(&m, &positions).unwrap();
        for i in 0..16 {
            assert!((l2_norm(r.row(i)) - l2_norm(m.row(i))).abs() < 1e-6 * l2_norm(m.row(i)));
            let mut back = r.row(i).to_vec();
            rotate_row(&mut back, positions[i], true);
            for (a, b) in back.iter().zip(m.row(i)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn errors() {
        assert!(apply_rope(&Tensor2D::zeros(1, 3), &[0]).is_err());
        assert!(apply_rope(&Tensor2D::zeros(2, 4), &[0]).is_err());
    }
}
