//! Row-wise building blocks shared by the full-sequence and cached paths.

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Returns `1 / sqrt(mean(x²) + eps)`.
#[inline]
pub fn rms_inv(x: &[f32], eps: f32) -> f32 {
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    (1.0 / (ms + eps as f64).sqrt()) as f32
}

/// `out = x * rms_inv(x) * gain`; returns the inverse RMS for reuse.
#[inline]
pub fn rms_norm_into(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) -> f32 {
    let inv = rms_inv(x, eps);
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}
