//! Seeded randomness shared by every stochastic component.
//!
//! The generator is splitmix64. Uniform draws in `[0, 1)` take the top 53 bits
//! of a raw output: `(x >> 11) * 2^-53`. Normal deviates use Box–Muller on two
//! consecutive uniform draws `u1, u2`:
//!
//! ```text
//! r  = sqrt(-2 ln(1 - u1))
//! z0 = r cos(2π u2)      (returned first)
//! z1 = r sin(2π u2)      (returned on the next call)
//! ```
//!
//! `1 - u1` lies in `(0, 1]`, so the logarithm is always finite. Box–Muller is
//! evaluated in `f64` and the deviate is rounded to `f32` only by callers that
//! store it.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    spare_normal: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. Uses the multiply-shift reduction on the
    /// 53-bit uniform, which is exact for the small ranges used here.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// The splitmix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a tuple of
/// indices. Order matters: `derive_seed(s, &[a, b]) != derive_seed(s, &[b, a])`
/// in general.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(base ^ GOLDEN), |acc, &p| {
        mix64(acc.wrapping_add(GOLDEN) ^ mix64(p.wrapping_add(0x632B_E59B_D9B4_E019)))
    })
}
