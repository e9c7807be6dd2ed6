//! Straightforward f64 re-implementation of the model, written from the
//! architecture description rather than from the library code. Used as an
//! oracle for logits and for finite-difference gradients.

#![allow(dead_code)]

use kvnorm_core::{Model, ModelConfig};

#[derive(Clone)]
pub struct RefLayer {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub w_in: Vec<f64>,
    pub w_out: Vec<f64>,
    pub attn_norm: Vec<f64>,
    pub mlp_norm: Vec<f64>,
}

/// Parameters flattened in the library's canonical order so a flat index
/// lines up with `ModelWeights::params()`.
#[derive(Clone)]
pub struct RefModel {
    pub cfg: ModelConfig,
    pub params: Vec<Vec<f64>>,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl RefModel {
    pub fn from_model(model: &Model) -> Self {
        Self {
            cfg: model.config.clone(),
            params: model.weights.params().iter().map(|p| to_f64(p.data())).collect(),
        }
    }

    fn layer(&self, l: usize) -> RefLayer {
        let b = 1 + 8 * l;
        let p = &self.params;
        RefLayer {
            wq: p[b].clone(),
            wk: p[b + 1].clone(),
            wv: p[b + 2].clone(),
            wo: p[b + 3].clone(),
            w_in: p[b + 4].clone(),
            w_out: p[b + 5].clone(),
            attn_norm: p[b + 6].clone(),
            mlp_norm: p[b + 7].clone(),
        }
    }

    /// `x [n × r] · w [r × c]`.
    fn mm(x: &[Vec<f64>], w: &[f64], c: usize) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..c)
                    .map(|j| row.iter().enumerate().map(|(k, v)| v * w[k * c + j]).sum())
                    .collect()
            })
            .collect()
    }

    fn rms(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        x.iter().zip(g).map(|(v, g)| v * inv * g).collect()
    }

    fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    }

    fn rope(v: &mut [f64], pos: usize) {
        let d = v.len() as f64;
        for i in 0..v.len() / 2 {
            let theta = 10000f64.powf(-2.0 * i as f64 / d);
            let (s, c) = (pos as f64 * theta).sin_cos();
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = a * c - b * s;
            v[2 * i + 1] = a * s + b * c;
        }
    }

    pub fn logits(&self, tokens: &[u32]) -> Vec<Vec<f64>> {
        let cfg = &self.cfg;
        let (d, dh, h) = (cfg.d_model, cfg.d_head, cfg.num_heads);
        let eps = cfg.norm_eps as f64;
        let emb = &self.params[0];
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| emb[t as usize * d..(t as usize + 1) * d].to_vec())
            .collect();
        let n = tokens.len();
        for l in 0..cfg.num_layers {
            let w = self.layer(l);
            let hn: Vec<Vec<f64>> = x.iter().map(|r| Self::rms(r, &w.attn_norm, eps)).collect();
            let mut q = Self::mm(&hn, &w.wq, d);
            let mut k = Self::mm(&hn, &w.wk, d);
            let v = Self::mm(&hn, &w.wv, d);
            if cfg.use_rope {
                for i in 0..n {
                    for head in 0..h {
                        Self::rope(&mut q[i][head * dh..(head + 1) * dh], i);
                        Self::rope(&mut k[i][head * dh..(head + 1) * dh], i);
                    }
                }
            }
            let mut concat = vec![vec![0.0; d]; n];
            for head in 0..h {
                let s = head * dh;
                for i in 0..n {
                    let logits: Vec<f64> = (0..=i)
                        .map(|j| (0..dh).map(|c| q[i][s + c] * k[j][s + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..=i {
                        for c in 0..dh {
                            concat[i][s + c] += e[j] / z * v[j][s + c];
                        }
                    }
                }
            }
            let a = Self::mm(&concat, &w.wo, d);
            for i in 0..n {
                for c in 0..d {
                    x[i][c] += a[i][c];
                }
            }
            let hn: Vec<Vec<f64>> = x.iter().map(|r| Self::rms(r, &w.mlp_norm, eps)).collect();
            let mut u = Self::mm(&hn, &w.w_in, cfg.d_ff);
            u.iter_mut().flatten().for_each(|v| *v = Self::gelu(*v));
            let m = Self::mm(&u, &w.w_out, d);
            for i in 0..n {
                for c in 0..d {
                    x[i][c] += m[i][c];
                }
            }
        }
        let last = self.params.len();
        let final_norm = &self.params[last - 2];
        let unemb = &self.params[last - 1];
        let hf: Vec<Vec<f64>> = x.iter().map(|r| Self::rms(r, final_norm, eps)).collect();
        Self::mm(&hf, unemb, cfg.vocab_size)
    }

    /// Mean cross-entropy over all `Some` targets of a batch.
    pub fn loss(&self, tokens: &[Vec<u32>], targets: &[Vec<Option<u32>>]) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (t, y) in tokens.iter().zip(targets) {
            let logits = self.logits(t);
            for (row, target) in logits.iter().zip(y) {
                if let Some(target) = target {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
                    total += lse - row[*target as usize];
                    count += 1;
                }
            }
        }
        total / count as f64
    }
}

/// A model with weights large enough that attention and the MLP are far
/// from linear, which makes gradient checks meaningful.
pub fn perturbed_model(cfg: ModelConfig, seed: u64, std: f64) -> Model {
    use kvnorm_core::rng::SplitMix64;
    let mut model = Model::init(cfg, seed).unwrap();
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    let names = model.weights.param_names();
    for (name, p) in names.iter().zip(model.weights.params_mut()) {
        let is_gain = name.ends_with("norm");
        for v in p.data_mut() {
            let z = rng.next_normal();
            *v = if is_gain { (1.0 + 0.2 * z) as f32 } else { (std * z) as f32 };
        }
    }
    model
}

/// Worst relative disagreement, per weight group, between the analytic
/// gradient and a central difference of the f64 reference loss with step
/// `eps`. The five-point stencil is used because the plain two-point one
/// has truncation error near 1e-4 relative at `eps = 1e-3` on this model.
///
/// Returns, per group, `(name, ‖analytic − numeric‖ / ‖numeric‖, worst
/// entry error)` where an entry's error is measured against
/// `max(|analytic|, |numeric|, floor)`.
pub fn gradient_errors(
    model: &Model,
    tokens: &[Vec<u32>],
    targets: &[Vec<Option<u32>>],
    eps: f64,
    floor: f64,
) -> Vec<(String, f64, f64)> {
    let (_, grads) = kvnorm_core::model::forward_train(model, tokens, targets).unwrap();
    let base = RefModel::from_model(model);
    let names = model.weights.param_names();
    let mut out = Vec::new();
    for (g, (name, analytic)) in names.iter().zip(grads.params()).enumerate() {
        let mut worst = 0.0f64;
        let (mut diff2, mut num2) = (0.0f64, 0.0f64);
        for i in 0..analytic.data().len() {
            let at = |step: f64| {
                let mut m = base.clone();
                m.params[g][i] += step;
                m.loss(tokens, targets)
            };
            let numeric = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
            let a = analytic.data()[i] as f64;
            let scale = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / scale);
            diff2 += (a - numeric).powi(2);
            num2 += numeric.powi(2);
        }
        out.push((name.clone(), (diff2 / num2.max(f64::MIN_POSITIVE)).sqrt(), worst));
    }
    out
}
