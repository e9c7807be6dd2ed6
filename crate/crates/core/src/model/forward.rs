//! Full-sequence causal forward pass and its reverse-mode gradient.

use rayon::prelude::*;

use super::attention::dot;
use super::layers::{gelu, gelu_grad, rms_norm_into};
use super::rope::rotate_row;
use super::weights::{Model, ModelWeights};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, gemm_into, softmax_in_place, Tensor2D, Transpose};

struct LayerActs {
    x_in: Tensor2D,
    inv_attn: Vec<f32>,
    h_attn: Tensor2D,
    /// Rotated queries and keys, plus values, all `[n × d_model]`.
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    /// One causal `[n × n]` probability matrix per head.
    probs: Vec<Tensor2D>,
    attn_out: Tensor2D,
    x_mid: Tensor2D,
    inv_mlp: Vec<f32>,
    h_mlp: Tensor2D,
    pre_act: Tensor2D,
    act: Tensor2D,
}

struct Acts {
    layers: Vec<LayerActs>,
    x_final: Tensor2D,
    inv_final: Vec<f32>,
    h_final: Tensor2D,
    logits: Tensor2D,
}

fn check_tokens(model: &Model, tokens: &[u32]) -> Result<()> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::Empty("forward needs at least one token"));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfVocab {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

fn rms_rows(x: &Tensor2D, gain: &Tensor2D, eps: f32) -> (Tensor2D, Vec<f32>) {
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    let inv = (0..x.rows())
        .map(|i| rms_norm_into(x.row(i), gain.data(), eps, out.row_mut(i)))
        .collect();
    (out, inv)
}

/// Backward of `y = x · inv(x) · g`. Accumulates into `dgain`, returns `dx`.
fn rms_rows_backward(x: &Tensor2D, inv: &[f32], gain: &Tensor2D, dy: &Tensor2D, dgain: &mut Tensor2D) -> Tensor2D {
    let d = x.cols();
    let g = gain.data();
    let mut dx = Tensor2D::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let (xr, dyr, r) = (x.row(i), dy.row(i), inv[i]);
        let mut proj = 0.0f64;
        for j in 0..d {
            proj += (dyr[j] * g[j] * xr[j]) as f64;
            dgain.data_mut()[j] += dyr[j] * xr[j] * r;
        }
        let coef = (proj / d as f64) as f32 * r * r * r;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * g[j] * dyr[j] - coef * xr[j];
        }
    }
    dx
}

fn head_block(m: &Tensor2D, head: usize, dh: usize) -> Tensor2D {
    m.col_block(head * dh, dh)
}

fn forward_acts(model: &Model, tokens: &[u32]) -> Result<Acts> {
    check_tokens(model, tokens)?;
    let cfg = &model.config;
    let w = &model.weights;
    let n = tokens.len();
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let scale = 1.0 / (dh as f32).sqrt();

    let mut x = Tensor2D::zeros(n, d);
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(w.embedding.row(t as usize));
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lw in &w.layers {
        let (h_attn, inv_attn) = rms_rows(&x, &lw.attn_norm, cfg.norm_eps);
        let mut q = gemm(&h_attn, Transpose::No, &lw.wq, Transpose::No)?;
        let mut k = gemm(&h_attn, Transpose::No, &lw.wk, Transpose::No)?;
        let v = gemm(&h_attn, Transpose::No, &lw.wv, Transpose::No)?;
        if cfg.use_rope {
            for i in 0..n {
                for head in 0..cfg.num_heads {
                    let span = head * dh..(head + 1) * dh;
                    rotate_row(&mut q.row_mut(i)[span.clone()], i, false);
                    rotate_row(&mut k.row_mut(i)[span], i, false);
                }
            }
        }
        let mut attn_out = Tensor2D::zeros(n, d);
        let mut probs = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let span = head * dh..(head + 1) * dh;
            let mut p = Tensor2D::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[span.clone()];
                let row = p.row_mut(i);
                for (j, s) in row.iter_mut().enumerate().take(i + 1) {
                    *s = dot(qi, &k.row(j)[span.clone()]) * scale;
                }
                softmax_in_place(row, |j| j <= i);
                let out = &mut attn_out.row_mut(i)[span.clone()];
                for j in 0..=i {
                    let pj = p.get(i, j);
                    for (o, &vv) in out.iter_mut().zip(&v.row(j)[span.clone()]) {
                        *o += pj * vv;
                    }
                }
            }
            probs.push(p);
        }
        let proj = gemm(&attn_out, Transpose::No, &lw.wo, Transpose::No)?;
        let x_in = x;
        let mut x_mid = x_in.clone();
        x_mid.add_scaled(&proj, 1.0)?;

        let (h_mlp, inv_mlp) = rms_rows(&x_mid, &lw.mlp_norm, cfg.norm_eps);
        let pre_act = gemm(&h_mlp, Transpose::No, &lw.w_in, Transpose::No)?;
        let mut act = pre_act.clone();
        act.data_mut().iter_mut().for_each(|u| *u = gelu(*u));
        let down = gemm(&act, Transpose::No, &lw.w_out, Transpose::No)?;
        x = x_mid.clone();
        x.add_scaled(&down, 1.0)?;

        layers.push(LayerActs {
            x_in,
            inv_attn,
            h_attn,
            q,
            k,
            v,
            probs,
            attn_out,
            x_mid,
            inv_mlp,
            h_mlp,
            pre_act,
            act,
        });
    }

    let (h_final, inv_final) = rms_rows(&x, &w.final_norm, cfg.norm_eps);
    let logits = gemm(&h_final, Transpose::No, &w.unembedding, Transpose::No)?;
    Ok(Acts {
        layers,
        x_final: x,
        inv_final,
        h_final,
        logits,
    })
}

/// Logits `[n × vocab]` for every position of a causal forward pass.
pub fn forward_logits(model: &Model, tokens: &[u32]) -> Result<Tensor2D> {
    Ok(forward_acts(model, tokens)?.logits)
}

/// Log-softmax cross-entropy of one logit row, computed in f64.
pub fn cross_entropy(logits: &[f32], target: u32) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target as usize] as f64
}

fn backward(model: &Model, tokens: &[u32], acts: &Acts, dlogits: &Tensor2D) -> Result<ModelWeights> {
    let cfg = &model.config;
    let w = &model.weights;
    let n = tokens.len();
    let dh = cfg.d_head;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut g = ModelWeights::zeros_like(cfg);

    gemm_into(1.0, &acts.h_final, Transpose::Yes, dlogits, Transpose::No, 0.0, &mut g.unembedding)?;
    let dh_final = gemm(dlogits, Transpose::No, &w.unembedding, Transpose::Yes)?;
    let mut dx = rms_rows_backward(&acts.x_final, &acts.inv_final, &w.final_norm, &dh_final, &mut g.final_norm);

    for (l, (lw, a)) in w.layers.iter().zip(&acts.layers).enumerate().rev() {
        let gl = &mut g.layers[l];

        // MLP block.
        gemm_into(1.0, &a.act, Transpose::Yes, &dx, Transpose::No, 0.0, &mut gl.w_out)?;
        let mut dpre = gemm(&dx, Transpose::No, &lw.w_out, Transpose::Yes)?;
        for (dv, &u) in dpre.data_mut().iter_mut().zip(a.pre_act.data()) {
            *dv *= gelu_grad(u);
        }
        gemm_into(1.0, &a.h_mlp, Transpose::Yes, &dpre, Transpose::No, 0.0, &mut gl.w_in)?;
        let dh_mlp = gemm(&dpre, Transpose::No, &lw.w_in, Transpose::Yes)?;
        let dmid = rms_rows_backward(&a.x_mid, &a.inv_mlp, &lw.mlp_norm, &dh_mlp, &mut gl.mlp_norm);
        dx.add_scaled(&dmid, 1.0)?;

        // Attention block.
        gemm_into(1.0, &a.attn_out, Transpose::Yes, &dx, Transpose::No, 0.0, &mut gl.wo)?;
        let dattn = gemm(&dx, Transpose::No, &lw.wo, Transpose::Yes)?;
        let mut dq = Tensor2D::zeros(n, cfg.d_model);
        let mut dk = Tensor2D::zeros(n, cfg.d_model);
        let mut dv = Tensor2D::zeros(n, cfg.d_model);
        for head in 0..cfg.num_heads {
            let p = &a.probs[head];
            let d_o = head_block(&dattn, head, dh);
            let vh = head_block(&a.v, head, dh);
            let qh = head_block(&a.q, head, dh);
            let kh = head_block(&a.k, head, dh);
            let dvh = gemm(p, Transpose::Yes, &d_o, Transpose::No)?;
            let dp = gemm(&d_o, Transpose::No, &vh, Transpose::Yes)?;
            let mut ds = Tensor2D::zeros(n, n);
            for i in 0..n {
                let (pr, dpr) = (p.row(i), dp.row(i));
                let inner: f32 = (0..=i).map(|j| pr[j] * dpr[j]).sum();
                for (j, s) in ds.row_mut(i).iter_mut().enumerate().take(i + 1) {
                    *s = pr[j] * (dpr[j] - inner) * scale;
                }
            }
            let dqh = gemm(&ds, Transpose::No, &kh, Transpose::No)?;
            let dkh = gemm(&ds, Transpose::Yes, &qh, Transpose::No)?;
            for i in 0..n {
                let span = head * dh..(head + 1) * dh;
                dq.row_mut(i)[span.clone()].copy_from_slice(dqh.row(i));
                dk.row_mut(i)[span.clone()].copy_from_slice(dkh.row(i));
                dv.row_mut(i)[span].copy_from_slice(dvh.row(i));
            }
        }
        if cfg.use_rope {
            for i in 0..n {
                for head in 0..cfg.num_heads {
                    let span = head * dh..(head + 1) * dh;
                    rotate_row(&mut dq.row_mut(i)[span.clone()], i, true);
                    rotate_row(&mut dk.row_mut(i)[span], i, true);
                }
            }
        }
        gemm_into(1.0, &a.h_attn, Transpose::Yes, &dq, Transpose::No, 0.0, &mut gl.wq)?;
        gemm_into(1.0, &a.h_attn, Transpose::Yes, &dk, Transpose::No, 0.0, &mut gl.wk)?;
        gemm_into(1.0, &a.h_attn, Transpose::Yes, &dv, Transpose::No, 0.0, &mut gl.wv)?;
        let mut dh_attn = gemm(&dq, Transpose::No, &lw.wq, Transpose::Yes)?;
        gemm_into(1.0, &dk, Transpose::No, &lw.wk, Transpose::Yes, 1.0, &mut dh_attn)?;
        gemm_into(1.0, &dv, Transpose::No, &lw.wv, Transpose::Yes, 1.0, &mut dh_attn)?;
        let din = rms_rows_backward(&a.x_in, &a.inv_attn, &lw.attn_norm, &dh_attn, &mut gl.attn_norm);
        dx.add_scaled(&din, 1.0)?;
    }

    for (i, &t) in tokens.iter().enumerate() {
        let row = g.embedding.row_mut(t as usize);
        for (o, &v) in row.iter_mut().zip(dx.row(i)) {
            *o += v;
        }
    }
    Ok(g)
}

/// Per-sequence loss sum and gradient, scaled by `1 / total_targets`.
fn sequence_grad(
    model: &Model,
    tokens: &[u32],
    targets: &[Option<u32>],
    total_targets: usize,
) -> Result<(f64, ModelWeights)> {
    let acts = forward_acts(model, tokens)?;
    let vocab = model.config.vocab_size;
    let mut dlogits = Tensor2D::zeros(tokens.len(), vocab);
    let mut loss = 0.0f64;
    let inv_total = 1.0 / total_targets as f64;
    for (i, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        let row = acts.logits.row(i);
        loss += cross_entropy(row, t);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        for (j, o) in dlogits.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] as f64 - max).exp() / z;
            let y = if j == t as usize { 1.0 } else { 0.0 };
            *o = ((p - y) * inv_total) as f32;
        }
    }
    let grads = backward(model, tokens, &acts, &dlogits)?;
    Ok((loss, grads))
}

/// Mean cross-entropy over every `Some` target in the batch and its gradient
/// with respect to all weights. Sequences are processed in parallel and
/// reduced in batch order, so results do not depend on the thread count.
pub fn forward_train(
    model: &Model,
    tokens: &[Vec<u32>],
    targets: &[Vec<Option<u32>>],
) -> Result<(f64, ModelWeights)> {
    if tokens.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if tokens.len() != targets.len() {
        return Err(shape_err(
            "forward_train",
            format!("{} token rows, {} target rows", tokens.len(), targets.len()),
        ));
    }
    let vocab = model.config.vocab_size;
    let mut total = 0usize;
    for (t, y) in tokens.iter().zip(targets) {
        if t.len() != y.len() {
            return Err(shape_err(
                "forward_train",
                format!("sequence of {} tokens has {} targets", t.len(), y.len()),
            ));
        }
        for &target in y.iter().flatten() {
            if target as usize >= vocab {
                return Err(Error::TokenOutOfVocab { token: target, vocab });
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("training batch has no targets"));
    }

    let parts: Vec<Result<(f64, ModelWeights)>> = tokens
        .par_iter()
        .zip(targets.par_iter())
        .map(|(t, y)| sequence_grad(model, t, y, total))
        .collect();
    let mut loss = 0.0f64;
    let mut grads = ModelWeights::zeros_like(&model.config);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (acc, p) in grads.params_mut().into_iter().zip(g.params()) {
            acc.add_scaled(p, 1.0)?;
        }
    }
    let loss = loss / total as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged { step: 0, loss });
    }
    Ok((loss, grads))
}
