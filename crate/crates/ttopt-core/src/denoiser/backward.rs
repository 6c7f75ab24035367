//! Reverse-mode gradients through the forward caches.
//!
//! Cotangents can be injected at the prediction and at any block's captured
//! cross-attention weights. Base-parameter gradients are optional so the
//! adapter-only path skips the weight-gradient matmuls.

use ndarray::{Array1, Array2, Array3};
use std::collections::BTreeMap;

use super::adapter::{AdapterSet, ProjKind, PROJ_KINDS};
use super::forward::{silu_grad, AttentionRecord, AttnCache, ForwardCache, LnCache};
use super::linalg::{a_bt, add_head_block, add_scaled, at_b, head_block, matmul};
use super::params::{AttnParams, LnParams, Params};
use super::{Denoiser, DenoiserError, LatentState};
use crate::parallel;

/// Gradient bundle; fields mirror what was requested.
#[derive(Debug)]
pub struct Gradients {
    pub theta: Option<Params>,
    pub adapters: Option<AdapterSet>,
}

/// Differentiable scalar of the captured attention: returns the loss value
/// and its gradient with respect to each captured block's raw weights.
pub trait AttentionLoss {
    fn eval(
        &self,
        record: &AttentionRecord,
    ) -> Result<(f64, BTreeMap<usize, Array3<f64>>), DenoiserError>;
}

fn ln_output(cache: &LnCache, p: &LnParams) -> Array2<f64> {
    let (rows, d) = cache.x_hat.dim();
    let mut out = Array2::zeros((rows, d));
    for r in 0..rows {
        for c in 0..d {
            out[(r, c)] = p.gamma[c] * cache.x_hat[(r, c)] + p.beta[c];
        }
    }
    out
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    p: &LnParams,
    mut theta: Option<&mut LnParams>,
) -> Array2<f64> {
    let (rows, d) = dy.dim();
    if let Some(t) = theta.as_deref_mut() {
        for r in 0..rows {
            for c in 0..d {
                t.gamma[c] += dy[(r, c)] * cache.x_hat[(r, c)];
                t.beta[c] += dy[(r, c)];
            }
        }
    }
    let mut dx = Array2::zeros((rows, d));
    let dy_s = dy.as_slice().unwrap();
    let xh_s = cache.x_hat.as_slice().unwrap();
    let gamma = p.gamma.as_slice().unwrap();
    let inv_std = cache.inv_std.as_slice().unwrap();
    parallel::for_each_row(dx.as_slice_mut().unwrap(), d, |r, row| {
        let dy_r = &dy_s[r * d..r * d + d];
        let xh_r = &xh_s[r * d..r * d + d];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for c in 0..d {
            let g = dy_r[c] * gamma[c];
            mean_g += g;
            mean_gx += g * xh_r[c];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for c in 0..d {
            let g = dy_r[c] * gamma[c];
            row[c] = inv_std[r] * (g - mean_g - xh_r[c] * mean_gx);
        }
    });
    dx
}

fn softmax_vjp(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let (n, m) = probs.dim();
    let mut out = Array2::zeros((n, m));
    let p_s = probs.as_slice().unwrap();
    let dp_s = d_probs.as_slice().unwrap();
    parallel::for_each_row(out.as_slice_mut().unwrap(), m, |r, row| {
        let p = &p_s[r * m..r * m + m];
        let dp = &dp_s[r * m..r * m + m];
        let mut dot = 0.0;
        for (a, b) in p.iter().zip(dp) {
            dot += a * b;
        }
        for j in 0..m {
            row[j] = p[j] * (dp[j] - dot);
        }
    });
    out
}

/// Backward through a projection `y = x·w + (x·a)·b / r`.
/// Accumulates `d_x`, plus weight and factor gradients when sinks are given.
#[allow(clippy::too_many_arguments)]
fn project_backward(
    d_y: &Array2<f64>,
    x: &Array2<f64>,
    mid: Option<&Array2<f64>>,
    w: &Array2<f64>,
    adapter: Option<(&AdapterSet, usize, ProjKind)>,
    d_x: &mut Array2<f64>,
    theta_w: Option<&mut Array2<f64>>,
    adapter_grads: Option<(&mut AdapterSet, usize, ProjKind)>,
) {
    *d_x += &a_bt(d_y, w);
    if let Some(dw) = theta_w {
        *dw += &at_b(x, d_y);
    }
    if let Some((set, block, proj)) = adapter {
        let pair = set.pair(block, proj);
        let scale = set.scale();
        let d_y_bt = a_bt(d_y, &pair.b); // (rows, r)
        add_scaled(d_x, &a_bt(&d_y_bt, &pair.a), scale);
        if let Some((sink, gblock, gproj)) = adapter_grads {
            let gpair = sink.pair_mut(gblock, gproj);
            add_scaled(&mut gpair.a, &at_b(x, &d_y_bt), scale);
            let mid = mid.expect("lora midpoint cached when adapters attached");
            add_scaled(&mut gpair.b, &at_b(mid, d_y), scale);
        }
    }
}

/// Backward through one attention application. Returns cotangents for the
/// query-side input and the key/value-side input.
#[allow(clippy::too_many_arguments)]
fn attention_backward(
    cache: &AttnCache,
    d_out: &Array2<f64>,
    d_probs_extra: Option<&Array3<f64>>,
    params: &AttnParams,
    heads: usize,
    adapters: Option<(&AdapterSet, usize)>,
    mut theta: Option<&mut AttnParams>,
    mut adapter_grads: Option<(&mut AdapterSet, usize)>,
) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = cache.input.dim();
    let m = cache.kv_input.nrows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mids = cache.lora_mid.as_ref();

    // Output projection.
    let mut d_merged = Array2::zeros((n, d));
    project_backward(
        d_out,
        &cache.merged,
        mids.map(|m| &m[3]),
        &params.wo,
        adapters.map(|(s, b)| (s, b, ProjKind::Output)),
        &mut d_merged,
        theta.as_deref_mut().map(|t| &mut t.wo),
        adapter_grads.as_mut().map(|t| (&mut *t.0, t.1, ProjKind::Output)),
    );

    // Heads.
    let mut d_q = Array2::zeros((n, d));
    let mut d_k = Array2::zeros((m, d));
    let mut d_v = Array2::zeros((m, d));
    for h in 0..heads {
        let qh = head_block(&cache.q, h, dh);
        let kh = head_block(&cache.k, h, dh);
        let vh = head_block(&cache.v, h, dh);
        let probs_h = cache.probs.index_axis(ndarray::Axis(0), h).to_owned();
        let d_out_h = head_block(&d_merged, h, dh);

        let mut d_probs = a_bt(&d_out_h, &vh);
        if let Some(extra) = d_probs_extra {
            let slice = extra.index_axis(ndarray::Axis(0), h);
            for (dp, e) in d_probs.iter_mut().zip(slice.iter()) {
                *dp += e;
            }
        }
        let mut d_logits = softmax_vjp(&probs_h, &d_probs);
        d_logits.mapv_inplace(|v| v * scale);

        add_head_block(&mut d_q, &matmul(&d_logits, &kh), h, dh);
        add_head_block(&mut d_k, &at_b(&d_logits, &qh), h, dh);
        add_head_block(&mut d_v, &at_b(&probs_h, &d_out_h), h, dh);
    }

    // Input projections.
    let mut d_input = Array2::zeros((n, d));
    let mut d_kv = Array2::zeros((m, d));
    project_backward(
        &d_q,
        &cache.input,
        mids.map(|m| &m[0]),
        &params.wq,
        adapters.map(|(s, b)| (s, b, ProjKind::Query)),
        &mut d_input,
        theta.as_deref_mut().map(|t| &mut t.wq),
        adapter_grads.as_mut().map(|t| (&mut *t.0, t.1, ProjKind::Query)),
    );
    project_backward(
        &d_k,
        &cache.kv_input,
        mids.map(|m| &m[1]),
        &params.wk,
        adapters.map(|(s, b)| (s, b, ProjKind::Key)),
        &mut d_kv,
        theta.as_deref_mut().map(|t| &mut t.wk),
        adapter_grads.as_mut().map(|t| (&mut *t.0, t.1, ProjKind::Key)),
    );
    project_backward(
        &d_v,
        &cache.kv_input,
        mids.map(|m| &m[2]),
        &params.wv,
        adapters.map(|(s, b)| (s, b, ProjKind::Value)),
        &mut d_kv,
        theta.as_deref_mut().map(|t| &mut t.wv),
        adapter_grads.as_mut().map(|t| (&mut *t.0, t.1, ProjKind::Value)),
    );
    (d_input, d_kv)
}

impl Denoiser {
    /// Reverse pass over a forward cache. `d_pred` seeds the prediction
    /// output, `d_attn` seeds captured cross-attention weights per block.
    /// Adapter gradients are produced when `adapters` is attached; base
    /// gradients when `want_theta` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_pred: Option<&Array2<f64>>,
        d_attn: &BTreeMap<usize, Array3<f64>>,
        adapters: Option<&AdapterSet>,
        want_theta: bool,
    ) -> Result<Gradients, DenoiserError> {
        let cfg = &self.config;
        let n = cfg.latent_cells();
        let d = cfg.dim;
        let s_len = cache.tokens.len();
        if let Some(dp) = d_pred {
            if dp.dim() != (n, d) {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "d_pred {:?} vs ({n}, {d})",
                    dp.dim()
                )));
            }
        }
        for (&b, cot) in d_attn {
            if b >= cfg.blocks {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "attention cotangent block {b} outside 0..{}",
                    cfg.blocks
                )));
            }
            if cot.dim() != (cfg.heads, n, s_len) {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "attention cotangent {:?} vs ({}, {n}, {s_len})",
                    cot.dim(),
                    cfg.heads
                )));
            }
        }

        let mut theta = want_theta.then(|| Params::zeros_like(cfg));
        let mut adapter_sink = adapters.map(|a| a.zeros_like());

        // Prediction head.
        let mut dx = match d_pred {
            Some(dp) => {
                if let Some(t) = theta.as_mut() {
                    t.w_out += &at_b(&cache.normed_out, dp);
                }
                let d_normed = a_bt(dp, &self.params.w_out);
                layer_norm_backward(
                    &d_normed,
                    &cache.ln_out,
                    &self.params.ln_out,
                    theta.as_mut().map(|t| &mut t.ln_out),
                )
            }
            None => Array2::zeros((n, d)),
        };

        let mut d_text = Array2::zeros((s_len, d));

        for (bi, bc) in cache.blocks.iter().enumerate().rev() {
            let bp = &self.params.blocks[bi];

            // MLP.
            let d_mlp_out = dx;
            let mut d_x_mid2 = d_mlp_out.clone();
            let mut d_s = a_bt(&d_mlp_out, &bp.mlp.w2);
            if let Some(t) = theta.as_mut() {
                t.blocks[bi].mlp.w2 += &at_b(&bc.mlp_s, &d_mlp_out);
            }
            for (dsv, hv) in d_s.iter_mut().zip(bc.mlp_h.iter()) {
                *dsv *= silu_grad(*hv);
            }
            if let Some(t) = theta.as_mut() {
                let c_norm = ln_output(&bc.ln3, &bp.ln3);
                t.blocks[bi].mlp.w1 += &at_b(&c_norm, &d_s);
            }
            let d_c_norm = a_bt(&d_s, &bp.mlp.w1);
            d_x_mid2 += &layer_norm_backward(
                &d_c_norm,
                &bc.ln3,
                &bp.ln3,
                theta.as_mut().map(|t| &mut t.blocks[bi].ln3),
            );

            // Cross-attention.
            let mut d_x_mid = d_x_mid2.clone();
            let (d_b_norm, d_text_block) = attention_backward(
                &bc.ca,
                &d_x_mid2,
                d_attn.get(&bi),
                &bp.cross_attn,
                cfg.heads,
                adapters.map(|s| (s, bi)),
                theta.as_mut().map(|t| &mut t.blocks[bi].cross_attn),
                adapter_sink.as_mut().map(|s| (s, bi)),
            );
            d_text += &d_text_block;
            d_x_mid += &layer_norm_backward(
                &d_b_norm,
                &bc.ln2,
                &bp.ln2,
                theta.as_mut().map(|t| &mut t.blocks[bi].ln2),
            );

            // Self-attention.
            let mut d_x_in = d_x_mid.clone();
            let (d_a_q, d_a_kv) = attention_backward(
                &bc.sa,
                &d_x_mid,
                None,
                &bp.self_attn,
                cfg.heads,
                None,
                theta.as_mut().map(|t| &mut t.blocks[bi].self_attn),
                None,
            );
            let mut d_a = d_a_q;
            d_a += &d_a_kv;
            d_x_in += &layer_norm_backward(
                &d_a,
                &bc.ln1,
                &bp.ln1,
                theta.as_mut().map(|t| &mut t.blocks[bi].ln1),
            );
            dx = d_x_in;
        }

        // Input adds: x0 = z + latent_pos + time_emb.
        if let Some(t) = theta.as_mut() {
            t.latent_pos += &dx;
            let mut d_emb = Array1::<f64>::zeros(d);
            for r in 0..n {
                for c in 0..d {
                    d_emb[c] += dx[(r, c)];
                }
            }
            for i in 0..d {
                for j in 0..d {
                    t.time_proj[(i, j)] += cache.time_feats[i] * d_emb[j];
                }
            }
        }

        // Text path.
        let d_text_raw = layer_norm_backward(
            &d_text,
            &cache.ln_text,
            &self.params.ln_text,
            theta.as_mut().map(|t| &mut t.ln_text),
        );
        if let Some(t) = theta.as_mut() {
            for (i, &tok) in cache.tokens.iter().enumerate() {
                for c in 0..d {
                    t.text_embed[(tok, c)] += d_text_raw[(i, c)];
                    t.text_pos[(i, c)] += d_text_raw[(i, c)];
                }
            }
        }

        Ok(Gradients { theta, adapters: adapter_sink })
    }

    /// Loss gradient with respect to every adapter factor at the given
    /// latent state. Base parameters are read-only throughout.
    pub fn grad_wrt_adapters(
        &self,
        state: &LatentState,
        tokens: &[usize],
        adapters: &AdapterSet,
        capture: &std::collections::BTreeSet<usize>,
        loss: &dyn AttentionLoss,
    ) -> Result<(f64, AdapterSet), DenoiserError> {
        let z = super::flatten(&state.z);
        let sigma = self.config.sigma_at(state.t);
        let (_, record, cache) = self.forward_flat(&z, sigma, tokens, Some(adapters), capture)?;
        let (value, d_attn) = loss.eval(&record)?;
        if !value.is_finite() {
            return Err(DenoiserError::NonFiniteLoss(value));
        }
        let grads = self.backward(&cache, None, &d_attn, Some(adapters), false)?;
        Ok((value, grads.adapters.expect("adapter gradients requested")))
    }
}

const _: () = {
    // Q, K, V, O order is load-bearing for the serialization formats.
    assert!(PROJ_KINDS.len() == 4);
};
