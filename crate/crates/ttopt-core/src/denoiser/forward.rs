//! Forward pass with per-block caches for the hand-rolled backward pass.
//!
//! Block wiring is pre-norm residual: self-attention over the latent tokens,
//! cross-attention from latent queries to text keys/values (adapters live on
//! its Q/K/V/O projections, attention weights are captured here), then a
//! two-layer SiLU MLP. Text features are token embeddings plus positions,
//! layer-normed once.

use ndarray::{Array1, Array2, Array3};
use std::collections::BTreeMap;
use std::ops::Range;

use super::adapter::{AdapterSet, ProjKind};
use super::linalg::{a_bt, add_head_block, head_block, matmul, softmax_rows};
use super::params::{AttnParams, LnParams};
use super::{Denoiser, DenoiserError};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Cross-attention weights captured during one forward pass, keyed by block
/// index. Each entry is `(heads, latent_cells, text_len)` with softmax rows.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub blocks: BTreeMap<usize, Array3<f64>>,
}

/// Per-object pooled attention: heads and the phrase's text columns averaged
/// out, reshaped to the latent grid, normalized to sum 1.
#[derive(Debug, Clone)]
pub struct PooledAttention {
    pub values: Array3<f64>,
    pub object_id: usize,
    pub block: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    /// Normalized pre-scale activations.
    pub x_hat: Array2<f64>,
    /// Per-row `1 / sqrt(var + eps)`.
    pub inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(x: &Array2<f64>, ln: &LnParams) -> (Array2<f64>, LnCache) {
    let (rows, d) = x.dim();
    let mut out = Array2::zeros((rows, d));
    let mut x_hat = Array2::zeros((rows, d));
    let mut inv_std = Array1::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let xh = (x[(r, c)] - mean) * is;
            x_hat[(r, c)] = xh;
            out[(r, c)] = ln.gamma[c] * xh + ln.beta[c];
        }
    }
    (out, LnCache { x_hat, inv_std })
}

/// One attention application (self or cross) with everything backward needs.
#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    /// Projection input (n, d) — the layer-normed queries-side activations.
    pub input: Array2<f64>,
    /// Key/value-side input (m, d); equals `input` for self-attention.
    pub kv_input: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax weights per head `(H, n, m)`.
    pub probs: Array3<f64>,
    /// Concatenated head outputs before the output projection `(n, d)`.
    pub merged: Array2<f64>,
    /// LoRA midpoints `input·a` per projection, when adapters are attached.
    pub lora_mid: Option<[Array2<f64>; 4]>,
}

/// Apply a projection with an optional adapter: `x·w + (x·a)·b / r`.
/// Returns the output and the LoRA midpoint `x·a`.
fn project(
    x: &Array2<f64>,
    w: &Array2<f64>,
    adapter: Option<(&AdapterSet, usize, ProjKind)>,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut out = matmul(x, w);
    match adapter {
        Some((set, block, proj)) => {
            let pair = set.pair(block, proj);
            let mid = matmul(x, &pair.a);
            let contrib = matmul(&mid, &pair.b);
            let scale = set.scale();
            for (o, c) in out.iter_mut().zip(contrib.iter()) {
                *o += scale * c;
            }
            (out, Some(mid))
        }
        None => (out, None),
    }
}

pub(crate) fn attention(
    input: &Array2<f64>,
    kv_input: &Array2<f64>,
    params: &AttnParams,
    heads: usize,
    adapters: Option<(&AdapterSet, usize)>,
) -> (Array2<f64>, AttnCache) {
    let (n, d) = input.dim();
    let m = kv_input.nrows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let ad = |proj| adapters.map(|(set, block)| (set, block, proj));
    let (q, q_mid) = project(input, &params.wq, ad(ProjKind::Query));
    let (k, k_mid) = project(kv_input, &params.wk, ad(ProjKind::Key));
    let (v, v_mid) = project(kv_input, &params.wv, ad(ProjKind::Value));

    let mut probs = Array3::zeros((heads, n, m));
    let mut merged = Array2::zeros((n, d));
    for h in 0..heads {
        let qh = head_block(&q, h, dh);
        let kh = head_block(&k, h, dh);
        let vh = head_block(&v, h, dh);
        let mut logits = a_bt(&qh, &kh);
        logits.mapv_inplace(|v| v * scale);
        softmax_rows(&mut logits);
        let out_h = matmul(&logits, &vh);
        add_head_block(&mut merged, &out_h, h, dh);
        probs.index_axis_mut(ndarray::Axis(0), h).assign(&logits);
    }

    let (out, o_mid) = project(&merged, &params.wo, ad(ProjKind::Output));
    let lora_mid = match (q_mid, k_mid, v_mid, o_mid) {
        (Some(qm), Some(km), Some(vm), Some(om)) => Some([qm, km, vm, om]),
        _ => None,
    };
    let cache = AttnCache {
        input: input.clone(),
        kv_input: kv_input.clone(),
        q,
        k,
        v,
        probs,
        merged,
        lora_mid,
    };
    (out, cache)
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub ln1: LnCache,
    pub sa: AttnCache,
    pub ln2: LnCache,
    pub ca: AttnCache,
    pub ln3: LnCache,
    /// MLP pre-activation `(n, 4d)`.
    pub mlp_h: Array2<f64>,
    /// MLP post-activation `(n, 4d)`.
    pub mlp_s: Array2<f64>,
}

/// Everything one forward pass computed, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) tokens: Vec<usize>,
    pub(crate) ln_text: LnCache,
    pub(crate) time_feats: Array1<f64>,
    pub(crate) blocks: Vec<BlockCache>,
    pub(crate) ln_out: LnCache,
    pub(crate) normed_out: Array2<f64>,
}

impl Denoiser {
    /// Sinusoidal features of the noise level.
    pub(crate) fn time_features(&self, sigma: f64) -> Array1<f64> {
        let d = self.config.dim;
        let mut feats = Array1::zeros(d);
        let t = sigma * 1000.0;
        for i in 0..d / 2 {
            let omega = (10_000.0f64).powf(-2.0 * i as f64 / d as f64);
            feats[2 * i] = (t * omega).sin();
            feats[2 * i + 1] = (t * omega).cos();
        }
        feats
    }

    /// Text features for a token sequence: embedding + position, layer-normed.
    fn encode_text(&self, tokens: &[usize]) -> Result<(Array2<f64>, Array2<f64>, LnCache), DenoiserError> {
        let cfg = &self.config;
        if tokens.len() > cfg.text_len {
            return Err(DenoiserError::ShapeMismatch(format!(
                "{} tokens exceed text_len {}",
                tokens.len(),
                cfg.text_len
            )));
        }
        if tokens.is_empty() {
            return Err(DenoiserError::ShapeMismatch("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(DenoiserError::ShapeMismatch(format!(
                "token id {bad} outside vocab {}",
                cfg.vocab
            )));
        }
        let d = cfg.dim;
        let mut raw = Array2::zeros((tokens.len(), d));
        for (i, &tok) in tokens.iter().enumerate() {
            for c in 0..d {
                raw[(i, c)] = self.params.text_embed[(tok, c)] + self.params.text_pos[(i, c)];
            }
        }
        let (text, ln) = layer_norm(&raw, &self.params.ln_text);
        Ok((raw, text, ln))
    }

    /// Full forward pass on a flattened latent `(n, d)` at noise level
    /// `sigma`, capturing cross-attention for the given blocks.
    pub(crate) fn forward_flat(
        &self,
        z: &Array2<f64>,
        sigma: f64,
        tokens: &[usize],
        adapters: Option<&AdapterSet>,
        capture: &std::collections::BTreeSet<usize>,
    ) -> Result<(Array2<f64>, AttentionRecord, ForwardCache), DenoiserError> {
        let cfg = &self.config;
        let n = cfg.latent_cells();
        let d = cfg.dim;
        if z.dim() != (n, d) {
            return Err(DenoiserError::ShapeMismatch(format!(
                "latent {:?} vs ({n}, {d})",
                z.dim()
            )));
        }
        if let Some(set) = adapters {
            set.check_shapes(cfg)?;
        }
        if let Some(&bad) = capture.iter().find(|&&b| b >= cfg.blocks) {
            return Err(DenoiserError::ShapeMismatch(format!(
                "capture block {bad} outside 0..{}",
                cfg.blocks
            )));
        }

        let (_text_raw, text, ln_text) = self.encode_text(tokens)?;
        let time_feats = self.time_features(sigma);
        let time_emb = time_feats.dot(&self.params.time_proj);

        let mut x = z.clone();
        for r in 0..n {
            for c in 0..d {
                x[(r, c)] += self.params.latent_pos[(r, c)] + time_emb[c];
            }
        }

        let mut record = AttentionRecord::default();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for (bi, bp) in self.params.blocks.iter().enumerate() {
            let x_in = x;
            let (a_norm, ln1) = layer_norm(&x_in, &bp.ln1);
            let (sa_out, sa) = attention(&a_norm, &a_norm, &bp.self_attn, cfg.heads, None);
            let mut x_mid = x_in.clone();
            x_mid += &sa_out;

            let (b_norm, ln2) = layer_norm(&x_mid, &bp.ln2);
            let (ca_out, ca) = attention(
                &b_norm,
                &text,
                &bp.cross_attn,
                cfg.heads,
                adapters.map(|s| (s, bi)),
            );
            if capture.contains(&bi) {
                record.blocks.insert(bi, ca.probs.clone());
            }
            let mut x_mid2 = x_mid.clone();
            x_mid2 += &ca_out;

            let (c_norm, ln3) = layer_norm(&x_mid2, &bp.ln3);
            let mlp_h = matmul(&c_norm, &bp.mlp.w1);
            let mlp_s = mlp_h.mapv(silu);
            let mlp_out = matmul(&mlp_s, &bp.mlp.w2);
            let mut x_next = x_mid2.clone();
            x_next += &mlp_out;

            blocks.push(BlockCache { ln1, sa, ln2, ca, ln3, mlp_h, mlp_s });
            x = x_next;
        }

        let x_out = x;
        let (normed_out, ln_out) = layer_norm(&x_out, &self.params.ln_out);
        let pred = matmul(&normed_out, &self.params.w_out);

        let cache = ForwardCache {
            tokens: tokens.to_vec(),
            ln_text,
            time_feats,
            blocks,
            ln_out,
            normed_out,
        };
        Ok((pred, record, cache))
    }
}

/// Average the captured weights of `block` over heads and the span's text
/// columns, reshape to the latent grid, and normalize to sum 1.
pub fn pool_object_attention(
    record: &AttentionRecord,
    block: usize,
    span: &Range<usize>,
    latent_dims: (usize, usize, usize),
    object_id: usize,
) -> Result<PooledAttention, DenoiserError> {
    let probs = record
        .blocks
        .get(&block)
        .ok_or(DenoiserError::BlockNotCaptured(block))?;
    let (heads, n, text_len) = probs.dim();
    if span.is_empty() {
        return Err(DenoiserError::EmptySpan);
    }
    if span.end > text_len {
        return Err(DenoiserError::ShapeMismatch(format!(
            "span {:?} outside text length {text_len}",
            span
        )));
    }
    let (tau, h, w) = latent_dims;
    if tau * h * w != n {
        return Err(DenoiserError::ShapeMismatch(format!(
            "latent dims {latent_dims:?} vs {n} cells"
        )));
    }
    let denom = (heads * span.len()) as f64;
    let mut flat = Array1::zeros(n);
    for hd in 0..heads {
        for i in 0..n {
            let mut acc = 0.0;
            for s in span.clone() {
                acc += probs[(hd, i, s)];
            }
            flat[i] += acc;
        }
    }
    flat.mapv_inplace(|v| v / denom);
    let total = flat.sum();
    flat.mapv_inplace(|v| v / total);
    let values = Array3::from_shape_vec((tau, h, w), flat.to_vec()).unwrap();
    Ok(PooledAttention { values, object_id, block })
}
