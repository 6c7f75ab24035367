//! Per-block attention/layout relevance probe.
//!
//! For each prompt one baseline sampling pass captures every block at a
//! designated step; pooled attention is binarized to the layout's cell
//! budget and scored by mIoU against the planned boxes. Averaged scores
//! feed [`crate::align::select_guided_blocks`].

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::denoiser::{
    null_hook, pool_object_attention, CaptureSpec, Denoiser, DenoiserError, PooledAttention,
};
use crate::layout::SpatioTemporalLayout;
use crate::mask::object_support_grid;
use crate::parallel;
use crate::tokenizer::encode;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("ground-truth mask is empty")]
    EmptyTruth,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("probe step {0} outside sampler range {1}")]
    BadStep(usize, usize),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// Per-block mean mIoU over a probe prompt set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub block_scores: Vec<f64>,
    pub prompt_count: usize,
    pub sample_step: usize,
    /// How attention was binarized.
    pub binarization: String,
}

impl ProbeReport {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("serializable"))
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Mark exactly the `target_cells` highest-valued cells; ties resolve in
/// row-major order.
pub fn binarize_attention(pooled: &PooledAttention, target_cells: usize) -> Array3<f64> {
    assert!(target_cells >= 1);
    let dims = pooled.values.dim();
    let flat = pooled.values.as_slice().expect("standard layout");
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].partial_cmp(&flat[a]).unwrap().then(a.cmp(&b)));
    let mut out = Array3::zeros(dims);
    let out_flat = out.as_slice_mut().unwrap();
    for &idx in order.iter().take(target_cells.min(flat.len())) {
        out_flat[idx] = 1.0;
    }
    out
}

/// Mean IoU over the latent frames where `truth` is non-empty.
pub fn miou(pred: &Array3<f64>, truth: &Array3<f64>) -> Result<f64, ProbeError> {
    if pred.dim() != truth.dim() {
        return Err(ProbeError::ShapeMismatch(
            pred.shape().to_vec(),
            truth.shape().to_vec(),
        ));
    }
    let (tau, h, w) = truth.dim();
    if truth.iter().all(|&v| v <= 0.0) {
        return Err(ProbeError::EmptyTruth);
    }
    let mut total = 0.0;
    let mut active = 0usize;
    for t in 0..tau {
        let mut inter = 0usize;
        let mut union = 0usize;
        for r in 0..h {
            for c in 0..w {
                let p = pred[(t, r, c)] > 0.0;
                let q = truth[(t, r, c)] > 0.0;
                inter += (p && q) as usize;
                union += (p || q) as usize;
            }
        }
        // Frames where neither side marks a cell do not participate.
        if union > 0 {
            total += inter as f64 / union as f64;
            active += 1;
        }
    }
    Ok(total / active as f64)
}

/// Probe every block at `sample_step` over a prompt set. Prompts run in
/// parallel; the denoiser is shared read-only.
pub fn probe_blocks(
    denoiser: &Denoiser,
    prompts: &[String],
    layouts: &[SpatioTemporalLayout],
    sample_step: usize,
) -> Result<ProbeReport, ProbeError> {
    assert_eq!(prompts.len(), layouts.len());
    let cfg = &denoiser.config;
    if sample_step >= cfg.sampler_steps {
        return Err(ProbeError::BadStep(sample_step, cfg.sampler_steps));
    }
    let blocks = cfg.blocks;
    let indices: Vec<usize> = (0..prompts.len()).collect();
    let per_prompt: Vec<Result<Vec<(f64, usize)>, ProbeError>> =
        parallel::map_collect(&indices, |&i| {
            prompt_block_scores(denoiser, &prompts[i], &layouts[i], sample_step)
        });
    let mut sums = vec![(0.0, 0usize); blocks];
    for r in per_prompt {
        let scores = r?;
        for (b, (s, n)) in scores.into_iter().enumerate() {
            sums[b].0 += s;
            sums[b].1 += n;
        }
    }
    let block_scores = sums
        .into_iter()
        .map(|(s, n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    Ok(ProbeReport {
        block_scores,
        prompt_count: prompts.len(),
        sample_step,
        binarization: "area-matched top-k, row-major ties".into(),
    })
}

/// Per-block `(score_sum, object_count)` for one prompt.
fn prompt_block_scores(
    denoiser: &Denoiser,
    prompt: &str,
    layout: &SpatioTemporalLayout,
    sample_step: usize,
) -> Result<Vec<(f64, usize)>, ProbeError> {
    let cfg = &denoiser.config;
    let tokens = encode(prompt, cfg.vocab, cfg.text_len);
    let capture = CaptureSpec {
        steps: [sample_step].into_iter().collect(),
        blocks: (0..cfg.blocks).collect(),
    };
    let noise_seed = crate::tokenizer::fnv1a64(prompt.as_bytes());
    let run = denoiser.sample(&tokens, noise_seed, None, &capture, null_hook)?;
    let record = &run.records[&sample_step];
    let (tau, h, w) = cfg.latent_dims;
    let mut out = vec![(0.0, 0usize); cfg.blocks];
    for (oi, obj) in layout.objects.iter().enumerate() {
        if obj.token_span.end > tokens.len() {
            continue;
        }
        let truth = object_support_grid(obj, tau, h, w, layout.num_frames);
        let cells = truth.iter().filter(|&&v| v > 0.0).count();
        if cells == 0 {
            continue;
        }
        for (b, sink) in out.iter_mut().enumerate() {
            let pooled =
                pool_object_attention(record, b, &obj.token_span, cfg.latent_dims, oi)?;
            let pred = binarize_attention(&pooled, cells);
            sink.0 += miou(&pred, &truth)?;
            sink.1 += 1;
        }
    }
    Ok(out)
}

/// Pre/post optimization overlap for one sample: mean mIoU over objects and
/// the given blocks at a fixed record.
pub fn record_miou(
    record: &crate::denoiser::AttentionRecord,
    layout: &SpatioTemporalLayout,
    blocks: &BTreeSet<usize>,
    token_count: usize,
) -> Result<f64, ProbeError> {
    let (tau, h, w) = {
        let d = layout.latent_dims;
        (d.0, d.1, d.2)
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for (oi, obj) in layout.objects.iter().enumerate() {
        if obj.token_span.end > token_count {
            continue;
        }
        let truth = object_support_grid(obj, tau, h, w, layout.num_frames);
        let cells = truth.iter().filter(|&&v| v > 0.0).count();
        if cells == 0 {
            continue;
        }
        for &b in blocks {
            let pooled = pool_object_attention(record, b, &obj.token_span, layout.latent_dims, oi)?;
            let pred = binarize_attention(&pooled, cells);
            total += miou(&pred, &truth)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(ProbeError::EmptyTruth);
    }
    Ok(total / count as f64)
}
