//! Alignment objectives between pooled cross-attention and layout targets.
//!
//! The default objective is the Jensen–Shannon divergence between the pooled
//! attention and the object's soft mask, averaged over objects and guided
//! blocks. Binary cross-entropy and center-of-mass variants are selectable
//! behind [`LossKind`]. [`AlignmentObjective`] packages a loss with its
//! pooling chain as a differentiable function of raw attention weights.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::ops::Range;

use crate::denoiser::{AttentionLoss, AttentionRecord, DenoiserError, PooledAttention};
use crate::layout::SpatioTemporalLayout;
use crate::mask::{frame_box_centers, layout_masks, object_support_grid, MaskError, SoftMask};

/// Clamp for the cross-entropy logs.
const CE_CLAMP: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("input is not a distribution (sum {0})")]
    NotNormalized(f64),
    #[error("negative entry {0}")]
    NegativeEntry(f64),
    #[error("object {0} has no pooled attention / target")]
    MissingObject(usize),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Jsd,
    Ce,
    Com,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossKind::Jsd => "jsd",
            LossKind::Ce => "ce",
            LossKind::Com => "com",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsd" => Ok(LossKind::Jsd),
            "ce" => Ok(LossKind::Ce),
            "com" => Ok(LossKind::Com),
            other => Err(format!("unknown loss kind {other:?} (expected jsd|ce|com)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub loss_kind: LossKind,
    /// Blocks whose attention is guided; objects are weighted uniformly.
    pub guided_blocks: BTreeSet<usize>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig { loss_kind: LossKind::Jsd, guided_blocks: [1, 2].into_iter().collect() }
    }
}

fn check_distribution(p: &Array3<f64>, q: &Array3<f64>) -> Result<(), AlignError> {
    if p.shape() != q.shape() {
        return Err(AlignError::ShapeMismatch(p.shape().to_vec(), q.shape().to_vec()));
    }
    for side in [p, q] {
        if let Some(&neg) = side.iter().find(|&&v| v < 0.0) {
            return Err(AlignError::NegativeEntry(neg));
        }
        let sum: f64 = side.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(AlignError::NotNormalized(sum));
        }
    }
    Ok(())
}

/// Jensen–Shannon divergence in nats: `(KL(P||M) + KL(Q||M)) / 2` with
/// `M = (P + Q) / 2`; zero-probability terms contribute nothing.
pub fn jsd(p: &Array3<f64>, q: &Array3<f64>) -> Result<f64, AlignError> {
    check_distribution(p, q)?;
    let mut acc = 0.0;
    for (&pv, &qv) in p.iter().zip(q.iter()) {
        let m = 0.5 * (pv + qv);
        if pv > 0.0 {
            acc += 0.5 * pv * (pv / m).ln();
        }
        if qv > 0.0 {
            acc += 0.5 * qv * (qv / m).ln();
        }
    }
    Ok(acc)
}

/// `d JSD(P, Q) / d P`, defined where `P > 0`.
fn jsd_grad_p(p: &Array3<f64>, q: &Array3<f64>) -> Array3<f64> {
    let mut grad = Array3::zeros(p.dim());
    for ((g, &pv), &qv) in grad.iter_mut().zip(p.iter()).zip(q.iter()) {
        let m = 0.5 * (pv + qv);
        if pv > 0.0 {
            *g = 0.5 * (pv / m).ln();
        }
    }
    grad
}

/// Alignment targets for one object, shared by all loss variants.
#[derive(Debug, Clone)]
pub struct AlignTarget {
    pub object_id: usize,
    /// Soft mask distribution over the latent grid.
    pub soft: Array3<f64>,
    /// Binary union of rasterized boxes.
    pub binary: Array3<f64>,
    /// Per-latent-frame box centers; `None` outside the temporal range.
    pub frame_centers: Vec<Option<(f64, f64)>>,
}

/// Build per-object targets from a verified layout.
pub fn build_targets(layout: &SpatioTemporalLayout, sigma: f64) -> Result<Vec<AlignTarget>, AlignError> {
    let (tau, h, w) = layout.latent_dims;
    let masks = layout_masks(layout, sigma)?;
    Ok(layout
        .objects
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (obj, mask))| AlignTarget {
            object_id: i,
            soft: mask.values,
            binary: object_support_grid(obj, tau, h, w, layout.num_frames),
            frame_centers: frame_box_centers(obj, tau, layout.num_frames),
        })
        .collect())
}

/// Mean over objects of the mean over guided blocks of `jsd(pooled, mask)`.
pub fn loss_align(pooled: &[PooledAttention], masks: &[SoftMask]) -> Result<f64, AlignError> {
    let mut per_object: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in pooled {
        let mask = masks
            .iter()
            .find(|m| m.object_id == p.object_id)
            .ok_or(AlignError::MissingObject(p.object_id))?;
        per_object
            .entry(p.object_id)
            .or_default()
            .push(jsd(&p.values, &mask.values)?);
    }
    for m in masks {
        if !per_object.contains_key(&m.object_id) {
            return Err(AlignError::MissingObject(m.object_id));
        }
    }
    let n = per_object.len() as f64;
    Ok(per_object
        .values()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .sum::<f64>()
        / n)
}

/// Loss value plus the gradient with respect to each pooled map's values.
/// Entries pair 1:1 with `pooled`; the per-(object, block) weight is
/// `1 / (objects * blocks_per_object)`.
pub fn alignment_loss_grad(
    kind: LossKind,
    pooled: &[PooledAttention],
    targets: &[AlignTarget],
) -> Result<(f64, Vec<Array3<f64>>), AlignError> {
    let mut object_blocks: BTreeMap<usize, usize> = BTreeMap::new();
    for p in pooled {
        *object_blocks.entry(p.object_id).or_insert(0) += 1;
    }
    for t in targets {
        if !object_blocks.contains_key(&t.object_id) {
            return Err(AlignError::MissingObject(t.object_id));
        }
    }
    let n_objects = object_blocks.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pooled.len());
    for p in pooled {
        let target = targets
            .iter()
            .find(|t| t.object_id == p.object_id)
            .ok_or(AlignError::MissingObject(p.object_id))?;
        let weight = 1.0 / (n_objects * object_blocks[&p.object_id] as f64);
        let (value, mut grad) = match kind {
            LossKind::Jsd => (jsd(&p.values, &target.soft)?, jsd_grad_p(&p.values, &target.soft)),
            LossKind::Ce => ce_single(&p.values, &target.binary)?,
            LossKind::Com => com_single(&p.values, target)?,
        };
        total += weight * value;
        grad.mapv_inplace(|g| g * weight);
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Binary cross-entropy variant over all pooled/target pairs.
pub fn ce_loss(pooled: &[PooledAttention], targets: &[AlignTarget]) -> Result<f64, AlignError> {
    alignment_loss_grad(LossKind::Ce, pooled, targets).map(|(v, _)| v)
}

/// Center-of-mass variant over all pooled/target pairs.
pub fn com_loss(pooled: &[PooledAttention], targets: &[AlignTarget]) -> Result<f64, AlignError> {
    alignment_loss_grad(LossKind::Com, pooled, targets).map(|(v, _)| v)
}

/// BCE between the max-rescaled attention and the binary box mask, averaged
/// over cells. Rescaling by the max makes the loss invariant to positive
/// scaling of the raw attention.
fn ce_single(p: &Array3<f64>, binary: &Array3<f64>) -> Result<(f64, Array3<f64>), AlignError> {
    if p.shape() != binary.shape() {
        return Err(AlignError::ShapeMismatch(p.shape().to_vec(), binary.shape().to_vec()));
    }
    let cells = p.len() as f64;
    let flat = p.as_slice().expect("standard layout");
    let mut max_idx = 0;
    for (i, &v) in flat.iter().enumerate() {
        if v > flat[max_idx] {
            max_idx = i;
        }
    }
    let max = flat[max_idx];
    let mut value = 0.0;
    let mut d_phat = vec![0.0; flat.len()];
    for (i, (&pv, &b)) in flat.iter().zip(binary.iter()).enumerate() {
        let raw = pv / max;
        let phat = raw.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
        value -= (b * phat.ln() + (1.0 - b) * (1.0 - phat).ln()) / cells;
        if raw > CE_CLAMP && raw < 1.0 - CE_CLAMP {
            d_phat[i] = -(b / phat - (1.0 - b) / (1.0 - phat)) / cells;
        }
    }
    // p_hat_i = p_i / p_max: chain through the division and the max entry.
    let mut grad = Array3::zeros(p.dim());
    let gflat = grad.as_slice_mut().unwrap();
    let mut max_term = 0.0;
    for (i, &d) in d_phat.iter().enumerate() {
        gflat[i] += d / max;
        max_term += d * flat[i];
    }
    gflat[max_idx] -= max_term / (max * max);
    Ok((value, grad))
}

/// Per active latent frame, squared distance between the attention's spatial
/// center of mass and the box center, averaged over active frames. Cell
/// coordinates span `[0, 1]` corner to corner.
fn com_single(p: &Array3<f64>, target: &AlignTarget) -> Result<(f64, Array3<f64>), AlignError> {
    let (tau, h, w) = p.dim();
    if target.frame_centers.len() != tau {
        return Err(AlignError::ShapeMismatch(
            p.shape().to_vec(),
            vec![target.frame_centers.len()],
        ));
    }
    let coord = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let mut value = 0.0;
    let mut grad = Array3::zeros((tau, h, w));
    let active: Vec<usize> = (0..tau).filter(|&t| target.frame_centers[t].is_some()).collect();
    if active.is_empty() {
        return Err(AlignError::MissingObject(target.object_id));
    }
    let frame_weight = 1.0 / active.len() as f64;
    for &t in &active {
        let (bx, by) = target.frame_centers[t].unwrap();
        let mut s = 0.0;
        for r in 0..h {
            for c in 0..w {
                s += p[(t, r, c)];
            }
        }
        if s <= 0.0 {
            continue;
        }
        let mut com_x = 0.0;
        let mut com_y = 0.0;
        for r in 0..h {
            for c in 0..w {
                let u = p[(t, r, c)] / s;
                com_x += u * coord(c, w);
                com_y += u * coord(r, h);
            }
        }
        let dx = com_x - bx;
        let dy = com_y - by;
        value += frame_weight * (dx * dx + dy * dy);
        // dL/du_i, then through the in-frame normalization.
        let mut mean_du_u = 0.0;
        for r in 0..h {
            for c in 0..w {
                let du = 2.0 * dx * coord(c, w) + 2.0 * dy * coord(r, h);
                mean_du_u += du * (p[(t, r, c)] / s);
            }
        }
        for r in 0..h {
            for c in 0..w {
                let du = 2.0 * dx * coord(c, w) + 2.0 * dy * coord(r, h);
                grad[(t, r, c)] = frame_weight * (du - mean_du_u) / s;
            }
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum GuidePolicy {
    TopK(usize),
    Threshold(f64),
}

/// Pick guided blocks from per-block relevance scores. `TopK` breaks ties by
/// lower index; `Threshold` falls back to the single best block when nothing
/// qualifies.
pub fn select_guided_blocks(scores: &[f64], policy: GuidePolicy) -> BTreeSet<usize> {
    let argmax = scores
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
        .map(|(i, _)| i);
    match policy {
        GuidePolicy::TopK(k) => {
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            idx.into_iter().take(k).collect()
        }
        GuidePolicy::Threshold(thr) => {
            let chosen: BTreeSet<usize> = scores
                .iter()
                .enumerate()
                .filter(|(_, &s)| s >= thr)
                .map(|(i, _)| i)
                .collect();
            if chosen.is_empty() {
                argmax.into_iter().collect()
            } else {
                chosen
            }
        }
    }
}

/// The full differentiable objective: pool each object's attention at every
/// guided block, score against the targets, and push gradients back to the
/// raw attention weights.
pub struct AlignmentObjective<'a> {
    pub kind: LossKind,
    pub guided_blocks: &'a BTreeSet<usize>,
    /// Token span per object, parallel to `targets`.
    pub spans: Vec<Range<usize>>,
    pub targets: &'a [AlignTarget],
    pub latent_dims: (usize, usize, usize),
}

impl AlignmentObjective<'_> {
    /// Pool one (object, block) pair, keeping the pre-normalization total
    /// for the backward pass.
    fn pool(
        &self,
        record: &AttentionRecord,
        block: usize,
        object: usize,
    ) -> Result<(PooledAttention, f64), DenoiserError> {
        let probs = record
            .blocks
            .get(&block)
            .ok_or(DenoiserError::BlockNotCaptured(block))?;
        let (heads, n, _) = probs.dim();
        let span = &self.spans[object];
        if span.is_empty() {
            return Err(DenoiserError::EmptySpan);
        }
        let denom = (heads * span.len()) as f64;
        let mut flat = vec![0.0; n];
        for h in 0..heads {
            for (i, f) in flat.iter_mut().enumerate() {
                for s in span.clone() {
                    *f += probs[(h, i, s)];
                }
            }
        }
        for f in &mut flat {
            *f /= denom;
        }
        let total: f64 = flat.iter().sum();
        let values = Array3::from_shape_vec(
            self.latent_dims,
            flat.into_iter().map(|v| v / total).collect(),
        )
        .unwrap();
        Ok((PooledAttention { values, object_id: object, block }, total))
    }
}

impl AttentionLoss for AlignmentObjective<'_> {
    fn eval(
        &self,
        record: &AttentionRecord,
    ) -> Result<(f64, BTreeMap<usize, Array3<f64>>), DenoiserError> {
        let mut pooled = Vec::new();
        let mut totals = Vec::new();
        for object in 0..self.spans.len() {
            for &block in self.guided_blocks {
                let (p, total) = self.pool(record, block, object)?;
                pooled.push(p);
                totals.push(total);
            }
        }
        let (value, grads) = alignment_loss_grad(self.kind, &pooled, self.targets)
            .map_err(|e| DenoiserError::LossFailure(e.to_string()))?;

        let mut d_attn: BTreeMap<usize, Array3<f64>> = BTreeMap::new();
        for ((p, grad), &total) in pooled.iter().zip(&grads).zip(&totals) {
            let probs = &record.blocks[&p.block];
            let (heads, n, text_len) = probs.dim();
            let span = &self.spans[p.object_id];
            let denom = (heads * span.len()) as f64;
            // Through the sum-normalization: dq_i = (dp_i - sum_j dp_j p_j) / total.
            let p_flat = p.values.as_slice().unwrap();
            let g_flat = grad.as_slice().unwrap();
            let mut dot = 0.0;
            for (g, pv) in g_flat.iter().zip(p_flat) {
                dot += g * pv;
            }
            let sink = d_attn
                .entry(p.block)
                .or_insert_with(|| Array3::zeros((heads, n, text_len)));
            for i in 0..n {
                let dq = (g_flat[i] - dot) / total / denom;
                for h in 0..heads {
                    for s in span.clone() {
                        sink[(h, i, s)] += dq;
                    }
                }
            }
        }
        Ok((value, d_attn))
    }
}
