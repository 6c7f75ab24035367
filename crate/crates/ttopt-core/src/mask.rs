//! Soft spatiotemporal target masks.
//!
//! Each object's per-frame boxes are rasterized on the latent spatial grid,
//! temporally pooled to the latent frame count by uniform block mean,
//! smoothed with a truncated Gaussian (reflective padding), floored at a
//! small epsilon so divergences keep full support, and globally normalized
//! to sum 1 over the whole `(tau, h, w)` grid.

use ndarray::{Array2, Array3};

use crate::layout::{BBox, ObjectLayout};
use crate::parallel;

/// Floor applied before normalization so every cell carries mass.
pub const EPS_FLOOR: f64 = 1e-8;

/// Default Gaussian width in latent cells.
pub const DEFAULT_SIGMA: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("object overlaps no latent frame")]
    DegenerateObject,
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
}

/// Normalized spatiotemporal distribution for one object.
#[derive(Debug, Clone)]
pub struct SoftMask {
    /// Non-negative `(tau, h, w)` grid summing to 1.
    pub values: Array3<f64>,
    pub object_id: usize,
}

/// Rasterize a box on an `(h, w)` grid: a cell is 1 iff its center lies in
/// the half-open box `[x0, x1) x [y0, y1)`.
pub fn rasterize_box(b: &BBox, h: usize, w: usize) -> Array2<f64> {
    let mut grid = Array2::zeros((h, w));
    for r in 0..h {
        let cy = (r as f64 + 0.5) / h as f64;
        if cy < b.y0 || cy >= b.y1 {
            continue;
        }
        for c in 0..w {
            let cx = (c as f64 + 0.5) / w as f64;
            if cx >= b.x0 && cx < b.x1 {
                grid[(r, c)] = 1.0;
            }
        }
    }
    grid
}

/// Binary `(tau, h, w)` grid marking cells covered by the object's boxes:
/// a cell is set iff any covered video frame's box contains its center.
/// This is the layout-side ground truth for the probe and the CE loss.
pub fn object_support_grid(
    obj: &ObjectLayout,
    tau: usize,
    h: usize,
    w: usize,
    num_frames: usize,
) -> Array3<f64> {
    let block = num_frames / tau;
    let mut grid = Array3::zeros((tau, h, w));
    for t in 0..tau {
        for f in t * block..(t + 1) * block {
            if let Some(b) = obj.box_at(f) {
                let raster = rasterize_box(b, h, w);
                for r in 0..h {
                    for c in 0..w {
                        if raster[(r, c)] > 0.0 {
                            grid[(t, r, c)] = 1.0;
                        }
                    }
                }
            }
        }
    }
    grid
}

/// Per-latent-frame box centers (normalized coordinates), `None` for latent
/// frames the object does not touch. Centers average over the covered video
/// frames in each block.
pub fn frame_box_centers(
    obj: &ObjectLayout,
    tau: usize,
    num_frames: usize,
) -> Vec<Option<(f64, f64)>> {
    let block = num_frames / tau;
    (0..tau)
        .map(|t| {
            let mut sum = (0.0, 0.0);
            let mut count = 0usize;
            for f in t * block..(t + 1) * block {
                if let Some(b) = obj.box_at(f) {
                    let c = b.center();
                    sum.0 += c.0;
                    sum.1 += c.1;
                    count += 1;
                }
            }
            (count > 0).then(|| (sum.0 / count as f64, sum.1 / count as f64))
        })
        .collect()
}

/// Truncated Gaussian taps with radius `ceil(3 sigma)`, normalized to sum 1.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= norm;
    }
    taps
}

/// Reflect index `i` into `[0, n)` (mirror without repeating the edge).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable 2D convolution with reflective padding, applied per frame.
fn smooth_frame(frame: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = frame.dim();
    let radius = taps.len() / 2;
    let mut rows = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let cc = reflect(c as isize + k as isize - radius as isize, w);
                acc += t * frame[(r, cc)];
            }
            rows[(r, c)] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let rr = reflect(r as isize + k as isize - radius as isize, h);
                acc += t * rows[(rr, c)];
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Build the object's soft mask: rasterize, pool to latent frames, smooth,
/// floor, normalize.
pub fn soft_mask(
    obj: &ObjectLayout,
    tau: usize,
    h: usize,
    w: usize,
    num_frames: usize,
    sigma: f64,
    object_id: usize,
) -> Result<SoftMask, MaskError> {
    if sigma <= 0.0 {
        return Err(MaskError::BadSigma(sigma));
    }
    let block = num_frames / tau;
    if obj.start_frame >= num_frames || obj.end_frame < obj.start_frame {
        return Err(MaskError::DegenerateObject);
    }
    let taps = gaussian_kernel(sigma);
    let mut values = Array3::zeros((tau, h, w));
    let mut any = false;
    for t in 0..tau {
        // Mean of rasterized boxes over the block's video frames; frames
        // the object does not touch contribute zero grids.
        let mut pooled = Array2::zeros((h, w));
        let mut covered = false;
        for f in t * block..(t + 1) * block {
            if let Some(b) = obj.box_at(f) {
                pooled += &rasterize_box(b, h, w);
                covered = true;
            }
        }
        if covered {
            pooled /= block as f64;
            if pooled.iter().all(|&v| v == 0.0) {
                return Err(MaskError::DegenerateObject);
            }
            any = true;
            let smoothed = smooth_frame(&pooled, &taps);
            values.index_axis_mut(ndarray::Axis(0), t).assign(&smoothed);
        }
    }
    if !any {
        return Err(MaskError::DegenerateObject);
    }
    values.mapv_inplace(|v| v.max(EPS_FLOOR));
    let total: f64 = values.iter().sum();
    values /= total;
    Ok(SoftMask { values, object_id })
}

/// Soft masks for all objects of a layout, in object order.
pub fn layout_masks(
    layout: &crate::layout::SpatioTemporalLayout,
    sigma: f64,
) -> Result<Vec<SoftMask>, MaskError> {
    let (tau, h, w) = layout.latent_dims;
    let indices: Vec<usize> = (0..layout.objects.len()).collect();
    let results = parallel::map_collect(&indices, |&idx| {
        soft_mask(&layout.objects[idx], tau, h, w, layout.num_frames, sigma, idx)
    });
    results.into_iter().collect()
}
