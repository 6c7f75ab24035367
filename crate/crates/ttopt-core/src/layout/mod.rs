//! Spatiotemporal layouts: per-object phrases with bounding-box trajectories
//! over a frame range, planned from text prompts.
//!
//! Boxes use corner form `(x0, y0, x1, y1)` normalized to `[0, 1]`. Planners
//! emit sparse keyframes which [`plan_layout`] interpolates to per-frame
//! boxes; [`verify_layout`] clamps and repairs a layout and reports every
//! correction; [`abstract_prompt`] replaces object phrases with `<object K>`
//! placeholders so structurally identical prompts share one memory key.

mod external;
mod planner;

pub use external::{ChatClient, ChatPlanner, ChatPlannerConfig};
pub use planner::RuleBasedPlanner;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use crate::tokenizer::{find_token_span, tokenize};

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error("planner failure: {0}")]
    PlannerFailure(String),
    #[error("planner found no groundable phrases in prompt")]
    NoObjects,
    #[error("object phrase {0:?} has no match in the prompt")]
    Unfixable(String),
    #[error("keyframe list is empty")]
    EmptyKeyframes,
    #[error("keyframe frames must be strictly increasing")]
    UnorderedKeyframes,
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("malformed layout: {0}")]
    Malformed(String),
    #[error("layout io: {0}")]
    Io(#[from] std::io::Error),
    #[error("layout parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Axis-aligned box in normalized frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, LayoutError> {
        let b = BBox { x0, y0, x1, y1 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(LayoutError::InvalidBox(format!("({x0}, {y0}, {x1}, {y1})")))
        }
    }

    /// Construct from center and side lengths, without range validation.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x0: cx - w / 2.0,
            y0: cy - h / 2.0,
            x1: cx + w / 2.0,
            y1: cy + h / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        0.0 <= self.x0 && self.x0 < self.x1 && self.x1 <= 1.0
            && 0.0 <= self.y0 && self.y0 < self.y1 && self.y1 <= 1.0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Coordinate-wise linear interpolation between two boxes.
    pub fn lerp(a: &BBox, b: &BBox, t: f64) -> BBox {
        let l = |u: f64, v: f64| u + (v - u) * t;
        BBox {
            x0: l(a.x0, b.x0),
            y0: l(a.y0, b.y0),
            x1: l(a.x1, b.x1),
            y1: l(a.y1, b.y1),
        }
    }
}

/// One object's phrase, token span, and per-frame box trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLayout {
    pub phrase: String,
    pub token_span: Range<usize>,
    pub boxes: Vec<BBox>,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl ObjectLayout {
    /// Box at a video frame, if the object is active there.
    pub fn box_at(&self, frame: usize) -> Option<&BBox> {
        if frame < self.start_frame || frame > self.end_frame {
            return None;
        }
        self.boxes.get(frame - self.start_frame)
    }
}

/// A prompt's full layout over the video and its latent grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalLayout {
    pub prompt: String,
    pub objects: Vec<ObjectLayout>,
    pub num_frames: usize,
    /// Latent grid sizes `(tau, h, w)`; `num_frames` is a multiple of `tau`.
    pub latent_dims: (usize, usize, usize),
}

impl SpatioTemporalLayout {
    pub fn validate(&self) -> Result<(), LayoutError> {
        if self.objects.is_empty() {
            return Err(LayoutError::Malformed("objects list is empty".into()));
        }
        let (tau, _, _) = self.latent_dims;
        if tau == 0 || self.num_frames == 0 || self.num_frames % tau != 0 {
            return Err(LayoutError::Malformed(format!(
                "num_frames {} is not a positive multiple of tau {}",
                self.num_frames, tau
            )));
        }
        for obj in &self.objects {
            if obj.start_frame > obj.end_frame || obj.end_frame >= self.num_frames {
                return Err(LayoutError::Malformed(format!(
                    "object {:?} frame range [{}, {}] outside [0, {})",
                    obj.phrase, obj.start_frame, obj.end_frame, self.num_frames
                )));
            }
            if obj.boxes.len() != obj.end_frame - obj.start_frame + 1 {
                return Err(LayoutError::Malformed(format!(
                    "object {:?} has {} boxes for range [{}, {}]",
                    obj.phrase,
                    obj.boxes.len(),
                    obj.start_frame,
                    obj.end_frame
                )));
            }
        }
        Ok(())
    }
}

/// Sparse plan for one object, as produced by planners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedObject {
    pub phrase: String,
    pub start_frame: usize,
    pub end_frame: usize,
    /// `(frame, box)` keyframes with strictly increasing frames.
    pub keyframes: Vec<(usize, BBox)>,
}

/// A planner's raw output before interpolation and span resolution.
#[derive(Debug, Clone, Default)]
pub struct LayoutPlan {
    pub objects: Vec<PlannedObject>,
}

/// Text-to-layout planner. The rule-based planner works offline; the chat
/// planner drives an external completion endpoint.
pub trait Planner {
    fn plan(&self, prompt: &str) -> Result<LayoutPlan, LayoutError>;
    fn num_frames(&self) -> usize;
    fn latent_dims(&self) -> (usize, usize, usize);
}

/// Plan a layout for `prompt`: run the planner, resolve each phrase to a
/// token span, and interpolate keyframes to per-frame boxes.
pub fn plan_layout(prompt: &str, planner: &dyn Planner) -> Result<SpatioTemporalLayout, LayoutError> {
    if prompt.trim().is_empty() {
        return Err(LayoutError::PlannerFailure("empty prompt".into()));
    }
    let plan = planner.plan(prompt)?;
    if plan.objects.is_empty() {
        return Err(LayoutError::NoObjects);
    }
    let num_frames = planner.num_frames();
    let prompt_tokens = tokenize(prompt);
    let mut objects = Vec::with_capacity(plan.objects.len());
    for po in plan.objects {
        let end = po.end_frame.min(num_frames.saturating_sub(1));
        let start = po.start_frame.min(end);
        let boxes = interpolate_keyframes_over(&po.keyframes, start, end)?;
        let phrase_tokens = tokenize(&po.phrase);
        let token_span = find_token_span(&prompt_tokens, &phrase_tokens)
            .ok_or_else(|| LayoutError::Unfixable(po.phrase.clone()))?;
        objects.push(ObjectLayout {
            phrase: po.phrase,
            token_span,
            boxes,
            start_frame: start,
            end_frame: end,
        });
    }
    let layout = SpatioTemporalLayout {
        prompt: prompt.to_string(),
        objects,
        num_frames,
        latent_dims: planner.latent_dims(),
    };
    layout.validate()?;
    Ok(layout)
}

/// Per-frame boxes for the frame range spanned by the keyframes themselves.
pub fn interpolate_keyframes(keyframes: &[(usize, BBox)]) -> Result<Vec<BBox>, LayoutError> {
    match keyframes {
        [] => Err(LayoutError::EmptyKeyframes),
        [(f, _), ..] => {
            let last = keyframes.last().unwrap().0;
            interpolate_keyframes_over(keyframes, *f, last)
        }
    }
}

/// Per-frame boxes over `[start, end]`: linear interpolation between
/// consecutive keyframes, constant extrapolation outside their range.
pub fn interpolate_keyframes_over(
    keyframes: &[(usize, BBox)],
    start: usize,
    end: usize,
) -> Result<Vec<BBox>, LayoutError> {
    if keyframes.is_empty() {
        return Err(LayoutError::EmptyKeyframes);
    }
    if keyframes.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(LayoutError::UnorderedKeyframes);
    }
    let mut boxes = Vec::with_capacity(end - start + 1);
    for frame in start..=end {
        let b = if frame <= keyframes[0].0 {
            keyframes[0].1
        } else if frame >= keyframes[keyframes.len() - 1].0 {
            keyframes[keyframes.len() - 1].1
        } else {
            let seg = keyframes.windows(2).find(|w| w[0].0 <= frame && frame <= w[1].0).unwrap();
            let t = (frame - seg[0].0) as f64 / (seg[1].0 - seg[0].0) as f64;
            BBox::lerp(&seg[0].1, &seg[1].1, t)
        };
        boxes.push(b);
    }
    Ok(boxes)
}

/// A repair applied by [`verify_layout`].
#[derive(Debug, Clone, PartialEq)]
pub enum Correction {
    BoxClamped { object: usize, frame: usize },
    BoxInflated { object: usize, frame: usize },
    FrameRangeClamped { object: usize },
    PhraseRematched { object: usize, matched: String },
}

impl fmt::Display for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correction::BoxClamped { object, frame } => {
                write!(f, "object {object}: box at frame {frame} clamped to [0,1]")
            }
            Correction::BoxInflated { object, frame } => {
                write!(f, "object {object}: box at frame {frame} inflated to minimum side")
            }
            Correction::FrameRangeClamped { object } => {
                write!(f, "object {object}: frame range clamped")
            }
            Correction::PhraseRematched { object, matched } => {
                write!(f, "object {object}: phrase re-matched to {matched:?}")
            }
        }
    }
}

/// Clamp boxes to `[0,1]`, inflate degenerate sides to `1/max(h,w)`, clamp
/// frame ranges, and re-match phrases case-insensitively. Idempotent: a
/// second pass reports no corrections.
pub fn verify_layout(
    layout: &SpatioTemporalLayout,
) -> Result<(SpatioTemporalLayout, Vec<Correction>), LayoutError> {
    let mut out = layout.clone();
    let mut corrections = Vec::new();
    let (_, lh, lw) = out.latent_dims;
    let min_side = 1.0 / lh.max(lw) as f64;
    let prompt_tokens = tokenize(&out.prompt);

    for (oi, obj) in out.objects.iter_mut().enumerate() {
        // Frame range.
        let max_frame = out.num_frames - 1;
        let (s0, e0) = (obj.start_frame, obj.end_frame);
        let mut s = s0.min(max_frame);
        let mut e = e0.min(max_frame);
        if s > e {
            std::mem::swap(&mut s, &mut e);
        }
        if (s, e) != (s0, e0) {
            // Trim or pad the box list to the corrected range.
            let want = e - s + 1;
            obj.boxes.truncate(want);
            while obj.boxes.len() < want {
                let last = *obj.boxes.last().ok_or_else(|| {
                    LayoutError::Malformed(format!("object {oi} has no boxes"))
                })?;
                obj.boxes.push(last);
            }
            obj.start_frame = s;
            obj.end_frame = e;
            corrections.push(Correction::FrameRangeClamped { object: oi });
        }
        if obj.boxes.len() != e - s + 1 {
            return Err(LayoutError::Malformed(format!(
                "object {oi} has {} boxes for range [{s}, {e}]",
                obj.boxes.len()
            )));
        }

        for (bi, b) in obj.boxes.iter_mut().enumerate() {
            let frame = s + bi;
            let clamped = BBox {
                x0: b.x0.clamp(0.0, 1.0),
                y0: b.y0.clamp(0.0, 1.0),
                x1: b.x1.clamp(0.0, 1.0),
                y1: b.y1.clamp(0.0, 1.0),
            };
            if clamped != *b {
                *b = clamped;
                corrections.push(Correction::BoxClamped { object: oi, frame });
            }
            let inflated = inflate_to_min_side(b, min_side);
            if inflated != *b {
                *b = inflated;
                corrections.push(Correction::BoxInflated { object: oi, frame });
            }
        }

        // Phrase must appear in the prompt's token stream.
        let phrase_tokens = tokenize(&obj.phrase);
        match find_token_span(&prompt_tokens, &phrase_tokens) {
            Some(span) => {
                if span != obj.token_span {
                    obj.token_span = span;
                    corrections.push(Correction::PhraseRematched {
                        object: oi,
                        matched: obj.phrase.clone(),
                    });
                }
            }
            None => return Err(LayoutError::Unfixable(obj.phrase.clone())),
        }
    }
    Ok((out, corrections))
}

/// Grow sides shorter than `min_side` by moving the upper edge, shifting the
/// box back inside `[0,1]` if that overruns.
fn inflate_to_min_side(b: &BBox, min_side: f64) -> BBox {
    let mut out = *b;
    if out.width() < min_side {
        out.x1 = out.x0 + min_side;
        if out.x1 > 1.0 {
            out.x0 -= out.x1 - 1.0;
            out.x1 = 1.0;
        }
    }
    if out.height() < min_side {
        out.y1 = out.y0 + min_side;
        if out.y1 > 1.0 {
            out.y0 -= out.y1 - 1.0;
            out.y1 = 1.0;
        }
    }
    out
}

/// Spreadsheet-style placeholder letters: A, B, ..., Z, AA, AB, ...
fn placeholder_letter(mut idx: usize) -> String {
    let mut s = String::new();
    loop {
        s.insert(0, (b'A' + (idx % 26) as u8) as char);
        if idx < 26 {
            break;
        }
        idx = idx / 26 - 1;
    }
    s
}

/// Replace each object phrase with `<object K>`, letters assigned in order
/// of first appearance in the prompt, substituting longest phrases first so
/// nested phrases never produce partial replacements.
pub fn abstract_prompt(layout: &SpatioTemporalLayout) -> String {
    let mut phrases: Vec<&str> = layout.objects.iter().map(|o| o.phrase.as_str()).collect();
    phrases.sort();
    phrases.dedup();
    // Letters follow first appearance in the prompt.
    let mut order: Vec<(usize, &str)> = phrases
        .iter()
        .map(|&p| {
            let pos = find_ci(&layout.prompt, p).unwrap_or(usize::MAX);
            (pos, p)
        })
        .collect();
    order.sort();
    let letter_of = |phrase: &str| -> String {
        let idx = order.iter().position(|&(_, p)| p == phrase).unwrap();
        placeholder_letter(idx)
    };
    // Longest-first replacement.
    let mut by_len = phrases.clone();
    by_len.sort_by_key(|p| std::cmp::Reverse(p.len()));
    let mut text = layout.prompt.clone();
    for phrase in by_len {
        let placeholder = format!("<object {}>", letter_of(phrase));
        text = replace_ci(&text, phrase, &placeholder);
    }
    text
}

/// Case-insensitive find on ASCII text.
fn find_ci(haystack: &str, needle: &str) -> Option<usize> {
    haystack
        .to_ascii_lowercase()
        .find(&needle.to_ascii_lowercase())
}

/// Case-insensitive replace-all, skipping regions already inside a
/// placeholder.
fn replace_ci(text: &str, from: &str, to: &str) -> String {
    let lower = text.to_ascii_lowercase();
    let from_lower = from.to_ascii_lowercase();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < text.len() {
        if lower[i..].starts_with(&from_lower) && !inside_placeholder(&out) {
            out.push_str(to);
            i += from.len();
        } else {
            let c = text[i..].chars().next().unwrap();
            out.push(c);
            i += c.len_utf8();
        }
    }
    out
}

fn inside_placeholder(prefix: &str) -> bool {
    match prefix.rfind('<') {
        Some(open) => !prefix[open..].contains('>'),
        None => false,
    }
}

/// JSON layout-file schema: keyframe form, one layout per file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutFile {
    pub prompt: String,
    pub num_frames: usize,
    pub latent_dims: [usize; 3],
    pub objects: Vec<LayoutFileObject>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutFileObject {
    pub phrase: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub keyframes: Vec<LayoutFileKeyframe>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutFileKeyframe {
    pub frame: usize,
    pub r#box: [f64; 4],
}

/// Read a keyframe-form layout file and realize it to per-frame boxes.
pub fn load_layout_json(path: &Path) -> Result<SpatioTemporalLayout, LayoutError> {
    let text = std::fs::read_to_string(path)?;
    let file: LayoutFile = serde_json::from_str(&text)?;
    let prompt_tokens = tokenize(&file.prompt);
    let mut objects = Vec::with_capacity(file.objects.len());
    for fo in &file.objects {
        let keyframes: Vec<(usize, BBox)> = fo
            .keyframes
            .iter()
            .map(|k| {
                (
                    k.frame,
                    BBox {
                        x0: k.r#box[0],
                        y0: k.r#box[1],
                        x1: k.r#box[2],
                        y1: k.r#box[3],
                    },
                )
            })
            .collect();
        let boxes = interpolate_keyframes_over(&keyframes, fo.start_frame, fo.end_frame)?;
        let phrase_tokens = tokenize(&fo.phrase);
        let token_span = find_token_span(&prompt_tokens, &phrase_tokens)
            .ok_or_else(|| LayoutError::Unfixable(fo.phrase.clone()))?;
        objects.push(ObjectLayout {
            phrase: fo.phrase.clone(),
            token_span,
            boxes,
            start_frame: fo.start_frame,
            end_frame: fo.end_frame,
        });
    }
    let layout = SpatioTemporalLayout {
        prompt: file.prompt,
        objects,
        num_frames: file.num_frames,
        latent_dims: (file.latent_dims[0], file.latent_dims[1], file.latent_dims[2]),
    };
    layout.validate()?;
    Ok(layout)
}

/// Write a layout in keyframe form, using first/last frames as keyframes
/// plus interior frames where the trajectory bends.
pub fn save_layout_json(layout: &SpatioTemporalLayout, path: &Path) -> Result<(), LayoutError> {
    let objects = layout
        .objects
        .iter()
        .map(|o| {
            let mut keyframes = Vec::new();
            for (i, b) in o.boxes.iter().enumerate() {
                let frame = o.start_frame + i;
                let is_end = i == 0 || i == o.boxes.len() - 1;
                let is_bend = !is_end && {
                    let prev = &o.boxes[i - 1];
                    let next = &o.boxes[i + 1];
                    let mid = BBox::lerp(prev, next, 0.5);
                    (mid.x0 - b.x0).abs() > 1e-9
                        || (mid.y0 - b.y0).abs() > 1e-9
                        || (mid.x1 - b.x1).abs() > 1e-9
                        || (mid.y1 - b.y1).abs() > 1e-9
                };
                if is_end || is_bend {
                    keyframes.push(LayoutFileKeyframe {
                        frame,
                        r#box: [b.x0, b.y0, b.x1, b.y1],
                    });
                }
            }
            LayoutFileObject {
                phrase: o.phrase.clone(),
                start_frame: o.start_frame,
                end_frame: o.end_frame,
                keyframes,
            }
        })
        .collect();
    let file = LayoutFile {
        prompt: layout.prompt.clone(),
        num_frames: layout.num_frames,
        latent_dims: [layout.latent_dims.0, layout.latent_dims.1, layout.latent_dims.2],
        objects,
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

#[cfg(test)]
mod tests;
