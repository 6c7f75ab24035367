//! External layout planning over a chat-completion endpoint.
//!
//! The transport is abstracted behind [`ChatClient`] so the request/response
//! protocol (in-context template, structured text block, one retry on parse
//! failure) is testable offline. An HTTP implementation lives in the harness
//! crate, configured with endpoint URL, model name, API-key env var, and
//! timeout.

use super::{BBox, LayoutError, LayoutPlan, PlannedObject, Planner};

/// Minimal chat-completion transport: system + user message in, text out.
pub trait ChatClient: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String, String>;
}

#[derive(Debug, Clone)]
pub struct ChatPlannerConfig {
    pub num_frames: usize,
    pub latent_dims: (usize, usize, usize),
}

/// Planner that asks an external model for keyframed layouts.
pub struct ChatPlanner<C: ChatClient> {
    client: C,
    config: ChatPlannerConfig,
}

impl<C: ChatClient> ChatPlanner<C> {
    pub fn new(client: C, config: ChatPlannerConfig) -> Self {
        ChatPlanner { client, config }
    }

    /// The in-context instruction with three worked examples, parameterized
    /// on the frame range.
    pub fn system_prompt(&self) -> String {
        let last = self.config.num_frames - 1;
        format!(
            "You plan object layouts for short videos. Given a prompt, first think \
through each object's motion and any camera behavior, then output one block per \
visible object in exactly this format (coordinates are fractions of the frame, \
frames run 0..={last}):\n\
\n\
object: <exact phrase copied from the prompt>\n\
frames: <start>-<end>\n\
keyframe <frame>: <x0> <y0> <x1> <y1>\n\
\n\
Example 1 — prompt: \"A vibrant red balloon drifts right to left above a grand statue.\"\n\
object: A vibrant red balloon\n\
frames: 0-{last}\n\
keyframe 0: 0.69 0.19 0.91 0.41\n\
keyframe {last}: 0.09 0.19 0.31 0.41\n\
\n\
object: a grand statue\n\
frames: 0-{last}\n\
keyframe 0: 0.37 0.57 0.63 0.83\n\
keyframe {last}: 0.37 0.57 0.63 0.83\n\
\n\
Example 2 — prompt: \"a small blue kite rises from bottom to top.\"\n\
object: a small blue kite\n\
frames: 0-{last}\n\
keyframe 0: 0.24 0.69 0.46 0.91\n\
keyframe {last}: 0.24 0.09 0.46 0.31\n\
\n\
Example 3 — prompt: \"a golden dog approaches a wooden boat.\"\n\
object: a golden dog\n\
frames: 0-{last}\n\
keyframe 0: 0.07 0.42 0.23 0.58\n\
keyframe {last}: 0.22 0.47 0.52 0.77\n\
\n\
object: a wooden boat\n\
frames: 0-{last}\n\
keyframe 0: 0.49 0.49 0.75 0.75\n\
keyframe {last}: 0.49 0.49 0.75 0.75\n\
\n\
Output only the blocks, one blank line apart."
        )
    }
}

impl<C: ChatClient> Planner for ChatPlanner<C> {
    fn plan(&self, prompt: &str) -> Result<LayoutPlan, LayoutError> {
        let system = self.system_prompt();
        let user = format!("prompt: \"{prompt}\"");
        let mut last_err = String::new();
        let mut last_was_empty = false;
        // One retry on parse failure or an empty block list, then error.
        for _ in 0..2 {
            let text = self
                .client
                .complete(&system, &user)
                .map_err(LayoutError::PlannerFailure)?;
            match parse_plan_response(&text, self.config.num_frames) {
                Ok(plan) if !plan.objects.is_empty() => return Ok(plan),
                Ok(_) => {
                    last_err = "no object blocks in response".into();
                    last_was_empty = true;
                }
                Err(e) => {
                    last_err = e.to_string();
                    last_was_empty = false;
                }
            }
        }
        if last_was_empty {
            Err(LayoutError::NoObjects)
        } else {
            Err(LayoutError::PlannerFailure(format!(
                "unparseable planner response after retry: {last_err}"
            )))
        }
    }

    fn num_frames(&self) -> usize {
        self.config.num_frames
    }

    fn latent_dims(&self) -> (usize, usize, usize) {
        self.config.latent_dims
    }
}

/// Parse the structured text block format. Lines outside blocks are ignored
/// so the model may include scratch reasoning before the blocks.
pub fn parse_plan_response(text: &str, num_frames: usize) -> Result<LayoutPlan, LayoutError> {
    let mut objects: Vec<PlannedObject> = Vec::new();
    let mut current: Option<PlannedObject> = None;
    for raw in text.lines() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix("object:") {
            if let Some(obj) = current.take() {
                objects.push(finish_object(obj)?);
            }
            current = Some(PlannedObject {
                phrase: rest.trim().to_string(),
                start_frame: 0,
                end_frame: num_frames.saturating_sub(1),
                keyframes: Vec::new(),
            });
        } else if let Some(rest) = line.strip_prefix("frames:") {
            let obj = current
                .as_mut()
                .ok_or_else(|| LayoutError::PlannerFailure("frames: before object:".into()))?;
            let (s, e) = rest
                .trim()
                .split_once('-')
                .ok_or_else(|| LayoutError::PlannerFailure(format!("bad frames line: {line}")))?;
            obj.start_frame = s
                .trim()
                .parse()
                .map_err(|_| LayoutError::PlannerFailure(format!("bad start frame: {line}")))?;
            obj.end_frame = e
                .trim()
                .parse()
                .map_err(|_| LayoutError::PlannerFailure(format!("bad end frame: {line}")))?;
        } else if let Some(rest) = line.strip_prefix("keyframe") {
            let obj = current
                .as_mut()
                .ok_or_else(|| LayoutError::PlannerFailure("keyframe before object:".into()))?;
            let (frame_part, coords) = rest
                .split_once(':')
                .ok_or_else(|| LayoutError::PlannerFailure(format!("bad keyframe line: {line}")))?;
            let frame: usize = frame_part
                .trim()
                .parse()
                .map_err(|_| LayoutError::PlannerFailure(format!("bad keyframe frame: {line}")))?;
            let vals: Vec<f64> = coords
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| LayoutError::PlannerFailure(format!("bad keyframe coords: {line}")))?;
            if vals.len() != 4 {
                return Err(LayoutError::PlannerFailure(format!(
                    "expected 4 coordinates: {line}"
                )));
            }
            obj.keyframes.push((
                frame,
                BBox {
                    x0: vals[0],
                    y0: vals[1],
                    x1: vals[2],
                    y1: vals[3],
                },
            ));
        }
    }
    if let Some(obj) = current.take() {
        objects.push(finish_object(obj)?);
    }
    Ok(LayoutPlan { objects })
}

fn finish_object(mut obj: PlannedObject) -> Result<PlannedObject, LayoutError> {
    if obj.phrase.is_empty() {
        return Err(LayoutError::PlannerFailure("empty object phrase".into()));
    }
    if obj.keyframes.is_empty() {
        return Err(LayoutError::PlannerFailure(format!(
            "object {:?} has no keyframes",
            obj.phrase
        )));
    }
    obj.keyframes.sort_by_key(|(f, _)| *f);
    obj.keyframes.dedup_by_key(|(f, _)| *f);
    Ok(obj)
}
