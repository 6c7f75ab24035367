//! Deterministic rule-based planner: a small grammar of motion templates
//! keyed on verb/preposition patterns, emitting 2–5 keyframes per object.

use super::{BBox, LayoutError, LayoutPlan, PlannedObject, Planner};
use crate::tokenizer::tokenize_with_offsets;

const DETERMINERS: &[&str] = &["a", "an", "the"];

/// Words that terminate an object phrase.
const PHRASE_STOPS: &[&str] = &[
    "moves", "drifts", "falls", "rises", "sits", "stands", "approaches", "circles", "floats",
    "glides", "runs", "flies", "rolls", "slides", "hovers", "walks", "wanders", "tumbles",
    "rests", "above", "below", "beside", "past", "near", "around", "from", "to", "toward",
    "towards", "across", "over", "under", "and", "while", "then", "in", "on", "at",
];

/// Phrase heads that are scene vocabulary, not objects.
const ABSTRACT_HEADS: &[&str] = &[
    "middle", "center", "left", "right", "top", "bottom", "background", "foreground",
    "distance", "scene", "frame", "air", "sky",
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Motion {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
    Approach,
    Orbit,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Relation {
    Above,
    Below,
    Beside,
    None,
}

/// Offline text-to-layout planner covering the shipped motion grammar.
#[derive(Debug, Clone)]
pub struct RuleBasedPlanner {
    pub num_frames: usize,
    pub latent_dims: (usize, usize, usize),
}

impl RuleBasedPlanner {
    pub fn new(num_frames: usize, latent_dims: (usize, usize, usize)) -> Self {
        RuleBasedPlanner { num_frames, latent_dims }
    }
}

impl Planner for RuleBasedPlanner {
    fn plan(&self, prompt: &str) -> Result<LayoutPlan, LayoutError> {
        let toks = tokenize_with_offsets(prompt);
        let words: Vec<&str> = toks.iter().map(|(t, _)| t.as_str()).collect();

        // Determiner-led object phrases.
        let mut phrases: Vec<(String, usize, usize)> = Vec::new(); // (verbatim, tok_start, tok_end)
        let mut i = 0;
        while i < words.len() {
            if DETERMINERS.contains(&words[i]) {
                let mut j = i + 1;
                while j < words.len() && !PHRASE_STOPS.contains(&words[j]) && !DETERMINERS.contains(&words[j]) {
                    j += 1;
                }
                if j > i + 1 && !ABSTRACT_HEADS.contains(&words[j - 1]) {
                    let verbatim = prompt[toks[i].1.start..toks[j - 1].1.end].to_string();
                    phrases.push((verbatim, i, j));
                }
                i = j;
            } else {
                i += 1;
            }
        }
        if phrases.is_empty() {
            return Err(LayoutError::NoObjects);
        }
        phrases.truncate(2);

        // Classify the clause between the first phrase and the second (or
        // the prompt end) for motion and the spatial relation.
        let clause_start = phrases[0].2;
        let clause_end = phrases.get(1).map_or(words.len(), |p| p.1);
        let clause = &words[clause_start..clause_end];
        let motion = classify_motion(clause);
        let relation = classify_relation(clause);

        let last = self.num_frames - 1;
        let mut objects = Vec::new();

        let (mover_y, mut static_center) = match relation {
            Relation::Above => (0.30, (0.5, 0.70)),
            Relation::Below => (0.70, (0.5, 0.30)),
            Relation::Beside => (0.50, (0.72, 0.50)),
            Relation::None => (0.50, (0.62, 0.62)),
        };
        if motion == Motion::Orbit {
            // The orbit ring is centered on the partner.
            static_center = (0.5, 0.5);
        }
        let target_center = if phrases.len() > 1 { static_center } else { (0.5, 0.5) };

        let mover = PlannedObject {
            phrase: phrases[0].0.clone(),
            start_frame: 0,
            end_frame: last,
            keyframes: mover_keyframes(motion, mover_y, target_center, last),
        };
        objects.push(mover);

        if let Some((phrase, _, _)) = phrases.get(1) {
            let size = 0.26;
            let b = BBox::from_center(static_center.0, static_center.1, size, size);
            objects.push(PlannedObject {
                phrase: phrase.clone(),
                start_frame: 0,
                end_frame: last,
                keyframes: vec![(0, b), (last.max(1), b)],
            });
        }
        Ok(LayoutPlan { objects })
    }

    fn num_frames(&self) -> usize {
        self.num_frames
    }

    fn latent_dims(&self) -> (usize, usize, usize) {
        self.latent_dims
    }
}

fn contains_seq(clause: &[&str], seq: &[&str]) -> bool {
    clause.windows(seq.len()).any(|w| w == seq)
}

fn classify_motion(clause: &[&str]) -> Motion {
    if contains_seq(clause, &["left", "to", "right"]) {
        Motion::LeftToRight
    } else if contains_seq(clause, &["right", "to", "left"]) {
        Motion::RightToLeft
    } else if contains_seq(clause, &["top", "to", "bottom"]) {
        Motion::TopToBottom
    } else if contains_seq(clause, &["bottom", "to", "top"]) {
        Motion::BottomToTop
    } else if clause.iter().any(|w| ["approaches", "toward", "towards"].contains(w)) {
        Motion::Approach
    } else if clause.iter().any(|w| ["circles", "orbits", "around"].contains(w)) {
        Motion::Orbit
    } else {
        Motion::Static
    }
}

fn classify_relation(clause: &[&str]) -> Relation {
    for w in clause {
        match *w {
            "above" | "over" => return Relation::Above,
            "below" | "under" => return Relation::Below,
            "beside" | "past" | "near" => return Relation::Beside,
            _ => {}
        }
    }
    Relation::None
}

fn mover_keyframes(
    motion: Motion,
    lane_y: f64,
    target: (f64, f64),
    last: usize,
) -> Vec<(usize, BBox)> {
    let size = 0.22;
    let at = |cx: f64, cy: f64, s: f64| BBox::from_center(cx, cy, s, s);
    match motion {
        Motion::LeftToRight => vec![(0, at(0.20, lane_y, size)), (last.max(1), at(0.80, lane_y, size))],
        Motion::RightToLeft => vec![(0, at(0.80, lane_y, size)), (last.max(1), at(0.20, lane_y, size))],
        Motion::TopToBottom => vec![(0, at(0.35, 0.20, size)), (last.max(1), at(0.35, 0.80, size))],
        Motion::BottomToTop => vec![(0, at(0.35, 0.80, size)), (last.max(1), at(0.35, 0.20, size))],
        Motion::Approach => vec![
            (0, at(0.15, lane_y, 0.16)),
            (last.max(1), at((target.0 - 0.25).max(0.1), target.1, 0.30)),
        ],
        Motion::Orbit => {
            let (cx, cy) = target;
            let radius = 0.24;
            let phases = [0.0, 0.25, 0.5, 0.75, 1.0];
            let mut kfs: Vec<(usize, BBox)> = Vec::new();
            for p in phases {
                let frame = ((last as f64) * p).round() as usize;
                let theta = 2.0 * std::f64::consts::PI * p;
                let b = at(cx + radius * theta.cos(), cy + radius * theta.sin(), 0.18);
                if kfs.last().map_or(true, |(f, _)| frame > *f) {
                    kfs.push((frame, b));
                }
            }
            kfs
        }
        Motion::Static => {
            let b = at(0.5, lane_y, size);
            vec![(0, b), (last.max(1), b)]
        }
    }
}
