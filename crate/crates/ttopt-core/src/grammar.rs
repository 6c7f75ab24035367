//! Seeded synthetic prompt grammar covering the motion templates the
//! rule-based planner understands. Used for pre-training scenes, pseudo
//! prompt streams, probe prompt sets, and paraphrase pairs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const ADJECTIVES: &[&str] = &[
    "vibrant red",
    "grand",
    "small blue",
    "golden",
    "bright yellow",
    "wooden",
    "silver",
    "fluffy white",
    "tiny",
    "green",
    "crimson",
    "pale",
];

const NOUNS: &[&str] = &[
    "balloon", "statue", "cat", "dog", "car", "bird", "kite", "boat", "lantern", "drone",
    "fox", "turtle", "robot", "deer",
];

/// `{}` slots are object phrases. Two-object templates deliberately use
/// verbs disjoint from the one-object set so no two abstractions are
/// near-duplicates under the hashed n-gram embedder.
const TEMPLATES: &[&str] = &[
    "{} moves from left to right.",
    "{} drifts right to left.",
    "{} falls from top to bottom.",
    "{} rises from bottom to top.",
    "{} sits in the middle.",
    "{} wanders right to left above {}.",
    "{} slides from left to right past {}.",
    "{} glides from left to right below {}.",
    "{} approaches {}.",
    "{} circles around {}.",
    "{} tumbles from top to bottom beside {}.",
    "{} hovers above {}.",
];

pub fn template_count() -> usize {
    TEMPLATES.len()
}

fn phrase(rng: &mut ChaCha12Rng) -> String {
    let adj = ADJECTIVES[rng.random_range(0..ADJECTIVES.len())];
    let noun = NOUNS[rng.random_range(0..NOUNS.len())];
    format!("a {adj} {noun}")
}

fn fill(template: &str, phrases: &[String]) -> String {
    let mut out = String::new();
    let mut parts = template.split("{}");
    out.push_str(parts.next().unwrap());
    for (i, part) in parts.enumerate() {
        out.push_str(&phrases[i]);
        out.push_str(part);
    }
    // Sentence case.
    let mut chars = out.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => out,
    }
}

fn slots(template: &str) -> usize {
    template.matches("{}").count()
}

/// One seeded prompt. Distinct object phrases within a prompt.
pub fn prompt_from_seed(seed: u64) -> String {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
    let mut phrases = vec![phrase(&mut rng)];
    while phrases.len() < slots(template) {
        let p = phrase(&mut rng);
        if !phrases.contains(&p) {
            phrases.push(p);
        }
    }
    fill(template, &phrases)
}

/// A seeded stream of `n` prompts.
pub fn prompts(seed: u64, n: usize) -> Vec<String> {
    (0..n).map(|i| prompt_from_seed(seed.wrapping_add(i as u64))).collect()
}

/// Paraphrase pairs: same template, different object phrases with matching
/// token counts, so both sides abstract to the same placeholder form and
/// keep identical token positions.
pub fn paraphrase_pairs(seed: u64, n: usize) -> Vec<(String, String)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
        let k = slots(template);
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut ok = true;
        for _ in 0..k {
            let a = phrase(&mut rng);
            // Match word counts so token spans line up across the pair.
            let b = loop {
                let cand = phrase(&mut rng);
                if cand.split_whitespace().count() == a.split_whitespace().count() {
                    break cand;
                }
            };
            if a == b || first.contains(&a) || second.contains(&b) {
                ok = false;
                break;
            }
            first.push(a);
            second.push(b);
        }
        if ok {
            pairs.push((fill(template, &first), fill(template, &second)));
        }
    }
    pairs
}
