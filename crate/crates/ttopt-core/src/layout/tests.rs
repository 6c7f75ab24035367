use super::*;
use proptest::prelude::*;

fn planner() -> RuleBasedPlanner {
    RuleBasedPlanner::new(16, (4, 8, 8))
}

fn centers_x(obj: &ObjectLayout) -> Vec<f64> {
    obj.boxes.iter().map(|b| b.center().0).collect()
}

#[test]
fn plans_two_object_relational_prompt() {
    let prompt = "A vibrant red balloon drifts right to left above a grand statue.";
    let layout = plan_layout(prompt, &planner()).unwrap();
    assert_eq!(layout.objects.len(), 2);
    let balloon = &layout.objects[0];
    assert_eq!(balloon.phrase, "A vibrant red balloon");
    let xs = centers_x(balloon);
    assert!(xs.windows(2).all(|w| w[1] < w[0]), "balloon drifts in -x: {xs:?}");
    let statue = &layout.objects[1];
    assert_eq!(statue.phrase, "a grand statue");
    assert!(statue.boxes.windows(2).all(|w| w[0] == w[1]), "statue is static");
    // The balloon's path stays above the statue.
    let balloon_y = balloon.boxes[0].center().1;
    let statue_y = statue.boxes[0].center().1;
    assert!(balloon_y < statue_y);
}

#[test]
fn plans_single_static_object_centered() {
    let layout = plan_layout("a cat sits", &planner()).unwrap();
    assert_eq!(layout.objects.len(), 1);
    let obj = &layout.objects[0];
    assert_eq!(obj.phrase, "a cat");
    assert!(obj.boxes.iter().all(|b| *b == obj.boxes[0]));
    assert_eq!(obj.boxes[0].center(), (0.5, 0.5));
    assert_eq!(obj.boxes.len(), 16);
}

#[test]
fn left_to_right_centers_increase_linearly() {
    let layout = plan_layout("a ball moves left to right", &planner()).unwrap();
    let obj = &layout.objects[0];
    let xs = centers_x(obj);
    assert_eq!(xs.len(), 16);
    assert!(xs.windows(2).all(|w| w[1] > w[0]), "{xs:?}");
    // Two keyframes at x-centers 0.2 and 0.8 interpolate linearly.
    for (f, &x) in xs.iter().enumerate() {
        let expect = 0.2 + 0.6 * f as f64 / 15.0;
        assert!((x - expect).abs() < 1e-12, "frame {f}: {x} vs {expect}");
    }
    let ys: Vec<f64> = obj.boxes.iter().map(|b| b.center().1).collect();
    assert!(ys.iter().all(|&y| (y - ys[0]).abs() < 1e-12));
}

#[test]
fn planner_rejects_promptless_input() {
    assert!(matches!(
        plan_layout("   ", &planner()),
        Err(LayoutError::PlannerFailure(_))
    ));
    assert!(matches!(
        plan_layout("moves left to right", &planner()),
        Err(LayoutError::NoObjects)
    ));
}

fn one_box_layout(b: BBox) -> SpatioTemporalLayout {
    SpatioTemporalLayout {
        prompt: "a cat sits".into(),
        objects: vec![ObjectLayout {
            phrase: "a cat".into(),
            token_span: 0..2,
            boxes: vec![b; 16],
            start_frame: 0,
            end_frame: 15,
        }],
        num_frames: 16,
        latent_dims: (4, 8, 8),
    }
}

#[test]
fn verify_clamps_out_of_range_box() {
    let layout = one_box_layout(BBox { x0: -0.1, y0: 0.2, x1: 0.5, y1: 0.6 });
    let (fixed, corrections) = verify_layout(&layout).unwrap();
    let b = fixed.objects[0].boxes[0];
    assert_eq!((b.x0, b.y0, b.x1, b.y1), (0.0, 0.2, 0.5, 0.6));
    assert_eq!(
        corrections.iter().filter(|c| matches!(c, Correction::BoxClamped { .. })).count(),
        16
    );
}

#[test]
fn verify_is_identity_on_valid_layout() {
    let layout = plan_layout("a cat sits", &planner()).unwrap();
    let (fixed, corrections) = verify_layout(&layout).unwrap();
    assert_eq!(fixed, layout);
    assert!(corrections.is_empty());
}

#[test]
fn verify_inflates_degenerate_box_to_min_side() {
    // Zero-width box on an 8x8 latent grid: the upper edge grows so the
    // side reaches 1/8.
    let layout = one_box_layout(BBox { x0: 0.4, y0: 0.4, x1: 0.4, y1: 0.6 });
    let (fixed, corrections) = verify_layout(&layout).unwrap();
    let b = fixed.objects[0].boxes[0];
    assert!((b.x1 - 0.525).abs() < 1e-12, "x1 = {}", b.x1);
    assert_eq!(b.x0, 0.4);
    assert_eq!((b.y0, b.y1), (0.4, 0.6));
    assert_eq!(
        corrections.iter().filter(|c| matches!(c, Correction::BoxInflated { .. })).count(),
        16
    );
}

#[test]
fn verify_is_idempotent() {
    let layout = one_box_layout(BBox { x0: -0.3, y0: 0.95, x1: 0.02, y1: 1.4 });
    let (once, c1) = verify_layout(&layout).unwrap();
    assert!(!c1.is_empty());
    let (twice, c2) = verify_layout(&once).unwrap();
    assert_eq!(once, twice);
    assert!(c2.is_empty(), "{c2:?}");
}

#[test]
fn verify_clamps_frame_range() {
    let mut layout = one_box_layout(BBox { x0: 0.2, y0: 0.2, x1: 0.6, y1: 0.6 });
    layout.objects[0].end_frame = 40;
    layout.objects[0].boxes = vec![layout.objects[0].boxes[0]; 41];
    let (fixed, corrections) = verify_layout(&layout).unwrap();
    assert_eq!(fixed.objects[0].end_frame, 15);
    assert_eq!(fixed.objects[0].boxes.len(), 16);
    assert!(corrections.iter().any(|c| matches!(c, Correction::FrameRangeClamped { .. })));
}

#[test]
fn verify_flags_unmatchable_phrase() {
    let mut layout = one_box_layout(BBox { x0: 0.2, y0: 0.2, x1: 0.6, y1: 0.6 });
    layout.objects[0].phrase = "a zebra".into();
    assert!(matches!(verify_layout(&layout), Err(LayoutError::Unfixable(_))));
}

#[test]
fn abstracts_relational_prompt() {
    let prompt = "A vibrant red balloon drifts right to left above a grand statue.";
    let layout = plan_layout(prompt, &planner()).unwrap();
    assert_eq!(
        abstract_prompt(&layout),
        "<object A> drifts right to left above <object B>."
    );
}

#[test]
fn abstracts_single_object_prompt() {
    let layout = plan_layout("a dog runs", &planner()).unwrap();
    assert_eq!(abstract_prompt(&layout), "<object A> runs");
}

#[test]
fn abstraction_substitutes_longest_phrase_first() {
    let prompt = "a red car stands near a red car door";
    let layout = SpatioTemporalLayout {
        prompt: prompt.into(),
        objects: vec![
            ObjectLayout {
                phrase: "a red car".into(),
                token_span: 0..3,
                boxes: vec![BBox { x0: 0.1, y0: 0.1, x1: 0.4, y1: 0.4 }; 16],
                start_frame: 0,
                end_frame: 15,
            },
            ObjectLayout {
                phrase: "a red car door".into(),
                token_span: 5..9,
                boxes: vec![BBox { x0: 0.6, y0: 0.6, x1: 0.9, y1: 0.9 }; 16],
                start_frame: 0,
                end_frame: 15,
            },
        ],
        num_frames: 16,
        latent_dims: (4, 8, 8),
    };
    let text = abstract_prompt(&layout);
    assert_eq!(text, "<object A> stands near <object B>");
}

#[test]
fn abstraction_is_structure_invariant() {
    let p = planner();
    let la = plan_layout("a golden fox circles around a wooden boat.", &p).unwrap();
    let lb = plan_layout("a tiny drone circles around a silver car.", &p).unwrap();
    assert_eq!(abstract_prompt(&la), abstract_prompt(&lb));
}

#[test]
fn interpolation_edge_cases() {
    let p = BBox { x0: 0.1, y0: 0.1, x1: 0.3, y1: 0.3 };
    // Identical endpoints: constant.
    let boxes = interpolate_keyframes(&[(0, p), (4, p)]).unwrap();
    assert_eq!(boxes.len(), 5);
    assert!(boxes.iter().all(|b| *b == p));
    // Linear ramp on x0: 0.0, 0.1, 0.2, 0.3, 0.4.
    let p0 = BBox { x0: 0.0, ..p };
    let q = BBox { x0: 0.4, ..p };
    let boxes = interpolate_keyframes(&[(0, p0), (4, q)]).unwrap();
    let x0s: Vec<f64> = boxes.iter().map(|b| b.x0).collect();
    for (i, &x) in x0s.iter().enumerate() {
        assert!((x - 0.1 * i as f64).abs() < 1e-12, "{x0s:?}");
    }
    // Single keyframe extrapolates constantly over the range.
    let boxes = interpolate_keyframes_over(&[(2, p)], 0, 4).unwrap();
    assert_eq!(boxes.len(), 5);
    assert!(boxes.iter().all(|b| *b == p));
    // Errors.
    assert!(matches!(interpolate_keyframes(&[]), Err(LayoutError::EmptyKeyframes)));
    assert!(matches!(
        interpolate_keyframes(&[(3, p), (3, q)]),
        Err(LayoutError::UnorderedKeyframes)
    ));
}

#[test]
fn layout_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layout.json");
    let layout = plan_layout("a ball moves left to right", &planner()).unwrap();
    save_layout_json(&layout, &path).unwrap();
    let loaded = load_layout_json(&path).unwrap();
    assert_eq!(loaded.prompt, layout.prompt);
    assert_eq!(loaded.num_frames, layout.num_frames);
    assert_eq!(loaded.objects.len(), layout.objects.len());
    for (a, b) in loaded.objects.iter().zip(&layout.objects) {
        assert_eq!(a.phrase, b.phrase);
        for (ba, bb) in a.boxes.iter().zip(&b.boxes) {
            assert!((ba.x0 - bb.x0).abs() < 1e-9);
            assert!((ba.y1 - bb.y1).abs() < 1e-9);
        }
    }
}

struct ScriptedClient {
    responses: std::sync::Mutex<Vec<Result<String, String>>>,
    calls: std::sync::Arc<std::sync::atomic::AtomicUsize>,
}

impl ScriptedClient {
    fn new(responses: Vec<Result<String, String>>) -> (Self, std::sync::Arc<std::sync::atomic::AtomicUsize>) {
        let calls = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let client = ScriptedClient {
            responses: std::sync::Mutex::new(responses),
            calls: calls.clone(),
        };
        (client, calls)
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, _system: &str, _user: &str) -> Result<String, String> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.responses.lock().unwrap().remove(0)
    }
}

const GOOD_RESPONSE: &str = "\
object: a vibrant red balloon\n\
frames: 0-15\n\
keyframe 0: 0.69 0.19 0.91 0.41\n\
keyframe 15: 0.09 0.19 0.31 0.41\n\
\n\
object: a grand statue\n\
frames: 0-15\n\
keyframe 0: 0.37 0.57 0.63 0.83\n";

#[test]
fn chat_planner_parses_structured_blocks() {
    let (client, _) = ScriptedClient::new(vec![Ok(GOOD_RESPONSE.into())]);
    let p = ChatPlanner::new(client, ChatPlannerConfig { num_frames: 16, latent_dims: (4, 8, 8) });
    let prompt = "A vibrant red balloon drifts right to left above a grand statue.";
    let layout = plan_layout(prompt, &p).unwrap();
    assert_eq!(layout.objects.len(), 2);
    assert_eq!(layout.objects[0].boxes.len(), 16);
    assert!((layout.objects[0].boxes[15].x0 - 0.09).abs() < 1e-12);
}

#[test]
fn chat_planner_retries_once_then_fails() {
    let (client, calls) = ScriptedClient::new(vec![
        Ok("keyframe 0: nonsense".into()),
        Ok("keyframe 1: still nonsense".into()),
    ]);
    let p = ChatPlanner::new(client, ChatPlannerConfig { num_frames: 16, latent_dims: (4, 8, 8) });
    let err = plan_layout("a cat sits", &p).unwrap_err();
    assert!(matches!(err, LayoutError::PlannerFailure(_)));
    assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);

    let (client, calls) =
        ScriptedClient::new(vec![Ok("garbage keyframe 0".into()), Ok(GOOD_RESPONSE.into())]);
    let p = ChatPlanner::new(client, ChatPlannerConfig { num_frames: 16, latent_dims: (4, 8, 8) });
    let prompt = "A vibrant red balloon drifts right to left above a grand statue.";
    assert!(plan_layout(prompt, &p).is_ok());
    assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);
}

proptest! {
    #[test]
    fn interpolation_stays_in_keyframe_hull(
        n_keys in 1usize..5,
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut frame = 0usize;
        let mut keyframes = Vec::new();
        for _ in 0..n_keys {
            let x0: f64 = rng.random_range(0.0..0.5);
            let y0: f64 = rng.random_range(0.0..0.5);
            let w: f64 = rng.random_range(0.1..0.4);
            let h: f64 = rng.random_range(0.1..0.4);
            keyframes.push((frame, BBox { x0, y0, x1: x0 + w, y1: y0 + h }));
            frame += rng.random_range(1..5);
        }
        let start = keyframes[0].0;
        let end = keyframes.last().unwrap().0;
        let boxes = interpolate_keyframes(&keyframes).unwrap();
        prop_assert_eq!(boxes.len(), end - start + 1);
        let lo = |f: fn(&BBox) -> f64| keyframes.iter().map(|(_, b)| f(b)).fold(f64::INFINITY, f64::min);
        let hi = |f: fn(&BBox) -> f64| keyframes.iter().map(|(_, b)| f(b)).fold(f64::NEG_INFINITY, f64::max);
        for b in &boxes {
            prop_assert!(b.x0 >= lo(|b| b.x0) - 1e-12 && b.x0 <= hi(|b| b.x0) + 1e-12);
            prop_assert!(b.y1 >= lo(|b| b.y1) - 1e-12 && b.y1 <= hi(|b| b.y1) + 1e-12);
        }
    }

    #[test]
    fn verify_idempotent_on_random_layouts(seed in 0u64..500) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let b = BBox {
            x0: rng.random_range(-0.5..1.0),
            y0: rng.random_range(-0.5..1.0),
            x1: rng.random_range(0.0..1.5),
            y1: rng.random_range(0.0..1.5),
        };
        let layout = one_box_layout(b);
        if let Ok((once, _)) = verify_layout(&layout) {
            let (twice, c2) = verify_layout(&once).unwrap();
            prop_assert_eq!(once, twice);
            prop_assert!(c2.is_empty());
        }
    }
}
