use super::*;
use crate::denoiser::AdapterPair;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn rand_adapters(seed: u64) -> AdapterSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let pairs = (0..8)
        .map(|_| AdapterPair {
            a: Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)),
            b: Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0)),
        })
        .collect();
    let mut set = AdapterSet { rank: 2, pairs };
    set.quantize_f32();
    set
}

fn flat(set: &AdapterSet) -> Vec<f64> {
    let mut out = Vec::new();
    set.for_each_factor(&mut |s| out.extend_from_slice(s));
    out
}

#[test]
fn embedding_is_deterministic_and_unit_norm() {
    let a = embed_abstract("<object A> drifts right to left above <object B>.");
    let b = embed_abstract("<object A> drifts right to left above <object B>.");
    assert_eq!(a, b);
    assert!((cosine(&a, &a) - 1.0).abs() < 1e-9);
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-9);
}

#[test]
fn disjoint_vocabulary_texts_have_small_cosine() {
    let pool_a = ["lantern", "drifts", "crimson", "meadow", "slowly", "upward", "kite", "beyond"];
    let pool_b = ["turbine", "rotates", "gravel", "harbor", "quickly", "inward", "crane", "during"];
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    for _ in 0..100 {
        // Distinct words per text so the only shared features are hash
        // collisions.
        let take = |pool: &[&str], rng: &mut ChaCha12Rng| {
            let n = rng.random_range(4..=pool.len());
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            idx.truncate(n);
            idx.into_iter().map(|i| pool[i]).collect::<Vec<_>>().join(" ")
        };
        let ta = take(&pool_a, &mut rng);
        let tb = take(&pool_b, &mut rng);
        let cos = cosine(&embed_abstract(&ta), &embed_abstract(&tb));
        assert!(cos.abs() <= 0.2, "{ta:?} vs {tb:?}: {cos}");
    }
}

#[test]
fn insert_and_capacity_semantics() {
    let mut store = MemoryStore::new(2, 0.85);
    assert!(store.is_empty());
    store.insert(MemoryKey::new("<object A> sits."), rand_adapters(1));
    assert_eq!(store.len(), 1);
    store.insert(MemoryKey::new("<object A> runs."), rand_adapters(2));
    assert_eq!(store.len(), 2);
    // At capacity: evict first, then insert.
    let evicted = store.insert(MemoryKey::new("<object A> flies."), rand_adapters(3));
    assert_eq!(evicted.len(), 1);
    assert_eq!(store.len(), 2);
}

#[test]
fn insert_existing_id_updates_and_preserves_use_count() {
    let mut store = MemoryStore::new(4, 0.85);
    let key = MemoryKey::new("<object A> sits.");
    store.insert(key.clone(), rand_adapters(1));
    // Bump the use count via a read.
    store.read(&key, 1).unwrap();
    assert_eq!(store.get(key.id).unwrap().use_count, 1);
    let replacement = rand_adapters(9);
    store.insert(key.clone(), replacement.clone());
    let entry = store.get(key.id).unwrap();
    assert_eq!(entry.use_count, 1);
    assert_eq!(flat(&entry.adapters), flat(&replacement));
    assert_eq!(store.len(), 1);
}

#[test]
fn read_exact_duplicate_returns_entry_bitwise() {
    let mut store = MemoryStore::new(4, 0.85);
    let key = MemoryKey::new("<object A> drifts right to left above <object B>.");
    let adapters = rand_adapters(5);
    store.insert(key.clone(), adapters.clone());
    let hit = store.read(&key, 1).unwrap();
    assert_eq!(hit.matched, vec![key.id]);
    assert!((hit.best_similarity - 1.0).abs() < 1e-12);
    let a = flat(&hit.adapters);
    let b = flat(&adapters);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(store.get(key.id).unwrap().use_count, 1);
}

#[test]
fn read_fuses_two_matches_as_exact_midpoint() {
    // A permissive threshold lets related abstractions co-match.
    let mut store = MemoryStore::new(4, 0.1);
    let k1 = MemoryKey::new("<object A> slides from left to right past <object B>.");
    let k2 = MemoryKey::new("<object A> slides from left to right.");
    let x = rand_adapters(1);
    let y = rand_adapters(2);
    store.insert(k1.clone(), x.clone());
    store.insert(k2.clone(), y.clone());
    let hit = store.read(&k1, 2).unwrap();
    assert_eq!(hit.matched[0], k1.id);
    assert_eq!(hit.matched.len(), 2);
    let fused = flat(&hit.adapters);
    for ((f, xv), yv) in fused.iter().zip(flat(&x)).zip(flat(&y)) {
        let expect = (xv + yv) / 2.0;
        assert_eq!(f.to_bits(), expect.to_bits());
    }
}

#[test]
fn read_on_empty_store_or_below_threshold_misses() {
    let mut store = MemoryStore::new(4, 0.85);
    let key = MemoryKey::new("<object A> sits.");
    assert!(store.read(&key, 1).is_none());
    store.insert(MemoryKey::new("<object A> tumbles from top to bottom beside <object B>."), rand_adapters(1));
    assert!(store.read(&key, 3).is_none());
}

#[test]
fn update_replaces_and_read_your_writes() {
    let mut store = MemoryStore::new(4, 0.85);
    let key = MemoryKey::new("<object A> hovers above <object B>.");
    store.insert(key.clone(), rand_adapters(1));
    let hit = store.read(&key, 1).unwrap();
    let count_after_read = store.get(key.id).unwrap().use_count;
    let new = rand_adapters(42);
    store.update(&hit.matched, &new).unwrap();
    assert_eq!(store.get(key.id).unwrap().use_count, count_after_read);
    let hit2 = store.read(&key, 1).unwrap();
    assert_eq!(flat(&hit2.adapters), flat(&new));
    assert!(matches!(store.update(&[0xdead], &new), Err(MemoryError::UnknownId(_))));
}

#[test]
fn eviction_is_lfu_with_recency_tie_breaks() {
    let mut store = MemoryStore::new(4, 0.85);
    let k1 = MemoryKey::new("<object A> sits.");
    let k2 = MemoryKey::new("<object A> runs.");
    let k3 = MemoryKey::new("<object A> flies.");
    store.insert(k1.clone(), rand_adapters(1));
    store.insert(k2.clone(), rand_adapters(2));
    store.insert(k3.clone(), rand_adapters(3));
    // use counts: k1 -> 3, k2 -> 1, k3 -> 2
    for _ in 0..3 {
        store.read(&k1, 1);
    }
    store.read(&k2, 1);
    for _ in 0..2 {
        store.read(&k3, 1);
    }
    let victim = store.evict().unwrap();
    assert_eq!(victim, k2.id);

    // Equal counts: the older last_used goes first.
    let mut store = MemoryStore::new(4, 0.85);
    store.insert(k1.clone(), rand_adapters(1));
    store.insert(k2.clone(), rand_adapters(2));
    store.read(&k1, 1);
    store.read(&k2, 1);
    let victim = store.evict().unwrap();
    assert_eq!(victim, k1.id);

    let mut empty = MemoryStore::new(2, 0.85);
    assert!(matches!(empty.evict(), Err(MemoryError::EmptyStore)));
}

#[test]
fn read_frozen_leaves_statistics_untouched() {
    let mut store = MemoryStore::new(4, 0.85);
    let key = MemoryKey::new("<object A> sits.");
    store.insert(key.clone(), rand_adapters(1));
    let clock = store.clock();
    let hit = store.read_frozen(&key, 1).unwrap();
    assert_eq!(hit.matched, vec![key.id]);
    assert_eq!(store.clock(), clock);
    assert_eq!(store.get(key.id).unwrap().use_count, 0);
}

#[test]
fn save_load_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = MemoryStore::new(8, 0.75);
    for (i, text) in [
        "<object A> sits.",
        "<object A> wanders right to left above <object B>.",
        "<object A> circles around <object B>.",
    ]
    .iter()
    .enumerate()
    {
        store.insert(MemoryKey::new(text), rand_adapters(i as u64));
    }
    let key = MemoryKey::new("<object A> sits.");
    store.read(&key, 1);
    store.save(dir.path()).unwrap();
    let loaded = MemoryStore::load(dir.path()).unwrap();
    assert_eq!(loaded.len(), store.len());
    assert_eq!(loaded.capacity, store.capacity);
    assert_eq!(loaded.similarity_threshold, store.similarity_threshold);
    assert_eq!(loaded.clock(), store.clock());
    for (a, b) in loaded.entries().zip(store.entries()) {
        assert_eq!(a.key.id, b.key.id);
        assert_eq!(a.key.abstract_text, b.key.abstract_text);
        assert_eq!(a.use_count, b.use_count);
        assert_eq!(a.last_used, b.last_used);
        assert_eq!(a.created, b.created);
        let fa = flat(&a.adapters);
        let fb = flat(&b.adapters);
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // Empty store round trip.
    let dir2 = tempfile::tempdir().unwrap();
    let empty = MemoryStore::new(16, 0.9);
    empty.save(dir2.path()).unwrap();
    let loaded = MemoryStore::load(dir2.path()).unwrap();
    assert!(loaded.is_empty());
    assert_eq!(loaded.capacity, 16);
    assert_eq!(loaded.similarity_threshold, 0.9);
}

#[test]
fn load_rejects_future_format_versions() {
    let dir = tempfile::tempdir().unwrap();
    let store = MemoryStore::new(4, 0.85);
    store.save(dir.path()).unwrap();
    let manifest_path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    let bumped = text.replace("\"format_version\": 1", "\"format_version\": 2");
    assert_ne!(text, bumped);
    std::fs::write(&manifest_path, bumped).unwrap();
    assert!(matches!(
        MemoryStore::load(dir.path()),
        Err(MemoryError::VersionMismatch(2))
    ));
}

#[test]
fn capacity_never_exceeded_under_random_ops() {
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let texts: Vec<String> = (0..12).map(|i| format!("<object A> template {i}.")).collect();
    for trial in 0..40 {
        let capacity = rng.random_range(2..6);
        let mut store = MemoryStore::new(capacity, 0.85);
        for op in 0..60 {
            let text = &texts[rng.random_range(0..texts.len())];
            let key = MemoryKey::new(text);
            match rng.random_range(0..3) {
                0 => {
                    store.insert(key, rand_adapters(op));
                }
                1 => {
                    store.read(&key, rng.random_range(1..4));
                }
                _ => {
                    if let Some(hit) = store.read(&key, 1) {
                        store.update(&hit.matched, &rand_adapters(op + 1000)).unwrap();
                    }
                }
            }
            assert!(store.len() <= capacity, "trial {trial} op {op}");
        }
    }
}
