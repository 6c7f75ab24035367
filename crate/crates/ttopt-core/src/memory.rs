//! Parametric memory: optimized adapter sets keyed by abstracted-prompt
//! embeddings, with cosine retrieval, top-k average fusion, LFU eviction,
//! and directory persistence.
//!
//! Reads mutate usage statistics, so they count as writes: callers must
//! serialize all store access behind a single writer. The harness's
//! read-only mode uses [`MemoryStore::read_frozen`], which leaves the
//! statistics untouched.
//!
//! Stored factors are rounded through f32 on insert/update — the blob
//! format's precision — which is what makes `load(save(S)) == S` bitwise.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::denoiser::AdapterSet;
use crate::tokenizer::{fnv1a64, tokenize};

pub const EMBED_DIM: usize = 256;
pub const DEFAULT_CAPACITY: usize = 64;
pub const DEFAULT_THRESHOLD: f64 = 0.85;

const MANIFEST_VERSION: u32 = 1;
const BLOB_MAGIC: &[u8; 8] = b"TTOPADPT";

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("unknown entry id {0:016x}")]
    UnknownId(u64),
    #[error("store is empty")]
    EmptyStore,
    #[error("format version {0} is not supported (expected {MANIFEST_VERSION})")]
    VersionMismatch(u32),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Deterministic text embedding: hashed bag of token {1,2}-grams with
/// signed buckets, L2-normalized. Swappable for a learned encoder.
pub trait TextEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
    fn dim(&self) -> usize;
}

/// The shipped hashed n-gram embedder.
#[derive(Debug, Clone, Default)]
pub struct HashedNgramEmbedder;

impl TextEmbedder for HashedNgramEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        embed_abstract(text)
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }
}

/// Embed an abstracted prompt into a unit vector of [`EMBED_DIM`].
/// Each n-gram lands in two signed buckets, which halves the cosine impact
/// of any single hash collision between unrelated texts.
pub fn embed_abstract(text: &str) -> Vec<f64> {
    let tokens = tokenize(text);
    let mut v = vec![0.0f64; EMBED_DIM];
    let mut bump = |gram: &str| {
        let h1 = fnv1a64(gram.as_bytes());
        let h2 = h1.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(31);
        for h in [h1, h2] {
            let idx = (h % EMBED_DIM as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
    };
    for t in &tokens {
        bump(t);
    }
    for pair in tokens.windows(2) {
        bump(&format!("{} {}", pair[0], pair[1]));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Stable id for an abstracted prompt.
pub fn key_id(abstract_text: &str) -> u64 {
    fnv1a64(abstract_text.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryKey {
    pub abstract_text: String,
    pub embedding: Vec<f64>,
    pub id: u64,
}

impl MemoryKey {
    pub fn new(abstract_text: &str) -> Self {
        MemoryKey {
            abstract_text: abstract_text.to_string(),
            embedding: embed_abstract(abstract_text),
            id: key_id(abstract_text),
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub key: MemoryKey,
    pub adapters: AdapterSet,
    pub use_count: u64,
    pub last_used: u64,
    pub created: u64,
}

/// Capacity-bounded key-value store over adapter sets.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    entries: BTreeMap<u64, MemoryEntry>,
    pub capacity: usize,
    pub similarity_threshold: f64,
    clock: u64,
}

/// Result of a read: fused adapters plus the matched ids in rank order.
#[derive(Debug)]
pub struct ReadHit {
    pub adapters: AdapterSet,
    pub matched: Vec<u64>,
    /// Cosine similarity of the best-ranked match.
    pub best_similarity: f64,
}

impl MemoryStore {
    pub fn new(capacity: usize, similarity_threshold: f64) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        MemoryStore {
            entries: BTreeMap::new(),
            capacity,
            similarity_threshold,
            clock: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.values()
    }

    pub fn get(&self, id: u64) -> Option<&MemoryEntry> {
        self.entries.get(&id)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Insert an entry. An existing id behaves as [`MemoryStore::update`]
    /// (adapters replaced, `use_count` preserved); at capacity the LFU
    /// victim is evicted first. Factors are rounded to storage precision.
    pub fn insert(&mut self, key: MemoryKey, mut adapters: AdapterSet) -> Vec<u64> {
        let now = self.tick();
        adapters.quantize_f32();
        let mut evicted = Vec::new();
        if let Some(existing) = self.entries.get_mut(&key.id) {
            existing.adapters = adapters;
            existing.last_used = now;
            return evicted;
        }
        while self.entries.len() >= self.capacity {
            let victim = self.eviction_victim().expect("non-empty at capacity");
            self.entries.remove(&victim);
            evicted.push(victim);
        }
        let id = key.id;
        self.entries.insert(
            id,
            MemoryEntry { key, adapters, use_count: 0, last_used: now, created: now },
        );
        evicted
    }

    /// LFU victim: minimal `use_count`, ties by oldest `last_used`, then
    /// oldest `created`, then lowest id.
    fn eviction_victim(&self) -> Option<u64> {
        self.entries
            .values()
            .min_by(|a, b| {
                a.use_count
                    .cmp(&b.use_count)
                    .then(a.last_used.cmp(&b.last_used))
                    .then(a.created.cmp(&b.created))
                    .then(a.key.id.cmp(&b.key.id))
            })
            .map(|e| e.key.id)
    }

    /// Evict exactly one entry. Fails on an empty store.
    pub fn evict(&mut self) -> Result<u64, MemoryError> {
        let victim = self.eviction_victim().ok_or(MemoryError::EmptyStore)?;
        self.entries.remove(&victim);
        Ok(victim)
    }

    /// Rank entries for a query: similarity >= threshold, ordered by
    /// similarity desc, then use_count desc, then id asc.
    fn ranked_matches(&self, query: &MemoryKey, top_k: usize) -> Vec<(u64, f64)> {
        let mut scored: Vec<(u64, f64, u64)> = self
            .entries
            .values()
            .map(|e| (e.key.id, cosine(&query.embedding, &e.key.embedding), e.use_count))
            .filter(|&(_, sim, _)| sim >= self.similarity_threshold)
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then(b.2.cmp(&a.2))
                .then(a.0.cmp(&b.0))
        });
        scored.into_iter().take(top_k).map(|(id, sim, _)| (id, sim)).collect()
    }

    fn fuse(&self, matched: &[(u64, f64)]) -> Option<ReadHit> {
        if matched.is_empty() {
            return None;
        }
        let sets: Vec<&AdapterSet> = matched.iter().map(|(id, _)| &self.entries[id].adapters).collect();
        Some(ReadHit {
            adapters: AdapterSet::average(&sets),
            matched: matched.iter().map(|(id, _)| *id).collect(),
            best_similarity: matched[0].1,
        })
    }

    /// Retrieve and fuse the best matches, bumping their usage statistics.
    pub fn read(&mut self, query: &MemoryKey, top_k: usize) -> Option<ReadHit> {
        assert!(top_k >= 1);
        let now = self.tick();
        let matched = self.ranked_matches(query, top_k);
        let hit = self.fuse(&matched);
        for (id, _) in &matched {
            let e = self.entries.get_mut(id).unwrap();
            e.use_count += 1;
            e.last_used = now;
        }
        hit
    }

    /// Retrieval without any mutation, for read-only streams. Usage counts,
    /// recency, and the clock are all left untouched.
    pub fn read_frozen(&self, query: &MemoryKey, top_k: usize) -> Option<ReadHit> {
        assert!(top_k >= 1);
        let matched = self.ranked_matches(query, top_k);
        self.fuse(&matched)
    }

    /// Replace the adapters of existing entries; refreshes `last_used`,
    /// preserves `use_count`.
    pub fn update(&mut self, ids: &[u64], adapters: &AdapterSet) -> Result<(), MemoryError> {
        for id in ids {
            if !self.entries.contains_key(id) {
                return Err(MemoryError::UnknownId(*id));
            }
        }
        let now = self.tick();
        let mut quantized = adapters.clone();
        quantized.quantize_f32();
        for id in ids {
            let e = self.entries.get_mut(id).unwrap();
            e.adapters = quantized.clone();
            e.last_used = now;
        }
        Ok(())
    }

    /// Persist as `manifest.json` plus one little-endian f32 blob per entry.
    pub fn save(&self, dir: &Path) -> Result<(), MemoryError> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for e in self.entries.values() {
            let blob_file = format!("{:016x}.bin", e.key.id);
            write_adapter_blob(&e.adapters, &dir.join(&blob_file))?;
            entries.push(ManifestEntry {
                id: format!("{:016x}", e.key.id),
                abstract_text: e.key.abstract_text.clone(),
                use_count: e.use_count,
                last_used: e.last_used,
                created: e.created,
                blob_file,
            });
        }
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            capacity: self.capacity,
            threshold: self.similarity_threshold,
            clock: self.clock,
            embed_dim: EMBED_DIM,
            entries,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    /// Load a persisted store. Fails closed on any version or id mismatch.
    pub fn load(dir: &Path) -> Result<Self, MemoryError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(MemoryError::VersionMismatch(manifest.format_version));
        }
        if manifest.embed_dim != EMBED_DIM {
            return Err(MemoryError::Corrupt(format!(
                "embed_dim {} != {EMBED_DIM}",
                manifest.embed_dim
            )));
        }
        let mut store = MemoryStore::new(manifest.capacity, manifest.threshold);
        store.clock = manifest.clock;
        for me in &manifest.entries {
            let id = u64::from_str_radix(&me.id, 16)
                .map_err(|_| MemoryError::Corrupt(format!("bad id {:?}", me.id)))?;
            let key = MemoryKey::new(&me.abstract_text);
            if key.id != id {
                return Err(MemoryError::Corrupt(format!(
                    "id {:016x} does not match abstract text {:?}",
                    id, me.abstract_text
                )));
            }
            let adapters = read_adapter_blob(&dir.join(&me.blob_file))?;
            store.entries.insert(
                id,
                MemoryEntry {
                    key,
                    adapters,
                    use_count: me.use_count,
                    last_used: me.last_used,
                    created: me.created,
                },
            );
        }
        if store.entries.len() > store.capacity {
            return Err(MemoryError::Corrupt(format!(
                "{} entries exceed capacity {}",
                store.entries.len(),
                store.capacity
            )));
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    capacity: usize,
    threshold: f64,
    clock: u64,
    embed_dim: usize,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    abstract_text: String,
    use_count: u64,
    last_used: u64,
    created: u64,
    blob_file: String,
}

/// Blob layout: 8-byte magic, u32 rank, u32 factor count, then factors as
/// little-endian f32 in adapter serialization order.
fn write_adapter_blob(adapters: &AdapterSet, path: &Path) -> Result<(), MemoryError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(BLOB_MAGIC)?;
    file.write_all(&(adapters.rank as u32).to_le_bytes())?;
    file.write_all(&((adapters.pairs.len() * 2) as u32).to_le_bytes())?;
    let mut err = None;
    adapters.for_each_factor(&mut |s| {
        if err.is_some() {
            return;
        }
        for &v in s {
            if let Err(e) = file.write_all(&(v as f32).to_le_bytes()) {
                err = Some(e);
                return;
            }
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn read_adapter_blob(path: &Path) -> Result<AdapterSet, MemoryError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(MemoryError::Corrupt("blob magic mismatch".into()));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    file.read_exact(&mut u32buf)?;
    let factor_count = u32::from_le_bytes(u32buf) as usize;
    if factor_count % 8 != 0 {
        return Err(MemoryError::Corrupt(format!(
            "factor count {factor_count} is not a multiple of 8"
        )));
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if rest.len() % 4 != 0 {
        return Err(MemoryError::Corrupt("truncated blob".into()));
    }
    let values: Vec<f64> = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let pair_count = factor_count / 2;
    let dim = if rank > 0 && pair_count > 0 { values.len() / (pair_count * 2 * rank) } else { 0 };
    if rank == 0 || dim == 0 || values.len() != pair_count * 2 * rank * dim {
        return Err(MemoryError::Corrupt(format!(
            "blob size {} inconsistent with rank {rank} and {factor_count} factors",
            values.len()
        )));
    }
    let mut pairs = Vec::with_capacity(pair_count);
    let mut cursor = 0;
    for _ in 0..pair_count {
        let a = ndarray::Array2::from_shape_vec(
            (dim, rank),
            values[cursor..cursor + dim * rank].to_vec(),
        )
        .unwrap();
        cursor += dim * rank;
        let b = ndarray::Array2::from_shape_vec(
            (rank, dim),
            values[cursor..cursor + rank * dim].to_vec(),
        )
        .unwrap();
        cursor += rank * dim;
        pairs.push(crate::denoiser::AdapterPair { a, b });
    }
    Ok(AdapterSet { rank, pairs })
}

#[cfg(test)]
mod tests;
