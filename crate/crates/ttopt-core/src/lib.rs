//! Layout-guided test-time optimization for a toy video diffusion transformer.
//!
//! The crate implements the full inference-time control loop at desk scale:
//!
//! - [`layout`] plans spatiotemporal layouts (per-object bounding-box
//!   trajectories) from text prompts, verifies them, and abstracts prompts
//!   into placeholder form.
//! - [`mask`] turns box sequences into Gaussian-smoothed target distributions
//!   over the latent grid.
//! - [`denoiser`] is a small diffusion transformer with text cross-attention,
//!   low-rank adapter injection, attention capture, and hand-rolled
//!   reverse-mode gradients.
//! - [`align`] scores pooled cross-attention against the soft masks (JSD by
//!   default, BCE and center-of-mass variants available).
//! - [`tto`] runs AdamW over the adapter factors during the early sampler
//!   steps.
//! - [`memory`] stores optimized adapters keyed by abstracted-prompt
//!   embeddings, with top-k average fusion on read and LFU eviction.
//! - [`probe`] measures per-block attention/layout overlap (mIoU) to pick
//!   which blocks to guide.
//!
//! Everything is deterministic given seeds: parallel kernels (enabled by the
//! default `parallel` feature) only distribute independent output rows or
//! combine fixed-size chunks in a fixed order, so results are bit-identical
//! with and without threads.

pub mod align;
pub mod denoiser;
pub mod grammar;
pub mod layout;
pub mod mask;
pub mod memory;
pub mod parallel;
pub mod probe;
pub mod tokenizer;
pub mod tto;

pub use align::{AlignmentConfig, LossKind};
pub use denoiser::{AdapterSet, AttentionRecord, Denoiser, DenoiserConfig, LatentState, PooledAttention};
pub use layout::{BBox, ObjectLayout, Planner, SpatioTemporalLayout};
pub use mask::SoftMask;
pub use memory::{MemoryKey, MemoryStore};
pub use probe::ProbeReport;
pub use tto::TtoConfig;
