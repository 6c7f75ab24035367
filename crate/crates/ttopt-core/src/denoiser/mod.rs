//! Toy video diffusion transformer over a `(tau, h, w)` latent grid.
//!
//! Four pre-norm residual blocks of self-attention, text cross-attention
//! (adapter injection and attention capture live here), and a SiLU MLP; a
//! deterministic first-order sampler on a linear data↔noise interpolation;
//! exact reverse-mode gradients for base weights and adapter factors.
//!
//! A constructed denoiser is immutable and safe to share across threads;
//! each sampling run owns its latent state and adapter set. Parallelism is
//! across samples and within the row-parallel kernels, never across steps
//! of one trajectory.

mod adapter;
mod backward;
mod forward;
mod linalg;
mod params;

pub use adapter::{AdapterPair, AdapterSet, ProjKind, ADAPTER_INIT_STD, PROJ_KINDS};
pub use backward::{AttentionLoss, Gradients};
pub use forward::{pool_object_attention, AttentionRecord, ForwardCache, PooledAttention};
pub use params::{load_checkpoint, save_checkpoint, BlockParams, LnParams, Params};

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DenoiserError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("block {0} was not captured")]
    BlockNotCaptured(usize),
    #[error("empty token span")]
    EmptySpan,
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),
    #[error("loss evaluation failed: {0}")]
    LossFailure(String),
    #[error("step hook failed: {0}")]
    HookFailure(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Interpolation path between data and noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `z_sigma = (1 - sigma) x0 + sigma noise`, uniform step spacing.
    RectifiedLinear = 0,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// `(tau, h, w)` latent grid.
    pub latent_dims: (usize, usize, usize),
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub sampler_steps: usize,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl DenoiserConfig {
    /// Desk-scale defaults.
    pub fn desk_default() -> Self {
        DenoiserConfig {
            latent_dims: (4, 8, 8),
            dim: 32,
            blocks: 4,
            heads: 4,
            text_len: 16,
            vocab: 512,
            sampler_steps: 20,
            schedule: NoiseSchedule::RectifiedLinear,
            seed: 0,
        }
    }

    /// Small config for finite-difference gradient checks.
    pub fn grad_check() -> Self {
        DenoiserConfig {
            latent_dims: (2, 4, 4),
            dim: 16,
            blocks: 2,
            heads: 2,
            text_len: 12,
            vocab: 128,
            sampler_steps: 4,
            schedule: NoiseSchedule::RectifiedLinear,
            seed: 0,
        }
    }

    pub fn latent_cells(&self) -> usize {
        let (tau, h, w) = self.latent_dims;
        tau * h * w
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(DenoiserError::ShapeMismatch(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.blocks < 2 {
            return Err(DenoiserError::ShapeMismatch(format!(
                "need at least 2 blocks, got {}",
                self.blocks
            )));
        }
        if self.sampler_steps < 2 {
            return Err(DenoiserError::ShapeMismatch(format!(
                "need at least 2 sampler steps, got {}",
                self.sampler_steps
            )));
        }
        if self.latent_cells() == 0 || self.text_len == 0 || self.vocab == 0 {
            return Err(DenoiserError::ShapeMismatch("zero-sized config".into()));
        }
        Ok(())
    }

    /// Noise level entering step `t` of the sampler.
    pub fn sigma_at(&self, t: usize) -> f64 {
        match self.schedule {
            NoiseSchedule::RectifiedLinear => 1.0 - t as f64 / self.sampler_steps as f64,
        }
    }
}

/// Latent grid plus the sampler step it belongs to.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Array4<f64>,
    pub t: usize,
}

pub(crate) fn flatten(z: &Array4<f64>) -> Array2<f64> {
    let (tau, h, w, d) = z.dim();
    z.to_shape((tau * h * w, d)).unwrap().to_owned()
}

pub(crate) fn unflatten(z: &Array2<f64>, dims: (usize, usize, usize)) -> Array4<f64> {
    let (tau, h, w) = dims;
    let d = z.ncols();
    z.to_shape((tau, h, w, d)).unwrap().to_owned()
}

/// Which sampler steps and blocks to capture attention for.
#[derive(Debug, Clone, Default)]
pub struct CaptureSpec {
    pub steps: BTreeSet<usize>,
    pub blocks: BTreeSet<usize>,
}

/// A finished sampling run.
#[derive(Debug)]
pub struct SampleRun {
    pub final_latent: Array4<f64>,
    /// Captured attention per requested step.
    pub records: BTreeMap<usize, AttentionRecord>,
}

/// The denoiser: immutable config plus base weights.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    params: Params,
}

impl Denoiser {
    /// Random weights from the config seed.
    pub fn new(config: DenoiserConfig) -> Result<Self, DenoiserError> {
        config.validate()?;
        let params = Params::init(&config, config.seed);
        Ok(Denoiser { config, params })
    }

    pub fn from_parts(config: DenoiserConfig, params: Params) -> Result<Self, DenoiserError> {
        config.validate()?;
        Ok(Denoiser { config, params })
    }

    pub fn load(path: &Path) -> Result<Self, DenoiserError> {
        let (config, params) = load_checkpoint(path)?;
        Ok(Denoiser { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), DenoiserError> {
        save_checkpoint(&self.config, &self.params, path)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable weight access for training loops and test fixtures.
    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Bit-level weight checksum, for immutability assertions.
    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Seeded unit-Gaussian initial latent.
    pub fn initial_latent(&self, seed: u64) -> Array4<f64> {
        let (tau, h, w) = self.config.latent_dims;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        Array4::from_shape_fn((tau, h, w, self.config.dim), |_| normal.sample(&mut rng))
    }

    /// One denoising forward pass. With `adapters = None` and with a fresh
    /// adapter set the outputs are bit-identical.
    pub fn forward(
        &self,
        state: &LatentState,
        tokens: &[usize],
        adapters: Option<&AdapterSet>,
        capture: &BTreeSet<usize>,
    ) -> Result<(Array4<f64>, AttentionRecord), DenoiserError> {
        let z = flatten(&state.z);
        let sigma = self.config.sigma_at(state.t);
        let (pred, record, _) = self.forward_flat(&z, sigma, tokens, adapters, capture)?;
        Ok((unflatten(&pred, self.config.latent_dims), record))
    }

    /// Forward pass keeping the cache for a later [`Denoiser::backward`].
    /// `sigma` is the noise level directly, so training loops can sample it
    /// continuously.
    pub fn forward_with_cache(
        &self,
        z: &Array2<f64>,
        sigma: f64,
        tokens: &[usize],
        adapters: Option<&AdapterSet>,
        capture: &BTreeSet<usize>,
    ) -> Result<(Array2<f64>, AttentionRecord, ForwardCache), DenoiserError> {
        self.forward_flat(z, sigma, tokens, adapters, capture)
    }

    /// Run the deterministic first-order sampler from seeded noise.
    ///
    /// At every step the hook sees the pre-update state and that step's
    /// attention record, and may mutate the adapters; returning `true`
    /// recomputes the step's prediction with the updated adapters before the
    /// latent update. Identical inputs produce bit-identical trajectories.
    pub fn sample<F>(
        &self,
        tokens: &[usize],
        noise_seed: u64,
        mut adapters: Option<&mut AdapterSet>,
        capture: &CaptureSpec,
        mut hook: F,
    ) -> Result<SampleRun, DenoiserError>
    where
        F: FnMut(usize, &LatentState, &AttentionRecord, Option<&mut AdapterSet>) -> Result<bool, DenoiserError>,
    {
        let cfg = &self.config;
        let steps = cfg.sampler_steps;
        let dt = 1.0 / steps as f64;
        let empty = BTreeSet::new();
        let mut z = flatten(&self.initial_latent(noise_seed));
        let mut records = BTreeMap::new();
        for t in 0..steps {
            let sigma = cfg.sigma_at(t);
            let capture_now = capture.steps.contains(&t);
            let blocks = if capture_now { &capture.blocks } else { &empty };
            let (mut pred, mut record, _) =
                self.forward_flat(&z, sigma, tokens, adapters.as_deref(), blocks)?;
            let state = LatentState { z: unflatten(&z, cfg.latent_dims), t };
            let mutated = hook(t, &state, &record, adapters.as_deref_mut())?;
            if mutated {
                let redo = self.forward_flat(&z, sigma, tokens, adapters.as_deref(), blocks)?;
                pred = redo.0;
                record = redo.1;
            }
            if capture_now {
                records.insert(t, record);
            }
            for (zv, pv) in z.iter_mut().zip(pred.iter()) {
                *zv -= dt * pv;
            }
        }
        Ok(SampleRun { final_latent: unflatten(&z, cfg.latent_dims), records })
    }
}

/// Hook that does nothing, for plain sampling.
pub fn null_hook(
    _step: usize,
    _state: &LatentState,
    _record: &AttentionRecord,
    _adapters: Option<&mut AdapterSet>,
) -> Result<bool, DenoiserError> {
    Ok(false)
}

#[cfg(test)]
mod tests;
