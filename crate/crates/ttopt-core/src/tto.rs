//! Test-time optimization: AdamW over the adapter factors against the
//! alignment loss, attached to the early sampler steps.

use serde::{Deserialize, Serialize};

use crate::align::{build_targets, AlignError, AlignmentConfig, AlignmentObjective, AlignTarget};
use crate::denoiser::{
    AdapterSet, AttentionRecord, Denoiser, DenoiserError, LatentState, SampleRun,
};
use crate::layout::SpatioTemporalLayout;
use crate::mask::DEFAULT_SIGMA;

#[derive(Debug, thiserror::Error)]
pub enum TtoError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TtoConfig {
    /// Initial sampler steps to optimize during.
    pub guided_steps: usize,
    pub iters_per_step: usize,
    pub optimizer: AdamHyper,
    pub align: AlignmentConfig,
    /// Gaussian width for the target masks, in latent cells.
    pub mask_sigma: f64,
}

impl Default for TtoConfig {
    fn default() -> Self {
        TtoConfig {
            guided_steps: 5,
            iters_per_step: 8,
            optimizer: AdamHyper::default(),
            align: AlignmentConfig::default(),
            mask_sigma: DEFAULT_SIGMA,
        }
    }
}

impl TtoConfig {
    pub fn validate(&self, sampler_steps: usize) -> Result<(), TtoError> {
        if self.guided_steps > sampler_steps {
            return Err(TtoError::BadConfig(format!(
                "guided_steps {} exceeds sampler_steps {sampler_steps}",
                self.guided_steps
            )));
        }
        if self.iters_per_step == 0 {
            return Err(TtoError::BadConfig("iters_per_step must be >= 1".into()));
        }
        if self.optimizer.learning_rate <= 0.0 {
            return Err(TtoError::BadConfig(format!(
                "learning_rate must be positive, got {}",
                self.optimizer.learning_rate
            )));
        }
        if self.align.guided_blocks.is_empty() {
            return Err(TtoError::BadConfig("guided_blocks is empty".into()));
        }
        Ok(())
    }
}

/// First/second moment accumulators, one slice pair per visited parameter
/// slice, plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_adapters(adapters: &AdapterSet) -> Self {
        let mut m = Vec::new();
        adapters.for_each_factor(&mut |s| m.push(vec![0.0; s.len()]));
        OptimizerState { v: m.clone(), m, step: 0 }
    }

    pub fn for_params(params: &crate::denoiser::Params) -> Self {
        let mut m = Vec::new();
        params.for_each(&mut |s| m.push(vec![0.0; s.len()]));
        OptimizerState { v: m.clone(), m, step: 0 }
    }
}

/// One decoupled-weight-decay adaptive update over a parameter slice.
/// `t` is the already-incremented step counter.
pub fn adamw_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hp: &AdamHyper,
) -> Result<(), TtoError> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TtoError::NonFiniteGradient);
    }
    let bias1 = 1.0 - hp.beta1.powi(t as i32);
    let bias2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -=
            hp.learning_rate * (m_hat / (v_hat.sqrt() + hp.epsilon) + hp.weight_decay * params[i]);
    }
    Ok(())
}

/// AdamW over a whole adapter set.
pub fn adamw_step(
    adapters: &mut AdapterSet,
    grads: &AdapterSet,
    state: &mut OptimizerState,
    hp: &AdamHyper,
) -> Result<(), TtoError> {
    state.step += 1;
    let t = state.step;
    let flat_grads = grads.factor_slices();
    let mut idx = 0;
    let mut result = Ok(());
    adapters.for_each_factor_mut(&mut |p| {
        if result.is_err() {
            return;
        }
        result = adamw_slice(p, flat_grads[idx], &mut state.m[idx], &mut state.v[idx], t, hp);
        idx += 1;
    });
    result
}

/// Per-iteration loss values for one guided step.
pub type LossTrace = Vec<f64>;

/// Run `iters_per_step` iterations of forward → pool → loss → gradient →
/// AdamW at a fixed latent state. The latent is read-only; only the adapter
/// factors move.
#[allow(clippy::too_many_arguments)]
pub fn optimize_step(
    denoiser: &Denoiser,
    state: &LatentState,
    tokens: &[usize],
    layout: &SpatioTemporalLayout,
    targets: &[AlignTarget],
    adapters: &mut AdapterSet,
    opt_state: &mut OptimizerState,
    config: &TtoConfig,
) -> Result<LossTrace, TtoError> {
    config.validate(denoiser.config.sampler_steps)?;
    let objective = AlignmentObjective {
        kind: config.align.loss_kind,
        guided_blocks: &config.align.guided_blocks,
        spans: layout.objects.iter().map(|o| o.token_span.clone()).collect(),
        targets,
        latent_dims: denoiser.config.latent_dims,
    };
    let mut trace = Vec::with_capacity(config.iters_per_step);
    for _ in 0..config.iters_per_step {
        let (loss, grads) = denoiser.grad_wrt_adapters(
            state,
            tokens,
            adapters,
            &config.align.guided_blocks,
            &objective,
        )?;
        trace.push(loss);
        adamw_step(adapters, &grads, opt_state, &config.optimizer)?;
    }
    Ok(trace)
}

/// The result of one optimized sampling run.
#[derive(Debug)]
pub struct TtoRun {
    pub adapters: AdapterSet,
    /// One loss trace per guided step.
    pub step_traces: Vec<LossTrace>,
    pub sample: SampleRun,
}

/// Sample with [`optimize_step`] attached to the first `guided_steps` steps;
/// later steps run with the optimized adapters frozen. With
/// `guided_steps = 0` this is exactly a plain sampling pass.
pub fn run_tto(
    denoiser: &Denoiser,
    tokens: &[usize],
    layout: &SpatioTemporalLayout,
    adapters_init: AdapterSet,
    config: &TtoConfig,
    noise_seed: u64,
    capture: &crate::denoiser::CaptureSpec,
) -> Result<TtoRun, TtoError> {
    config.validate(denoiser.config.sampler_steps)?;
    let targets = build_targets(layout, config.mask_sigma)?;
    let mut adapters = adapters_init;
    let mut opt_state = OptimizerState::for_adapters(&adapters);
    let mut step_traces: Vec<LossTrace> = Vec::new();
    let mut hook_error: Option<TtoError> = None;
    let sample = {
        let hook = |step: usize,
                    state: &LatentState,
                    _record: &AttentionRecord,
                    adapters: Option<&mut AdapterSet>|
         -> Result<bool, DenoiserError> {
            if step >= config.guided_steps {
                return Ok(false);
            }
            let adapters = adapters.expect("adapters attached for tto");
            match optimize_step(
                denoiser,
                state,
                tokens,
                layout,
                &targets,
                adapters,
                &mut opt_state,
                config,
            ) {
                Ok(trace) => {
                    step_traces.push(trace);
                    Ok(true)
                }
                Err(e) => {
                    let msg = e.to_string();
                    hook_error = Some(e);
                    Err(DenoiserError::HookFailure(msg))
                }
            }
        };
        denoiser.sample(tokens, noise_seed, Some(&mut adapters), capture, hook)
    };
    let sample = match sample {
        Ok(s) => s,
        Err(e) => {
            return Err(match hook_error {
                Some(inner) => inner,
                None => TtoError::Denoiser(e),
            })
        }
    };
    Ok(TtoRun { adapters, step_traces, sample })
}
