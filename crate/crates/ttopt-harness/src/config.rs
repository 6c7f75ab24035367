//! Run configuration: TOML file mirroring the full knob set, with CLI
//! overrides applied on top.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use ttopt_core::denoiser::DenoiserConfig;
use ttopt_core::tto::TtoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain sampling, no optimization, no memory.
    Baseline,
    /// Per-sample optimization, results discarded.
    TtoOnly,
    /// Full streaming: read, optimize, insert/update, evict.
    Ttom,
    /// Memory is read-only; usage counters stay frozen too.
    TtomReadonly,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "tto_only" => Ok(Mode::TtoOnly),
            "ttom" => Ok(Mode::Ttom),
            "ttom_readonly" => Ok(Mode::TtomReadonly),
            other => Err(format!(
                "unknown mode {other:?} (expected baseline|tto_only|ttom|ttom_readonly)"
            )),
        }
    }
}

impl Mode {
    pub fn uses_memory(self) -> bool {
        matches!(self, Mode::Ttom | Mode::TtomReadonly)
    }

    pub fn runs_tto(self) -> bool {
        !matches!(self, Mode::Baseline)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub capacity: usize,
    pub threshold: f64,
    pub top_k: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            capacity: ttopt_core::memory::DEFAULT_CAPACITY,
            threshold: ttopt_core::memory::DEFAULT_THRESHOLD,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// `rule` or `external`.
    pub kind: String,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            kind: "rule".into(),
            endpoint: String::new(),
            model: String::new(),
            api_key_env: String::new(),
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Paths {
    pub prompts: Option<PathBuf>,
    pub memory_dir: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Probe report to derive guided blocks from.
    pub probe_report: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Video frame count handed to the planner.
    pub num_frames: usize,
    pub adapter_rank: usize,
    /// Whether memory-initialized samples still run optimization.
    pub continual_tto: bool,
    /// Wall-clock latency makes metrics non-reproducible; opt in explicitly.
    pub record_latency: bool,
    pub shuffle_prompts: bool,
    /// Blocks taken from the probe report when one is configured.
    pub probe_top_k: usize,
    pub denoiser: DenoiserConfig,
    pub tto: TtoConfig,
    pub memory: MemoryConfig,
    pub planner: PlannerConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Ttom,
            seed: 42,
            num_frames: 16,
            adapter_rank: 8,
            continual_tto: true,
            record_latency: false,
            shuffle_prompts: false,
            probe_top_k: 2,
            denoiser: DenoiserConfig::desk_default(),
            tto: TtoConfig::default(),
            memory: MemoryConfig::default(),
            planner: PlannerConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        let (tau, _, _) = self.denoiser.latent_dims;
        if self.num_frames == 0 || self.num_frames % tau != 0 {
            bail!("num_frames {} must be a positive multiple of tau {tau}", self.num_frames);
        }
        if self.memory.capacity == 0 {
            bail!("memory capacity must be positive");
        }
        if self.memory.top_k == 0 {
            bail!("memory top_k must be positive");
        }
        if !(0.0..=1.0).contains(&self.memory.threshold) {
            bail!("memory threshold {} outside (0, 1]", self.memory.threshold);
        }
        if self.planner.kind != "rule" && self.planner.kind != "external" {
            bail!("planner kind {:?} (expected rule|external)", self.planner.kind);
        }
        self.tto
            .validate(self.denoiser.sampler_steps)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.mode, cfg.mode);
        assert_eq!(back.denoiser, cfg.denoiser);
        assert_eq!(back.memory.capacity, cfg.memory.capacity);
        back.validate().unwrap();
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str(
            "mode = \"baseline\"\nseed = 7\n[tto]\nguided_steps = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::Baseline);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.tto.guided_steps, 3);
        assert_eq!(cfg.tto.iters_per_step, TtoConfig::default().iters_per_step);
        assert_eq!(cfg.memory.capacity, MemoryConfig::default().capacity);
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut cfg = RunConfig::default();
        cfg.num_frames = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.planner.kind = "llm".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.tto.iters_per_step = 0;
        assert!(cfg.validate().is_err());
    }
}
