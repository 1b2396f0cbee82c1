//! Analytical cost model for on-device MLLM serving.
//!
//! The model is simple and fully deterministic. With
//! `eff(t) = t / (1 + c * (t - 1))` the effective parallel speedup of `t`
//! threads under contention `c`:
//!
//! ```text
//! llm_mem      = memory_footprint(llm_param_count, quant_scheme)
//! peak_mem     = vit_mem + llm_mem            (simultaneous loading)
//!              = max(vit_mem, llm_mem)        (sequential loading)
//! p            = paging_penalty if peak_mem > memory_bytes else 1
//! load_time    = (vit_mem + llm_mem) / load_bandwidth
//! vit_time     = vit_flops / (eff * flops_per_core * vit_speedup) * p
//! prefill_time = prompt_tokens * prefill_flops / (eff * flops_per_core) * p
//! encode       = load_time + vit_time + prefill_time
//! decode_rate  = eff * flops_per_core / (decode_flops * p)
//! ```
//!
//! Only orderings between configurations are meaningful; absolute numbers
//! are not calibrated against real devices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{memory_footprint, QuantScheme};

pub const DEFAULT_CONTENTION: f64 = 0.1;

fn default_contention() -> f64 {
    DEFAULT_CONTENTION
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub cores: u32,
    pub flops_per_core: f64,
    pub memory_bytes: u64,
    pub load_bandwidth: f64,
    pub paging_penalty: f64,
    #[serde(default = "default_contention")]
    pub contention: f64,
}

impl DeviceProfile {
    /// An 8-core phone with about 6 GB available to the app; tight enough that
    /// loading the vision encoder and a 4-bit 8B LLM together triggers paging.
    pub fn reference_phone() -> Self {
        Self {
            cores: 8,
            flops_per_core: 2.0e10,
            memory_bytes: 6_000_000_000,
            load_bandwidth: 1.0e9,
            paging_penalty: 3.0,
            contention: DEFAULT_CONTENTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(format!("device: {msg}")));
        if self.cores == 0 {
            return bad("cores must be positive");
        }
        if !(self.flops_per_core.is_finite() && self.flops_per_core > 0.0) {
            return bad("flops_per_core must be positive");
        }
        if self.memory_bytes == 0 {
            return bad("memory_bytes must be positive");
        }
        if !(self.load_bandwidth.is_finite() && self.load_bandwidth > 0.0) {
            return bad("load_bandwidth must be positive");
        }
        if !(self.paging_penalty.is_finite() && self.paging_penalty >= 1.0) {
            return bad("paging_penalty must be at least 1");
        }
        if !(self.contention.is_finite() && self.contention >= 0.0) {
            return bad("contention must be non-negative");
        }
        Ok(())
    }

    /// Effective parallel speedup of `threads` threads.
    pub fn efficiency(&self, threads: u32) -> f64 {
        let t = f64::from(threads);
        t / (1.0 + self.contention * (t - 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub vit_mem_bytes: u64,
    pub llm_param_count: u64,
    pub vit_flops_per_image: f64,
    pub llm_prefill_flops_per_token: f64,
    pub llm_decode_flops_per_token: f64,
    pub prompt_tokens: u64,
}

impl ModelProfile {
    /// A ~0.6 GB-in-fp16 vision encoder in front of an 8B LLM, with a prompt
    /// of 960 visual plus 64 text tokens.
    pub fn reference_mllm() -> Self {
        Self {
            vit_mem_bytes: 1_200_000_000,
            llm_param_count: 8_000_000_000,
            vit_flops_per_image: 2.0e12,
            llm_prefill_flops_per_token: 1.6e10,
            llm_decode_flops_per_token: 1.6e10,
            prompt_tokens: 1024,
        }
    }

    pub fn llm_mem_bytes(&self, scheme: QuantScheme) -> u64 {
        memory_footprint(self.llm_param_count, scheme)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(format!("model: {msg}")));
        if self.vit_mem_bytes == 0 || self.llm_param_count == 0 || self.prompt_tokens == 0 {
            return bad("byte, parameter and token counts must be positive");
        }
        for (name, v) in [
            ("vit_flops_per_image", self.vit_flops_per_image),
            ("llm_prefill_flops_per_token", self.llm_prefill_flops_per_token),
            ("llm_decode_flops_per_token", self.llm_decode_flops_per_token),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loading {
    Simultaneous,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployConfig {
    pub loading: Loading,
    pub threads: u32,
    pub quant_scheme: QuantScheme,
    pub vit_accelerator_speedup: f64,
}

impl DeployConfig {
    /// Simultaneous loading, 4 threads, 4-bit blocks of 32, CPU-only encoder.
    pub fn baseline() -> Self {
        Self {
            loading: Loading::Simultaneous,
            threads: 4,
            quant_scheme: QuantScheme::Q4Block(32),
            vit_accelerator_speedup: 1.0,
        }
    }

    pub fn validate(&self, device: &DeviceProfile) -> Result<()> {
        if self.threads == 0 || self.threads > device.cores {
            return Err(Error::BadConfig(format!(
                "threads must be in 1..={}, got {}",
                device.cores, self.threads
            )));
        }
        if !(self.vit_accelerator_speedup.is_finite() && self.vit_accelerator_speedup >= 1.0) {
            return Err(Error::BadConfig(format!(
                "vit_accelerator_speedup must be at least 1, got {}",
                self.vit_accelerator_speedup
            )));
        }
        if self.quant_scheme == QuantScheme::Q4Block(0) {
            return Err(Error::BadConfig("q4 block size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub peak_mem_bytes: u64,
    pub encode_latency_s: f64,
    pub decode_tokens_per_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MinEncodeLatency,
    MaxDecodeThroughput,
}

impl Objective {
    /// True when `a` is strictly better than `b`.
    pub fn better(&self, a: &SimMetrics, b: &SimMetrics) -> bool {
        match self {
            Objective::MinEncodeLatency => a.encode_latency_s < b.encode_latency_s,
            Objective::MaxDecodeThroughput => a.decode_tokens_per_s > b.decode_tokens_per_s,
        }
    }
}

pub fn simulate(device: &DeviceProfile, model: &ModelProfile, cfg: &DeployConfig) -> Result<SimMetrics> {
    device.validate()?;
    model.validate()?;
    cfg.validate(device)?;

    let vit_mem = model.vit_mem_bytes;
    let llm_mem = model.llm_mem_bytes(cfg.quant_scheme);
    let peak_mem_bytes = match cfg.loading {
        Loading::Simultaneous => vit_mem + llm_mem,
        Loading::Sequential => vit_mem.max(llm_mem),
    };
    let paging = if peak_mem_bytes > device.memory_bytes { device.paging_penalty } else { 1.0 };
    let compute = device.efficiency(cfg.threads) * device.flops_per_core;

    let load_time = (vit_mem + llm_mem) as f64 / device.load_bandwidth;
    let vit_time = model.vit_flops_per_image / (compute * cfg.vit_accelerator_speedup) * paging;
    let prefill_time = model.prompt_tokens as f64 * model.llm_prefill_flops_per_token / compute * paging;

    Ok(SimMetrics {
        peak_mem_bytes,
        encode_latency_s: load_time + vit_time + prefill_time,
        decode_tokens_per_s: compute / (model.llm_decode_flops_per_token * paging),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub index: usize,
    pub config: DeployConfig,
    pub metrics: SimMetrics,
}

/// Exhaustively simulates `space` and returns the best configuration. Ties
/// go to the earliest entry.
pub fn config_search(
    device: &DeviceProfile,
    model: &ModelProfile,
    space: &[DeployConfig],
    objective: Objective,
) -> Result<SearchResult> {
    let mut best: Option<SearchResult> = None;
    for (index, cfg) in space.iter().enumerate() {
        let metrics = simulate(device, model, cfg)?;
        if best.as_ref().is_none_or(|b| objective.better(&metrics, &b.metrics)) {
            best = Some(SearchResult { index, config: *cfg, metrics });
        }
    }
    best.ok_or(Error::EmptySpace)
}

/// Every combination of loading mode, thread count `1..=cores`, quantization
/// scheme and encoder speedup.
pub fn grid_space(device: &DeviceProfile, schemes: &[QuantScheme], vit_speedups: &[f64]) -> Vec<DeployConfig> {
    let mut out = Vec::new();
    for loading in [Loading::Simultaneous, Loading::Sequential] {
        for threads in 1..=device.cores {
            for &quant_scheme in schemes {
                for &vit_accelerator_speedup in vit_speedups {
                    out.push(DeployConfig { loading, threads, quant_scheme, vit_accelerator_speedup });
                }
            }
        }
    }
    out
}
