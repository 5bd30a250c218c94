//! Model, hardware, and parallelism configuration.
//!
//! Configs load from a single JSON document with top-level `model`,
//! `hardware`, and `parallelism` objects. Keys match the field names below;
//! every field has a default, so a partial document (even `{}`) is valid.
//! Rates are base SI units throughout: FLOP/s, bytes/s, seconds.

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Numeric mode for a whole training run. `Mixed` keeps the optimizer state
/// in FP32 and runs everything else in FP16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Mixed,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(raw: &str) -> Result<Self, Error> {
        match raw {
            "fp32" => Ok(Precision::Fp32),
            "mixed" => Ok(Precision::Mixed),
            _ => Err(Error::InvalidValue {
                key: "precision",
                reason: format!("`{raw}` is not one of `fp32`, `mixed`"),
            }),
        }
    }
}

/// Transformer model dimensions for one training iteration.
///
/// `batch_size` is the global mini-batch; multi-device schedules derive the
/// per-device batch from it (see [`crate::parallel::apply_hybrid`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub num_heads: u64,
    pub intermediate_dim: u64,
    pub seq_len: u64,
    pub batch_size: u64,
    pub vocab_size: u64,
    pub max_positions: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Defaults are the Phase-1 large preset so a bare `{}` document
        // describes a realistic run.
        Self::preset("bert_large_phase1").expect("builtin preset")
    }
}

impl ModelConfig {
    /// Named dimension sets for the published BERT configurations.
    /// Valid names: `bert_large_phase1`, `bert_large_phase2`,
    /// `bert_base_phase1`.
    pub fn preset(name: &str) -> Result<Self, Error> {
        let large = ModelConfig {
            num_layers: 24,
            hidden_dim: 1024,
            num_heads: 16,
            intermediate_dim: 4096,
            seq_len: 128,
            batch_size: 32,
            vocab_size: 30522,
            max_positions: 512,
            precision: Precision::Fp32,
        };
        match name {
            "bert_large_phase1" => Ok(large),
            "bert_large_phase2" => Ok(ModelConfig {
                seq_len: 512,
                batch_size: 4,
                ..large
            }),
            "bert_base_phase1" => Ok(ModelConfig {
                num_layers: 12,
                hidden_dim: 768,
                num_heads: 12,
                intermediate_dim: 3072,
                ..large
            }),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    /// Per-head projection width, `hidden_dim / num_heads`.
    pub fn head_dim(&self) -> u64 {
        self.hidden_dim / self.num_heads
    }

    /// Tokens per iteration, `seq_len * batch_size`.
    pub fn tokens(&self) -> u64 {
        self.seq_len * self.batch_size
    }

    pub fn validate(&self) -> Result<(), Error> {
        fn at_least_one(key: &'static str, v: u64) -> Result<(), Error> {
            if v == 0 {
                return Err(Error::InvalidValue {
                    key,
                    reason: "must be at least 1".to_string(),
                });
            }
            Ok(())
        }
        at_least_one("num_layers", self.num_layers)?;
        at_least_one("hidden_dim", self.hidden_dim)?;
        at_least_one("num_heads", self.num_heads)?;
        at_least_one("intermediate_dim", self.intermediate_dim)?;
        at_least_one("seq_len", self.seq_len)?;
        at_least_one("batch_size", self.batch_size)?;
        at_least_one("vocab_size", self.vocab_size)?;
        at_least_one("max_positions", self.max_positions)?;
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Divisibility {
                left: "hidden_dim",
                right: "num_heads",
                left_value: self.hidden_dim,
                right_value: self.num_heads,
            });
        }
        if self.seq_len > self.max_positions {
            return Err(Error::InvalidValue {
                key: "seq_len",
                reason: format!(
                    "{} exceeds max_positions ({})",
                    self.seq_len, self.max_positions
                ),
            });
        }
        Ok(())
    }
}

/// Accelerator description for the roofline model.
///
/// The defaults describe an MI100-class device: 23.1 TFLOP/s FP32,
/// 184.6 TFLOP/s FP16, 1.2 TB/s HBM, 32 GB/s per link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareSpec {
    /// Peak FP32 throughput, FLOP/s.
    pub peak_flops_fp32: f64,
    /// Peak FP16 throughput, FLOP/s. Never below the FP32 peak.
    pub peak_flops_fp16: f64,
    /// Peak DRAM bandwidth, bytes/s.
    pub mem_bandwidth: f64,
    /// Fixed cost charged per kernel launch, seconds.
    pub launch_overhead: f64,
    /// Point-to-point interconnect bandwidth, bytes/s.
    pub link_bandwidth: f64,
    /// Fraction of peak FLOP/s a kernel actually sustains, in (0, 1].
    pub compute_efficiency: f64,
    /// Fraction of peak DRAM bandwidth a kernel actually sustains, in (0, 1].
    pub bandwidth_efficiency: f64,
}

impl Default for HardwareSpec {
    fn default() -> Self {
        Self {
            peak_flops_fp32: 23.1e12,
            peak_flops_fp16: 184.6e12,
            mem_bandwidth: 1.2e12,
            launch_overhead: 5e-6,
            link_bandwidth: 32e9,
            compute_efficiency: 0.85,
            bandwidth_efficiency: 0.80,
        }
    }
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<(), Error> {
        fn positive(key: &'static str, v: f64) -> Result<(), Error> {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidValue {
                    key,
                    reason: format!("must be a positive finite number, got {v}"),
                });
            }
            Ok(())
        }
        positive("peak_flops_fp32", self.peak_flops_fp32)?;
        positive("peak_flops_fp16", self.peak_flops_fp16)?;
        positive("mem_bandwidth", self.mem_bandwidth)?;
        positive("link_bandwidth", self.link_bandwidth)?;
        if self.peak_flops_fp16 < self.peak_flops_fp32 {
            return Err(Error::InvalidValue {
                key: "peak_flops_fp16",
                reason: format!(
                    "{} is below peak_flops_fp32 ({})",
                    self.peak_flops_fp16, self.peak_flops_fp32
                ),
            });
        }
        if !(self.launch_overhead.is_finite() && self.launch_overhead >= 0.0) {
            return Err(Error::InvalidValue {
                key: "launch_overhead",
                reason: format!(
                    "must be a non-negative finite number, got {}",
                    self.launch_overhead
                ),
            });
        }
        for (key, v) in [
            ("compute_efficiency", self.compute_efficiency),
            ("bandwidth_efficiency", self.bandwidth_efficiency),
        ] {
            if !(v.is_finite() && v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidValue {
                    key,
                    reason: format!("must lie in (0, 1], got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Execution layout: `data_degree` replicas, each a cluster of
/// `model_degree` devices holding one model shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelismConfig {
    pub data_degree: u64,
    pub model_degree: u64,
    /// Overlap per-layer gradient AllReduce with backprop compute.
    pub overlap_comm: bool,
    /// Gradient-accumulation factor; 1 means no micro-batching.
    pub micro_batches: u64,
}

impl Default for ParallelismConfig {
    fn default() -> Self {
        Self {
            data_degree: 1,
            model_degree: 1,
            overlap_comm: true,
            micro_batches: 1,
        }
    }
}

impl ParallelismConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), Error> {
        for (key, v) in [
            ("data_degree", self.data_degree),
            ("model_degree", self.model_degree),
            ("micro_batches", self.micro_batches),
        ] {
            if v == 0 {
                return Err(Error::InvalidValue {
                    key,
                    reason: "must be at least 1".to_string(),
                });
            }
        }
        if !model.batch_size.is_multiple_of(self.micro_batches) {
            return Err(Error::Divisibility {
                left: "batch_size",
                right: "micro_batches",
                left_value: model.batch_size,
                right_value: self.micro_batches,
            });
        }
        if !model.num_heads.is_multiple_of(self.model_degree) {
            return Err(Error::Divisibility {
                left: "num_heads",
                right: "model_degree",
                left_value: model.num_heads,
                right_value: self.model_degree,
            });
        }
        if !model.intermediate_dim.is_multiple_of(self.model_degree) {
            return Err(Error::Divisibility {
                left: "intermediate_dim",
                right: "model_degree",
                left_value: model.intermediate_dim,
                right_value: self.model_degree,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigDoc {
    model: ModelConfig,
    hardware: HardwareSpec,
    parallelism: ParallelismConfig,
}

/// Parses a JSON config document and validates every invariant.
/// Unknown keys and type errors are rejected with the key named.
pub fn parse_config(text: &str) -> Result<(ModelConfig, HardwareSpec, ParallelismConfig), Error> {
    let doc: ConfigDoc = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    doc.model.validate()?;
    doc.hardware.validate()?;
    doc.parallelism.validate(&doc.model)?;
    Ok((doc.model, doc.hardware, doc.parallelism))
}

/// Serializes a config back into the document schema. `parse_config` on the
/// result reproduces the inputs exactly.
pub fn emit_config(model: &ModelConfig, hw: &HardwareSpec, par: &ParallelismConfig) -> String {
    let doc = ConfigDoc {
        model: model.clone(),
        hardware: hw.clone(),
        parallelism: par.clone(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("config serializes");
    text.push('\n');
    text
}

/// Parameter counts split the way the optimizer buckets them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    /// Weights and biases of one transformer layer: the four attention
    /// projections, the two FC layers, and two LayerNorms.
    pub per_transformer_layer: u64,
    /// Token, position, and segment embedding tables.
    pub embeddings: u64,
    pub total: u64,
}

/// Counts trainable parameters.
///
/// Per layer: `4*(d^2 + d)` attention projections, `d*f + f` and `f*d + d`
/// for the two FC layers, and `2*(2*d)` for the LayerNorm gains and biases,
/// with `d = hidden_dim`, `f = intermediate_dim`.
pub fn param_count(cfg: &ModelConfig) -> ParamReport {
    let d = cfg.hidden_dim;
    let f = cfg.intermediate_dim;
    let per_transformer_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d);
    let embeddings = cfg.vocab_size * d + cfg.max_positions * d + 2 * d;
    ParamReport {
        per_transformer_layer,
        embeddings,
        total: cfg.num_layers * per_transformer_layer + embeddings,
    }
}

// =============================================================================
// Tests
// =============================================================================
