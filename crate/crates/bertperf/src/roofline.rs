//! Roofline cost model: op descriptor in, time estimate out.
//!
//! Each op is priced as `launch_overhead + max(compute term, memory term)`
//! against sustained (efficiency-derated) peaks. Operands are charged one
//! DRAM trip each: perfect reuse inside a kernel, none across kernels.

use serde::{Deserialize, Serialize};

use crate::config::HardwareSpec;
use crate::error::Error;
use crate::opgraph::{DType, GemmShape, OpDescriptor, OpKind};

/// Which roofline term dominates an op's modeled time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bound {
    Compute,
    Bandwidth,
    /// The fixed launch overhead exceeds both roofline terms; the kernel is
    /// too small for either resource to matter.
    Latency,
}

/// Modeled cost of one op.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub flops: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    /// FLOPs per byte of total traffic; 0 for no-op placeholders.
    pub arithmetic_intensity: f64,
    pub time_seconds: f64,
    pub bound: Bound,
}

fn peak_for(precision: DType, hw: &HardwareSpec) -> f64 {
    match precision {
        DType::Fp32 => hw.peak_flops_fp32,
        DType::Fp16 => hw.peak_flops_fp16,
    }
}

fn assemble(
    flops: u64,
    bytes_read: u64,
    bytes_written: u64,
    peak: f64,
    hw: &HardwareSpec,
) -> CostEstimate {
    let bytes = bytes_read + bytes_written;
    let compute_term = flops as f64 / (peak * hw.compute_efficiency);
    let memory_term = bytes as f64 / (hw.mem_bandwidth * hw.bandwidth_efficiency);
    let bound = if hw.launch_overhead > compute_term && hw.launch_overhead > memory_term {
        Bound::Latency
    } else if compute_term > memory_term {
        Bound::Compute
    } else {
        Bound::Bandwidth
    };
    let arithmetic_intensity = if bytes > 0 {
        flops as f64 / bytes as f64
    } else if flops > 0 {
        f64::INFINITY
    } else {
        0.0
    };
    CostEstimate {
        flops,
        bytes_read,
        bytes_written,
        arithmetic_intensity,
        time_seconds: hw.launch_overhead + compute_term.max(memory_term),
        bound,
    }
}

/// Costs one (possibly batched) GEMM.
///
/// FLOPs are `2·m·n·k·batch`; both input operands and the output are charged
/// one DRAM trip, so AI reduces to `2 / (bpe · (1/m + 1/n + 1/k))` and is
/// independent of `batch`. The peak-FLOPs rate follows the op precision.
pub fn gemm_cost(
    shape: &GemmShape,
    precision: DType,
    hw: &HardwareSpec,
) -> Result<CostEstimate, Error> {
    for (key, v) in [
        ("m", shape.m),
        ("n", shape.n),
        ("k", shape.k),
        ("batch", shape.batch),
    ] {
        if v == 0 {
            return Err(Error::InvalidValue {
                key,
                reason: "GEMM dimension must be at least 1".to_string(),
            });
        }
    }
    let bpe = precision.bytes();
    let flops = 2 * shape.m * shape.n * shape.k * shape.batch;
    let bytes_read = (shape.m * shape.k + shape.k * shape.n) * shape.batch * bpe;
    let bytes_written = shape.m * shape.n * shape.batch * bpe;
    Ok(assemble(
        flops,
        bytes_read,
        bytes_written,
        peak_for(precision, hw),
        hw,
    ))
}

/// Costs an elementwise group or a reduction.
///
/// Elementwise: `flops_per_element` per element, one whole-tensor sweep per
/// operand read/write, and one extra read sweep per `reduction_passes`.
/// Reduction: 2 FLOPs per element per pass (a multiply-accumulate), one read
/// sweep per pass, and a scalar result that rounds to zero write traffic.
///
/// # Panics
/// If the op is a GEMM or Collective; those are costed elsewhere.
pub fn elementwise_cost(op: &OpDescriptor, hw: &HardwareSpec) -> CostEstimate {
    let bpe = op.precision.bytes();
    let (flops, bytes_read, bytes_written) = match op.kind {
        OpKind::Elementwise {
            elements,
            flops_per_element,
            operand_reads,
            operand_writes,
            reduction_passes,
        } => (
            elements * flops_per_element,
            (operand_reads + reduction_passes) * elements * bpe,
            operand_writes * elements * bpe,
        ),
        OpKind::Reduction { elements, passes } => {
            (2 * elements * passes, passes * elements * bpe, 0)
        }
        OpKind::Gemm(_) | OpKind::Collective { .. } => {
            panic!("elementwise_cost called on {:?} op {}", op.phase, op.id)
        }
    };
    assemble(
        flops,
        bytes_read,
        bytes_written,
        peak_for(op.precision, hw),
        hw,
    )
}

/// Costs every op of a graph, returning estimates parallel-indexed to it.
///
/// Collective ops are rejected: communication is priced by the scheduling
/// layer, and one reaching this function means the caller skipped it.
pub fn estimate_graph(
    graph: &[OpDescriptor],
    hw: &HardwareSpec,
) -> Result<Vec<CostEstimate>, Error> {
    graph
        .iter()
        .map(|op| match &op.kind {
            OpKind::Gemm(shape) => gemm_cost(shape, op.precision, hw),
            OpKind::Elementwise { .. } | OpKind::Reduction { .. } => Ok(elementwise_cost(op, hw)),
            OpKind::Collective { .. } => Err(Error::UnexpectedCollective(op.id.clone())),
        })
        .collect()
}

// =============================================================================
// Tests
// =============================================================================
