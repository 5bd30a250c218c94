//! Graph-to-graph transforms that score optimizations before anyone builds
//! them: kernel fusion for the elementwise chains, fused QKV projections,
//! and gradient-accumulation micro-batching. [`compare`] prices any two
//! graphs on the same hardware and reports the deltas.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::config::HardwareSpec;
use crate::config::{param_count, ModelConfig};
use crate::error::Error;
use crate::opgraph::{
    build_iteration, Category, DType, OpDescriptor, OpKind, Phase, FLOPS_GRAD_ACCUM,
};
use crate::roofline::estimate_graph;

// ---------------------------------------------------------------------------
// Elementwise chain expansion and fusion
// ---------------------------------------------------------------------------

/// One link of an unfused chain: kernel name, flops per element, reads
/// beyond the incoming intermediate, and reduction passes.
type ChainOp = (&'static str, u64, u64, u64);

// Forward chains. Every link reads the previous intermediate (or the chain
// input) plus `extra` operands, and writes one intermediate.
const ATTN_FWD_CHAIN: &[ChainOp] = &[
    ("scale", 1, 0, 0),
    ("mask", 1, 1, 0),
    ("softmax", 5, 0, 1),
    ("dropout", 1, 0, 0),
];
const GELU_FWD_CHAIN: &[ChainOp] = &[
    ("cube", 2, 0, 0),
    ("inner", 2, 0, 0),
    ("tanh", 5, 0, 0),
    ("blend", 1, 0, 0),
];
const DRLN_FWD_CHAIN: &[ChainOp] = &[
    ("dropout", 1, 0, 0),
    ("residual", 1, 1, 0),
    ("layernorm", 6, 0, 1),
];
// Backward chains run the links in reverse; the extra operands are the saved
// forward tensors each gradient kernel needs.
const ATTN_BWD_CHAIN: &[ChainOp] = &[
    ("dropout", 1, 1, 0),
    ("softmax", 5, 1, 1),
    ("mask", 1, 0, 0),
    ("scale", 1, 0, 0),
];
const GELU_BWD_CHAIN: &[ChainOp] = &[
    ("tanh", 5, 1, 0),
    ("inner", 2, 0, 0),
    ("cube", 2, 0, 0),
    ("blend", 1, 0, 0),
];
const DRLN_BWD_CHAIN: &[ChainOp] = &[
    ("layernorm", 6, 1, 1),
    ("residual", 1, 0, 0),
    ("dropout", 1, 1, 0),
];

fn chain_for(category: Category, phase: Phase) -> Option<&'static [ChainOp]> {
    match (category, phase) {
        (Category::AttnScaleMaskSoftmaxDropout, Phase::Forward) => Some(ATTN_FWD_CHAIN),
        (Category::AttnScaleMaskSoftmaxDropout, Phase::BackwardActGrad) => Some(ATTN_BWD_CHAIN),
        (Category::Gelu, Phase::Forward) => Some(GELU_FWD_CHAIN),
        (Category::Gelu, Phase::BackwardActGrad) => Some(GELU_BWD_CHAIN),
        (Category::DropResidualLayerNorm, Phase::Forward) => Some(DRLN_FWD_CHAIN),
        (Category::DropResidualLayerNorm, Phase::BackwardActGrad) => Some(DRLN_BWD_CHAIN),
        _ => None,
    }
}

/// Rewrites every fused elementwise group as its unfused kernel chain, the
/// way a framework without fusion would execute it: each link reads the
/// previous link's output back from memory and writes its own. Chain ops are
/// named `<group id>.<kernel>`. Ops without a known chain pass through.
///
/// Zero-element placeholders are not expanded; neither are optimizer ops,
/// whose stages already share no data across layers.
pub fn expand_elementwise_groups(graph: &[OpDescriptor]) -> Vec<OpDescriptor> {
    let mut out = Vec::with_capacity(graph.len());
    for op in graph {
        let OpKind::Elementwise { elements, .. } = op.kind else {
            out.push(op.clone());
            continue;
        };
        let Some(chain) = chain_for(op.category, op.phase) else {
            out.push(op.clone());
            continue;
        };
        if elements == 0 {
            out.push(op.clone());
            continue;
        }
        for (name, fpe, extra_reads, passes) in chain {
            out.push(OpDescriptor {
                id: format!("{}.{name}", op.id),
                layer: op.layer,
                phase: op.phase,
                category: op.category,
                kind: OpKind::Elementwise {
                    elements,
                    flops_per_element: *fpe,
                    operand_reads: 1 + extra_reads,
                    operand_writes: 1,
                    reduction_passes: *passes,
                },
                precision: op.precision,
            });
        }
    }
    out
}

fn common_dot_prefix(ids: &[&str]) -> String {
    let first: Vec<&str> = ids[0].split('.').collect();
    let mut keep = first.len();
    for id in &ids[1..] {
        let segs: Vec<&str> = id.split('.').collect();
        let shared = first.iter().zip(&segs).take_while(|(a, b)| a == b).count();
        keep = keep.min(shared);
    }
    first[..keep].join(".")
}

/// Fuses a contiguous producer-consumer chain of elementwise ops into one
/// kernel. The intermediates stay on chip, so the fused op keeps the first
/// link's reads plus every later link's extra operands, the last link's
/// writes plus every earlier link's extra outputs, the summed flops and
/// reduction passes, and pays one launch instead of `group.len()`.
///
/// A single-op group is returned unchanged. The group must name consecutive
/// elementwise ops of one site: same category, layer, phase, precision, and
/// element count, adjacent in graph order.
pub fn fuse_elementwise(
    graph: &[OpDescriptor],
    group: &[&str],
) -> Result<Vec<OpDescriptor>, Error> {
    if group.is_empty() {
        return Err(Error::NotAChain("empty group".to_string()));
    }
    let start = graph
        .iter()
        .position(|op| op.id == group[0])
        .ok_or_else(|| Error::NotAChain(format!("no op named `{}`", group[0])))?;
    if start + group.len() > graph.len() {
        return Err(Error::NotAChain(
            "group runs past the end of the graph".to_string(),
        ));
    }
    let ops = &graph[start..start + group.len()];
    for (op, want) in ops.iter().zip(group) {
        if op.id != *want {
            return Err(Error::NotAChain(format!(
                "`{want}` is not adjacent to `{}` in graph order",
                group[0]
            )));
        }
    }

    let head = &ops[0];
    let mut elements = 0;
    for op in ops {
        let OpKind::Elementwise { elements: e, .. } = op.kind else {
            return Err(Error::NotAChain(format!("`{}` is not elementwise", op.id)));
        };
        if (op.category, op.layer, op.phase, op.precision)
            != (head.category, head.layer, head.phase, head.precision)
        {
            return Err(Error::NotAChain(format!(
                "`{}` and `{}` belong to different sites",
                head.id, op.id
            )));
        }
        if elements != 0 && e != elements {
            return Err(Error::NotAChain(format!(
                "`{}` covers {e} elements, chain covers {elements}",
                op.id
            )));
        }
        elements = e;
    }
    if group.len() == 1 {
        return Ok(graph.to_vec());
    }

    let mut flops_per_element = 0;
    let mut reduction_passes = 0;
    let mut operand_reads = 0;
    let mut operand_writes = 0;
    for (i, op) in ops.iter().enumerate() {
        let OpKind::Elementwise {
            flops_per_element: fpe,
            operand_reads: r,
            operand_writes: w,
            reduction_passes: p,
            ..
        } = op.kind
        else {
            unreachable!("validated above");
        };
        if r == 0 || w == 0 {
            return Err(Error::NotAChain(format!(
                "`{}` does not pass an intermediate through the chain",
                op.id
            )));
        }
        flops_per_element += fpe;
        reduction_passes += p;
        // The first link's input and every later link's side operands come
        // from memory; the intermediate between links does not.
        operand_reads += if i == 0 { r } else { r - 1 };
        // Mirror image for outputs.
        operand_writes += if i == ops.len() - 1 { w } else { w - 1 };
    }

    let ids: Vec<&str> = ops.iter().map(|op| op.id.as_str()).collect();
    let fused_id = common_dot_prefix(&ids);
    if fused_id.is_empty() {
        return Err(Error::NotAChain(
            "group ids share no common site prefix".to_string(),
        ));
    }

    let fused = OpDescriptor {
        id: fused_id,
        layer: head.layer,
        phase: head.phase,
        category: head.category,
        kind: OpKind::Elementwise {
            elements,
            flops_per_element,
            operand_reads,
            operand_writes,
            reduction_passes,
        },
        precision: head.precision,
    };
    let mut out = Vec::with_capacity(graph.len() - group.len() + 1);
    out.extend_from_slice(&graph[..start]);
    out.push(fused);
    out.extend_from_slice(&graph[start + group.len()..]);
    Ok(out)
}

/// Fuses every maximal unfused chain in the graph: consecutive elementwise
/// ops of one site (shared `<site>.<kernel>` id prefix, same category,
/// layer, and phase). Applying this to an expanded graph reproduces the
/// original fused groups exactly; a graph with no chains passes through.
pub fn fuse_all_elementwise_sites(graph: &[OpDescriptor]) -> Vec<OpDescriptor> {
    let site_of = |op: &OpDescriptor| -> Option<String> {
        let (site, _kernel) = op.id.rsplit_once('.')?;
        matches!(op.kind, OpKind::Elementwise { .. }).then(|| site.to_string())
    };

    let mut out: Vec<OpDescriptor> = Vec::with_capacity(graph.len());
    let mut i = 0;
    while i < graph.len() {
        let op = &graph[i];
        let site = site_of(op);
        let mut j = i + 1;
        if let Some(ref site) = site {
            while j < graph.len()
                && site_of(&graph[j]).as_ref() == Some(site)
                && graph[j].category == op.category
                && graph[j].layer == op.layer
                && graph[j].phase == op.phase
            {
                j += 1;
            }
        }
        if j - i >= 2 {
            let ids: Vec<&str> = graph[i..j].iter().map(|op| op.id.as_str()).collect();
            let fused = fuse_elementwise(&graph[i..j], &ids)
                .expect("maximal same-site runs always form chains");
            out.extend(fused);
        } else {
            out.push(op.clone());
        }
        i = j;
    }
    out
}

// ---------------------------------------------------------------------------
// Fused QKV projections
// ---------------------------------------------------------------------------

/// Merges each layer's three attention input projections into one GEMM per
/// pass, the `qkv_proj` kernel. The three share their non-weight operand, so
/// the merged op reads it once instead of three times: per layer per pass
/// the graph saves exactly `2 · hidden · tokens · bpe` bytes of traffic and
/// two kernel launches. Flops are unchanged.
///
/// Forward and weight-gradient GEMMs grow `m` threefold (stacked weight
/// rows); the activation-gradient GEMM grows `k` threefold (its inputs are
/// the three stacked gradients). Errors if the graph has no unfused
/// projection triple, including when it is already fused.
pub fn fuse_linear_gemms(graph: &[OpDescriptor]) -> Result<Vec<OpDescriptor>, Error> {
    if let Some(op) = graph.iter().find(|op| op.id.ends_with(".qkv_proj")) {
        return Err(Error::AlreadyFused(op.id.clone()));
    }

    let by_id: BTreeMap<&str, &OpDescriptor> =
        graph.iter().map(|op| (op.id.as_str(), op)).collect();
    // q-projection id -> fused replacement; partner ids to drop.
    let mut fused: BTreeMap<String, OpDescriptor> = BTreeMap::new();
    let mut dropped: BTreeSet<String> = BTreeSet::new();
    for op in graph {
        if !op.id.ends_with(".q_proj") {
            continue;
        }
        let (Some(layer), Some(&shape)) = (op.layer, op.gemm()) else {
            continue;
        };
        let pass = match op.phase {
            Phase::Forward => "fwd",
            Phase::BackwardActGrad => "bwdact",
            Phase::BackwardWeightGrad => "bwdwt",
            _ => continue,
        };
        let k_id = format!("L{layer}.{pass}.k_proj");
        let v_id = format!("L{layer}.{pass}.v_proj");
        let partner = |id: &str| by_id.get(id).and_then(|op| op.gemm());
        let (Some(&k_shape), Some(&v_shape)) = (partner(&k_id), partner(&v_id)) else {
            continue;
        };
        if k_shape != shape || v_shape != shape {
            continue;
        }

        let mut fused_shape = shape;
        match op.phase {
            // Stacked weight rows share the one activation operand.
            Phase::Forward | Phase::BackwardWeightGrad => fused_shape.m *= 3,
            // Stacked output gradients share the one input-gradient operand.
            Phase::BackwardActGrad => fused_shape.k *= 3,
            _ => unreachable!(),
        }
        fused.insert(
            op.id.clone(),
            OpDescriptor {
                id: format!("L{layer}.{pass}.qkv_proj"),
                layer: op.layer,
                phase: op.phase,
                category: op.category,
                kind: OpKind::Gemm(fused_shape),
                precision: op.precision,
            },
        );
        dropped.insert(k_id);
        dropped.insert(v_id);
    }
    if fused.is_empty() {
        return Err(Error::AlreadyFused(
            "graph has no separate q/k/v projection GEMMs".to_string(),
        ));
    }

    let mut out = Vec::with_capacity(graph.len());
    for op in graph {
        if dropped.contains(&op.id) {
            continue;
        }
        match fused.get(&op.id) {
            Some(replacement) => out.push(replacement.clone()),
            None => out.push(op.clone()),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gradient-accumulation micro-batching
// ---------------------------------------------------------------------------

/// Splits one iteration into `micro_batches` forward/backward passes at
/// batch `B / micro_batches`, each followed by a gradient-accumulation
/// sweep over every parameter, with a single optimizer pass at the end.
/// Micro-batch ops carry an `mb<j>.` id prefix. The accumulator is held at
/// FP32 in every precision mode. `micro_batches == 1` reproduces the plain
/// iteration exactly.
pub fn apply_microbatching(
    cfg: &ModelConfig,
    micro_batches: u64,
) -> Result<Vec<OpDescriptor>, Error> {
    cfg.validate()?;
    if micro_batches == 0 {
        return Err(Error::InvalidValue {
            key: "micro_batches",
            reason: "must be at least 1".to_string(),
        });
    }
    if micro_batches == 1 {
        return Ok(build_iteration(cfg));
    }
    if !cfg.batch_size.is_multiple_of(micro_batches) {
        return Err(Error::Divisibility {
            left: "batch_size",
            left_value: cfg.batch_size,
            right: "micro_batches",
            right_value: micro_batches,
        });
    }

    let mut micro_cfg = cfg.clone();
    micro_cfg.batch_size = cfg.batch_size / micro_batches;
    let micro = build_iteration(&micro_cfg);
    let full = build_iteration(cfg);
    let params = param_count(cfg).total;

    let mut out = Vec::new();
    for j in 0..micro_batches {
        for op in &micro {
            if op.phase == Phase::Update {
                continue;
            }
            let mut op = op.clone();
            op.id = format!("mb{j}.{}", op.id);
            out.push(op);
        }
        out.push(OpDescriptor {
            id: format!("mb{j}.grad_accum"),
            layer: None,
            phase: Phase::Update,
            category: Category::GradAccumulate,
            kind: OpKind::Elementwise {
                elements: params,
                flops_per_element: FLOPS_GRAD_ACCUM,
                operand_reads: 2,
                operand_writes: 1,
                reduction_passes: 0,
            },
            precision: DType::Fp32,
        });
    }
    out.extend(full.into_iter().filter(|op| op.phase == Phase::Update));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Graph comparison
// ---------------------------------------------------------------------------

/// Aggregate cost of one graph: total flops, memory traffic, serial roofline
/// time, and kernel launches (collectives excluded from the launch count).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct GraphTotals {
    pub flops: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub time_seconds: f64,
    pub kernel_count: u64,
}

/// Variant-minus-baseline change in flops, traffic, and time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct Delta {
    pub flops: i64,
    pub bytes: i64,
    pub time_seconds: f64,
}

/// Side-by-side cost of two graphs on the same hardware, with per-category
/// deltas for drilling into where a transform paid off.
#[derive(Debug, Clone, Serialize)]
pub struct DeltaReport {
    pub baseline: GraphTotals,
    pub variant: GraphTotals,
    pub delta: Delta,
    pub kernel_count_delta: i64,
    pub per_category: BTreeMap<Category, Delta>,
}

fn totals_and_categories(
    graph: &[OpDescriptor],
    hw: &HardwareSpec,
) -> Result<(GraphTotals, BTreeMap<Category, Delta>), Error> {
    let estimates = estimate_graph(graph, hw)?;
    let mut totals = GraphTotals::default();
    let mut cats: BTreeMap<Category, Delta> = BTreeMap::new();
    for (op, est) in graph.iter().zip(&estimates) {
        totals.flops += est.flops;
        totals.bytes_read += est.bytes_read;
        totals.bytes_written += est.bytes_written;
        totals.time_seconds += est.time_seconds;
        totals.kernel_count += 1;
        let slot = cats.entry(op.category).or_default();
        slot.flops += est.flops as i64;
        slot.bytes += (est.bytes_read + est.bytes_written) as i64;
        slot.time_seconds += est.time_seconds;
    }
    Ok((totals, cats))
}

/// Prices `baseline` and `variant` on `hw` and reports variant-minus-baseline
/// deltas, overall and per category. Both graphs must be compute graphs;
/// scheduled collectives are rejected by the cost model.
pub fn compare(
    baseline: &[OpDescriptor],
    variant: &[OpDescriptor],
    hw: &HardwareSpec,
) -> Result<DeltaReport, Error> {
    hw.validate()?;
    let (base, base_cats) = totals_and_categories(baseline, hw)?;
    let (var, var_cats) = totals_and_categories(variant, hw)?;

    let mut per_category: BTreeMap<Category, Delta> = BTreeMap::new();
    let all_keys: BTreeSet<Category> = base_cats.keys().chain(var_cats.keys()).copied().collect();
    for key in all_keys {
        let b = base_cats.get(&key).copied().unwrap_or_default();
        let v = var_cats.get(&key).copied().unwrap_or_default();
        let delta = Delta {
            flops: v.flops - b.flops,
            bytes: v.bytes - b.bytes,
            time_seconds: v.time_seconds - b.time_seconds,
        };
        if delta != Delta::default() {
            per_category.insert(key, delta);
        }
    }

    Ok(DeltaReport {
        baseline: base,
        variant: var,
        delta: Delta {
            flops: var.flops as i64 - base.flops as i64,
            bytes: (var.bytes_read + var.bytes_written) as i64
                - (base.bytes_read + base.bytes_written) as i64,
            time_seconds: var.time_seconds - base.time_seconds,
        },
        kernel_count_delta: var.kernel_count as i64 - base.kernel_count as i64,
        per_category,
    })
}
