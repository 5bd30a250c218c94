//! Multi-device execution: data-parallel gradient exchange, intra-layer
//! model-parallel weight splitting, and the hybrid of both.
//!
//! All communication is ring AllReduce over a flat per-device link with no
//! latency term. Data-parallel gradient events may hide under backward
//! compute of the next-lower layer; model-parallel activation exchanges are
//! serialized with compute.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::{HardwareSpec, ModelConfig, ParallelismConfig, Precision};
use crate::error::Error;
use crate::opgraph::{build_iteration_split, Category, DType, OpDescriptor, OpKind, Phase};
use crate::roofline::{estimate_graph, Bound, CostEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Collective {
    AllReduce,
}

/// One collective exchange, before costing.
///
/// `payload_bytes` is the logical tensor size; the wire volume per device is
/// [`ring_allreduce_bytes`] of it. Gradient events are overlappable,
/// activation events are not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommEvent {
    pub collective: Collective,
    pub payload_bytes: u64,
    pub overlappable: bool,
    /// Transformer layer whose tensors this event carries; `None` for a
    /// whole-model gradient exchange.
    pub anchor_layer: Option<u32>,
}

/// Bytes each device sends (and receives) to AllReduce `payload` bytes over
/// `devices` ring participants: `2·(D−1)/D · payload`. Communication time is
/// this volume divided by the link bandwidth.
pub fn ring_allreduce_bytes(payload: u64, devices: u64) -> Result<f64, Error> {
    if devices == 0 {
        return Err(Error::InvalidValue {
            key: "devices",
            reason: "ring AllReduce needs at least one participant".to_string(),
        });
    }
    Ok(2.0 * (devices - 1) as f64 / devices as f64 * payload as f64)
}

/// One schedule entry: an op (compute or collective), its cost, and how much
/// of its time hides under other work.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduledEvent {
    pub op: OpDescriptor,
    pub cost: CostEstimate,
    /// Seconds of this event's time hidden under concurrent work. Zero for
    /// compute ops and for serialized collectives.
    pub overlapped_seconds: f64,
}

impl ScheduledEvent {
    pub fn exposed_seconds(&self) -> f64 {
        self.cost.time_seconds - self.overlapped_seconds
    }
}

/// An ordered iteration schedule for one device. Total time is the sum of
/// exposed durations; overlap only ever subtracts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduledGraph {
    pub events: Vec<ScheduledEvent>,
}

impl ScheduledGraph {
    /// Costs a compute-only graph into a schedule with no overlap.
    pub fn from_ops(graph: &[OpDescriptor], hw: &HardwareSpec) -> Result<Self, Error> {
        let costs = estimate_graph(graph, hw)?;
        Ok(Self {
            events: graph
                .iter()
                .cloned()
                .zip(costs)
                .map(|(op, cost)| ScheduledEvent {
                    op,
                    cost,
                    overlapped_seconds: 0.0,
                })
                .collect(),
        })
    }

    pub fn total_time(&self) -> f64 {
        self.events
            .iter()
            .map(ScheduledEvent::exposed_seconds)
            .sum()
    }

    /// Cost estimates parallel-indexed to `events`.
    pub fn estimates(&self) -> Vec<CostEstimate> {
        self.events.iter().map(|e| e.cost).collect()
    }

    /// Total time of collective events, before overlap.
    pub fn comm_time(&self) -> f64 {
        self.events
            .iter()
            .filter(|e| matches!(e.op.kind, OpKind::Collective { .. }))
            .map(|e| e.cost.time_seconds)
            .sum()
    }
}

/// Serializes a schedule as one JSON object per line (op, cost, overlap),
/// in execution order, ending in a newline.
pub fn dump_schedule(schedule: &ScheduledGraph) -> String {
    let mut out = String::new();
    for event in &schedule.events {
        out.push_str(&serde_json::to_string(event).expect("event serializes"));
        out.push('\n');
    }
    out
}

fn comm_scheduled_event(
    id: String,
    event: CommEvent,
    devices: u64,
    precision: DType,
    hw: &HardwareSpec,
    overlapped_seconds: f64,
) -> Result<ScheduledEvent, Error> {
    let wire = ring_allreduce_bytes(event.payload_bytes, devices)?;
    let time_seconds = wire / hw.link_bandwidth;
    Ok(ScheduledEvent {
        op: OpDescriptor {
            id,
            layer: event.anchor_layer,
            phase: Phase::Communication,
            category: Category::AllReduce,
            kind: OpKind::Collective {
                payload_bytes: event.payload_bytes,
            },
            precision,
        },
        cost: CostEstimate {
            flops: 0,
            bytes_read: 0,
            bytes_written: 0,
            arithmetic_intensity: 0.0,
            time_seconds,
            // The link is the binding resource for any transfer this model
            // prices; there is no launch or compute term to compete with.
            bound: Bound::Bandwidth,
        },
        overlapped_seconds,
    })
}

fn gradient_dtype(precision: Precision) -> DType {
    match precision {
        Precision::Fp32 => DType::Fp32,
        Precision::Mixed => DType::Fp16,
    }
}

fn activation_dtype(precision: Precision) -> DType {
    gradient_dtype(precision)
}

/// Inserts data-parallel gradient AllReduce events into an existing
/// per-device schedule. Bucket sizes come from the schedule's own optimizer
/// ops, so an already-split hybrid schedule communicates its 1/M share.
fn add_dp_events(
    schedule: ScheduledGraph,
    cfg: &ModelConfig,
    par: &ParallelismConfig,
    hw: &HardwareSpec,
) -> Result<ScheduledGraph, Error> {
    let d = par.data_degree;
    if d <= 1 {
        return Ok(schedule);
    }
    let bpe = gradient_dtype(cfg.precision).bytes();

    // Gradient buckets, one per transformer layer; the embedding bucket
    // rides with layer 0 because both become ready only at the very end of
    // the backward pass.
    let mut bucket_bytes: BTreeMap<u32, u64> = BTreeMap::new();
    for event in &schedule.events {
        if event.op.category == Category::LambStage1 {
            if let OpKind::Elementwise { elements, .. } = event.op.kind {
                *bucket_bytes.entry(event.op.layer.unwrap_or(0)).or_insert(0) += elements * bpe;
            }
        }
    }

    let is_backward =
        |op: &OpDescriptor| matches!(op.phase, Phase::BackwardActGrad | Phase::BackwardWeightGrad);
    // Per-layer backward compute budget available to hide the next bucket;
    // collectives never contribute (they hold the same link).
    let mut bwd_compute: BTreeMap<u32, f64> = BTreeMap::new();
    let mut last_bwd_event: BTreeMap<u32, usize> = BTreeMap::new();
    let mut last_bwd_overall = None;
    for (i, event) in schedule.events.iter().enumerate() {
        if !is_backward(&event.op) {
            continue;
        }
        last_bwd_overall = Some(i);
        if let Some(layer) = event.op.layer {
            last_bwd_event.insert(layer, i);
            if !matches!(event.op.kind, OpKind::Collective { .. }) {
                *bwd_compute.entry(layer).or_insert(0.0) += event.cost.time_seconds;
            }
        }
    }

    let mut events = Vec::with_capacity(schedule.events.len() + bucket_bytes.len());
    for (i, event) in schedule.events.into_iter().enumerate() {
        events.push(event);
        if par.overlap_comm {
            // A layer's bucket launches as soon as its backward finishes and
            // hides under the next layer's backward compute; layer 0 has
            // nothing left to hide under.
            let ready: Vec<u32> = last_bwd_event
                .iter()
                .filter(|&(_, idx)| *idx == i)
                .map(|(layer, _)| *layer)
                .collect();
            for layer in ready {
                let Some(&payload) = bucket_bytes.get(&layer) else {
                    continue;
                };
                let comm = CommEvent {
                    collective: Collective::AllReduce,
                    payload_bytes: payload,
                    overlappable: true,
                    anchor_layer: Some(layer),
                };
                let mut event = comm_scheduled_event(
                    format!("comm.dp.L{layer}"),
                    comm,
                    d,
                    gradient_dtype(cfg.precision),
                    hw,
                    0.0,
                )?;
                if layer > 0 {
                    let budget = bwd_compute.get(&(layer - 1)).copied().unwrap_or(0.0);
                    event.overlapped_seconds = event.cost.time_seconds.min(budget);
                }
                events.push(event);
            }
        } else if last_bwd_overall == Some(i) {
            let payload: u64 = bucket_bytes.values().sum();
            if payload > 0 {
                let comm = CommEvent {
                    collective: Collective::AllReduce,
                    payload_bytes: payload,
                    overlappable: false,
                    anchor_layer: None,
                };
                events.push(comm_scheduled_event(
                    "comm.dp.grads".to_string(),
                    comm,
                    d,
                    gradient_dtype(cfg.precision),
                    hw,
                    0.0,
                )?);
            }
        }
    }
    Ok(ScheduledGraph { events })
}

/// Replicates a per-device graph across `par.data_degree` devices and
/// schedules the per-layer gradient AllReduce.
///
/// Compute ops pass through unchanged (the model is replicated). With
/// `overlap_comm`, each layer's gradient bucket hides under the next layer's
/// backward compute and only the final (layer 0 plus embeddings) bucket is
/// fully exposed; without it, one monolithic exchange of the whole gradient
/// is exposed after the backward pass. Gradients travel at FP16 under mixed
/// precision and FP32 otherwise.
pub fn apply_data_parallel(
    graph: &[OpDescriptor],
    cfg: &ModelConfig,
    par: &ParallelismConfig,
    hw: &HardwareSpec,
) -> Result<ScheduledGraph, Error> {
    let schedule = ScheduledGraph::from_ops(graph, hw)?;
    add_dp_events(schedule, cfg, par, hw)
}

/// Splits the model across `par.model_degree` devices within every layer and
/// schedules the per-layer activation exchanges.
///
/// Returns the per-device dimension view (heads and FF width divided), the
/// per-device compute graph, and the schedule. The split partitions the
/// attention projections by head group and the FC pair by FF columns;
/// dropout/residual/LayerNorm stay replicated at full width. Each layer pays
/// four serialized AllReduces of one full activation tensor
/// (`batch·seq·hidden·bpe`): two forward, two backward.
pub fn apply_model_parallel(
    cfg: &ModelConfig,
    par: &ParallelismConfig,
    hw: &HardwareSpec,
) -> Result<(ModelConfig, Vec<OpDescriptor>, ScheduledGraph), Error> {
    cfg.validate()?;
    hw.validate()?;
    par.validate(cfg)?;

    let m = par.model_degree;
    let graph = build_iteration_split(cfg, m);
    let view = ModelConfig {
        num_heads: cfg.num_heads / m,
        intermediate_dim: cfg.intermediate_dim / m,
        ..cfg.clone()
    };
    let schedule = ScheduledGraph::from_ops(&graph, hw)?;
    if m == 1 {
        return Ok((view, graph, schedule));
    }

    let dtype = activation_dtype(cfg.precision);
    let payload = cfg.batch_size * cfg.seq_len * cfg.hidden_dim * dtype.bytes();
    // The four per-layer exchange points: after the attention output
    // projection and after FC2 going forward, after the FC1 and query/key/
    // value input-gradient GEMMs going backward.
    let anchors = ["fwd.out_proj", "fwd.fc2", "bwdact.fc1", "bwdwt.v_proj"];

    let mut events = Vec::with_capacity(schedule.events.len() + 4 * cfg.num_layers as usize);
    for event in schedule.events {
        let op_id = event.op.id.clone();
        let layer = event.op.layer;
        events.push(event);
        let Some(layer) = layer else { continue };
        for (slot, anchor) in anchors.iter().enumerate() {
            if op_id == format!("L{layer}.{anchor}") {
                let comm = CommEvent {
                    collective: Collective::AllReduce,
                    payload_bytes: payload,
                    overlappable: false,
                    anchor_layer: Some(layer),
                };
                events.push(comm_scheduled_event(
                    format!("L{layer}.comm.mp{}", slot + 1),
                    comm,
                    m,
                    dtype,
                    hw,
                    0.0,
                )?);
            }
        }
    }
    Ok((view, graph, ScheduledGraph { events }))
}

/// Full layout: `model_degree`-way split within each replica group,
/// `data_degree` replica groups exchanging gradients.
///
/// `cfg.batch_size` is the global mini-batch; each replica runs
/// `batch_size / data_degree` and must divide evenly. The data-parallel
/// events carry the per-device (1/M) gradient share and follow the same
/// overlap rule as pure data parallelism.
pub fn apply_hybrid(
    cfg: &ModelConfig,
    par: &ParallelismConfig,
    hw: &HardwareSpec,
) -> Result<ScheduledGraph, Error> {
    let d = par.data_degree;
    if d == 0 {
        return Err(Error::InvalidValue {
            key: "data_degree",
            reason: "must be at least 1".to_string(),
        });
    }
    if !cfg.batch_size.is_multiple_of(d) {
        return Err(Error::Divisibility {
            left: "batch_size",
            right: "data_degree",
            left_value: cfg.batch_size,
            right_value: d,
        });
    }
    let per_device = ModelConfig {
        batch_size: cfg.batch_size / d,
        ..cfg.clone()
    };
    let (_, _, schedule) = apply_model_parallel(&per_device, par, hw)?;
    add_dp_events(schedule, &per_device, par, hw)
}

// =============================================================================
// Tests
// =============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opgraph::build_iteration;

    fn phase1() -> ModelConfig {
        ModelConfig::preset("bert_large_phase1").unwrap()
    }

    fn hw() -> HardwareSpec {
        HardwareSpec::default()
    }

    fn par(d: u64, m: u64, overlap: bool) -> ParallelismConfig {
        ParallelismConfig {
            data_degree: d,
            model_degree: m,
            overlap_comm: overlap,
            micro_batches: 1,
        }
    }

    #[test]
    fn ring_volume_formula() {
        assert_eq!(ring_allreduce_bytes(1 << 20, 1).unwrap(), 0.0);
        assert_eq!(ring_allreduce_bytes(1 << 20, 2).unwrap(), (1 << 20) as f64);
        assert_eq!(
            ring_allreduce_bytes(1 << 20, 64).unwrap(),
            1.96875 * (1 << 20) as f64
        );
        assert!(ring_allreduce_bytes(1, 0).is_err());
    }

    /// Step-by-step ring simulation: reduce-scatter then all-gather over a
    /// ring of `d` devices, tracking what every device sends and checking
    /// the reduced values are actually correct.
    fn simulate_ring(d: usize) -> f64 {
        // Device i starts with value (i+1) in every chunk; the reduced value
        // of each chunk must come out d·(d+1)/2.
        let mut data: Vec<Vec<f64>> = (1..=d).map(|v| vec![v as f64; d]).collect();
        let mut chunks_sent = vec![0u64; d];
        let expected: f64 = (d * (d + 1) / 2) as f64;

        // Reduce-scatter: at step s, device i sends chunk (i - s) mod d to
        // its right neighbor, which accumulates.
        for s in 0..d - 1 {
            let snapshot = data.clone();
            for i in 0..d {
                let chunk = (i + d - (s % d)) % d;
                let next = (i + 1) % d;
                data[next][chunk] += snapshot[i][chunk];
                chunks_sent[i] += 1;
            }
        }
        // Device i now owns the fully reduced chunk (i + 1) mod d.
        for i in 0..d {
            assert_eq!(data[i][(i + 1) % d], expected, "device {i} reduction");
        }
        // All-gather: at step s, device i forwards chunk (i + 1 - s) mod d.
        for s in 0..d - 1 {
            let snapshot = data.clone();
            for i in 0..d {
                let chunk = (i + 1 + d - (s % d)) % d;
                let next = (i + 1) % d;
                data[next][chunk] = snapshot[i][chunk];
                chunks_sent[i] += 1;
            }
        }
        for (i, device) in data.iter().enumerate() {
            for (c, value) in device.iter().enumerate() {
                assert_eq!(*value, expected, "device {i} chunk {c}");
            }
        }
        assert!(chunks_sent.iter().all(|&n| n == chunks_sent[0]));
        // Bytes per device for a payload of `d` chunks of size payload/d.
        chunks_sent[0] as f64 / d as f64
    }

    #[test]
    fn ring_formula_matches_step_simulation() {
        for d in [2u64, 3, 4, 8] {
            let payload = 1 << 12;
            let per_unit = simulate_ring(d as usize);
            let simulated = per_unit * payload as f64;
            let formula = ring_allreduce_bytes(payload, d).unwrap();
            assert!(
                (simulated - formula).abs() < 1e-9,
                "d={d}: simulated {simulated}, formula {formula}"
            );
        }
    }

    #[test]
    fn single_replica_is_the_identity() {
        let cfg = phase1();
        let graph = build_iteration(&cfg);
        let schedule = apply_data_parallel(&graph, &cfg, &par(1, 1, true), &hw()).unwrap();
        let baseline = ScheduledGraph::from_ops(&graph, &hw()).unwrap();
        assert_eq!(schedule, baseline);
        assert_eq!(schedule.comm_time(), 0.0);
    }

    #[test]
    fn overlap_hides_all_but_the_final_bucket() {
        let cfg = phase1();
        let graph = build_iteration(&cfg);
        let schedule = apply_data_parallel(&graph, &cfg, &par(64, 1, true), &hw()).unwrap();
        let baseline = ScheduledGraph::from_ops(&graph, &hw()).unwrap();

        let comm: Vec<&ScheduledEvent> = schedule
            .events
            .iter()
            .filter(|e| matches!(e.op.kind, OpKind::Collective { .. }))
            .collect();
        assert_eq!(comm.len(), cfg.num_layers as usize);

        // On this hardware every per-layer bucket fits under the next
        // layer's backward compute, so only layer 0's bucket is exposed.
        let mut exposed_total = 0.0;
        for event in &comm {
            if event.op.layer == Some(0) {
                assert_eq!(event.overlapped_seconds, 0.0);
                exposed_total += event.cost.time_seconds;
            } else {
                assert!(
                    (event.overlapped_seconds - event.cost.time_seconds).abs() < 1e-15,
                    "{} not fully hidden",
                    event.op.id
                );
            }
        }
        let expect = baseline.total_time() + exposed_total;
        assert!((schedule.total_time() - expect).abs() < 1e-12);

        // Layer 0 carries the embeddings on top of its own parameters.
        let layer0 = comm.iter().find(|e| e.op.layer == Some(0)).unwrap();
        let params = crate::config::param_count(&cfg);
        let expect_payload = (params.per_transformer_layer + params.embeddings) * 4;
        assert_eq!(
            layer0.op.kind,
            OpKind::Collective {
                payload_bytes: expect_payload
            }
        );
    }

    #[test]
    fn no_overlap_is_one_monolithic_exchange() {
        let cfg = phase1();
        let graph = build_iteration(&cfg);
        let schedule = apply_data_parallel(&graph, &cfg, &par(64, 1, false), &hw()).unwrap();

        let comm: Vec<&ScheduledEvent> = schedule
            .events
            .iter()
            .filter(|e| matches!(e.op.kind, OpKind::Collective { .. }))
            .collect();
        assert_eq!(comm.len(), 1);
        let params = crate::config::param_count(&cfg);
        assert_eq!(
            comm[0].op.kind,
            OpKind::Collective {
                payload_bytes: params.total * 4
            }
        );
        assert_eq!(comm[0].overlapped_seconds, 0.0);

        let expect_time = ring_allreduce_bytes(params.total * 4, 64).unwrap() / hw().link_bandwidth;
        assert!((comm[0].cost.time_seconds - expect_time).abs() < 1e-12);

        // The exchange lands after the last backward op and before updates.
        let idx = schedule
            .events
            .iter()
            .position(|e| e.op.id == "comm.dp.grads")
            .unwrap();
        assert!(schedule.events[..idx]
            .iter()
            .any(|e| matches!(e.op.phase, Phase::BackwardActGrad)));
        assert!(schedule.events[idx..].iter().all(|e| !matches!(
            e.op.phase,
            Phase::BackwardActGrad | Phase::BackwardWeightGrad
        )));
        let comm_fraction = schedule.comm_time() / schedule.total_time();
        assert!(comm_fraction > 0.05, "{comm_fraction}");
    }

    #[test]
    fn overlap_never_increases_total_time() {
        let cfg = phase1();
        let graph = build_iteration(&cfg);
        for d in [2, 8, 64, 256] {
            let with = apply_data_parallel(&graph, &cfg, &par(d, 1, true), &hw()).unwrap();
            let without = apply_data_parallel(&graph, &cfg, &par(d, 1, false), &hw()).unwrap();
            assert!(
                with.total_time() <= without.total_time() + 1e-15,
                "d={d}: {} vs {}",
                with.total_time(),
                without.total_time()
            );
        }
    }

    #[test]
    fn mixed_precision_halves_gradient_payload() {
        let fp32_cfg = phase1();
        let mixed_cfg = ModelConfig {
            precision: Precision::Mixed,
            ..phase1()
        };
        let payload_of = |cfg: &ModelConfig| {
            let graph = build_iteration(cfg);
            let schedule = apply_data_parallel(&graph, cfg, &par(8, 1, false), &hw()).unwrap();
            schedule
                .events
                .iter()
                .find_map(|e| match e.op.kind {
                    OpKind::Collective { payload_bytes } => Some(payload_bytes),
                    _ => None,
                })
                .unwrap()
        };
        assert_eq!(payload_of(&fp32_cfg), 2 * payload_of(&mixed_cfg));
    }

    #[test]
    fn model_parallel_identity_at_degree_one() {
        let cfg = phase1();
        let (view, graph, schedule) = apply_model_parallel(&cfg, &par(1, 1, true), &hw()).unwrap();
        assert_eq!(view, cfg);
        assert_eq!(graph, build_iteration(&cfg));
        assert_eq!(schedule.comm_time(), 0.0);
    }

    #[test]
    fn two_way_split_matches_published_fixture() {
        // Per-device batch 16 with a 2-way split: FC1 becomes
        // (2048, 2048, 1024) and 24 layers pay 96 serialized exchanges.
        let cfg = ModelConfig {
            batch_size: 16,
            ..phase1()
        };
        let (view, graph, schedule) = apply_model_parallel(&cfg, &par(1, 2, true), &hw()).unwrap();
        assert_eq!(view.num_heads, 8);
        assert_eq!(view.intermediate_dim, 2048);
        assert_eq!(view.hidden_dim, 1024);

        let fc1 = graph
            .iter()
            .find(|op| op.id == "L0.fwd.fc1")
            .and_then(OpDescriptor::gemm)
            .unwrap();
        assert_eq!((fc1.m, fc1.n, fc1.k), (2048, 2048, 1024));

        let comm: Vec<&ScheduledEvent> = schedule
            .events
            .iter()
            .filter(|e| matches!(e.op.kind, OpKind::Collective { .. }))
            .collect();
        assert_eq!(comm.len(), 96);
        let payload = 16 * 128 * 1024 * 4;
        for event in &comm {
            assert_eq!(
                event.op.kind,
                OpKind::Collective {
                    payload_bytes: payload
                }
            );
            assert_eq!(event.overlapped_seconds, 0.0);
            let expect = ring_allreduce_bytes(payload, 2).unwrap() / hw().link_bandwidth;
            assert!((event.cost.time_seconds - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn wider_splits_spend_relatively_more_time_communicating() {
        let small = ModelConfig {
            batch_size: 16,
            ..phase1()
        };
        let large = ModelConfig {
            batch_size: 64,
            ..phase1()
        };
        let fraction = |cfg: &ModelConfig, m: u64| {
            let (_, _, schedule) = apply_model_parallel(cfg, &par(1, m, true), &hw()).unwrap();
            schedule.comm_time() / schedule.total_time()
        };
        let at_m2 = fraction(&small, 2);
        let at_m8 = fraction(&large, 8);
        assert!(
            at_m8 > at_m2,
            "M=8 fraction {at_m8} vs M=2 fraction {at_m2}"
        );
        assert!(at_m2 > 0.0);
    }

    #[test]
    fn split_flops_account_for_replicated_norm_sites() {
        let cfg = phase1();
        let hwspec = hw();
        let fwd_bwd_flops = |schedule: &ScheduledGraph| -> u64 {
            schedule
                .events
                .iter()
                .filter(|e| {
                    matches!(
                        e.op.phase,
                        Phase::Forward | Phase::BackwardActGrad | Phase::BackwardWeightGrad
                    )
                })
                .map(|e| e.cost.flops)
                .sum()
        };
        let single = ScheduledGraph::from_ops(&build_iteration(&cfg), &hwspec).unwrap();
        let single_flops = fwd_bwd_flops(&single);

        for m in [2u64, 4, 8] {
            let (_, _, split) = apply_model_parallel(&cfg, &par(1, m, true), &hwspec).unwrap();
            let across_devices = m * fwd_bwd_flops(&split);
            // Every op divides by M except the two dropout/residual/norm
            // sites, which each cost 8 flops per element, forward and
            // backward, on every device.
            let drln_per_device: u64 =
                4 * 8 * cfg.num_layers * cfg.batch_size * cfg.seq_len * cfg.hidden_dim;
            assert_eq!(
                across_devices - single_flops,
                (m - 1) * drln_per_device,
                "m={m}"
            );
        }
    }

    #[test]
    fn optimizer_work_partitions_across_the_split() {
        let cfg = phase1();
        let lamb_elements = |graph: &[OpDescriptor]| -> u64 {
            graph
                .iter()
                .filter(|op| op.category == Category::LambStage1)
                .map(|op| match op.kind {
                    OpKind::Elementwise { elements, .. } => elements,
                    _ => 0,
                })
                .sum()
        };
        let whole = lamb_elements(&build_iteration(&cfg));
        for m in [2u64, 4, 8] {
            let (_, graph, _) = apply_model_parallel(&cfg, &par(1, m, true), &hw()).unwrap();
            assert_eq!(lamb_elements(&graph), whole / m, "m={m}");
        }

        // Partitioned elements mean partitioned modeled update time.
        let update_time = |m: u64| {
            let (_, _, schedule) = apply_model_parallel(&cfg, &par(1, m, true), &hw()).unwrap();
            schedule
                .events
                .iter()
                .filter(|e| e.op.phase == Phase::Update)
                .map(ScheduledEvent::exposed_seconds)
                .sum::<f64>()
        };
        assert!(update_time(2) < 0.6 * update_time(1));
    }

    #[test]
    fn hybrid_divides_the_global_batch() {
        let cfg = ModelConfig {
            batch_size: 1024,
            ..phase1()
        };
        let schedule = apply_hybrid(&cfg, &par(64, 2, true), &hw()).unwrap();
        // Per-device batch 16: FC1 shape matches the 2-way fixture.
        let fc1 = schedule
            .events
            .iter()
            .find(|e| e.op.id == "L0.fwd.fc1")
            .and_then(|e| e.op.gemm())
            .unwrap();
        assert_eq!((fc1.m, fc1.n, fc1.k), (2048, 2048, 1024));

        // Both kinds of exchange are present: 96 serialized plus 24 buckets.
        let comm_count = schedule
            .events
            .iter()
            .filter(|e| matches!(e.op.kind, OpKind::Collective { .. }))
            .count();
        assert_eq!(comm_count, 96 + 24);

        // Gradient buckets carry the per-device half of each layer.
        let params = crate::config::param_count(&cfg);
        let bucket = schedule
            .events
            .iter()
            .find(|e| e.op.id == "comm.dp.L5")
            .unwrap();
        assert_eq!(
            bucket.op.kind,
            OpKind::Collective {
                payload_bytes: params.per_transformer_layer / 2 * 4
            }
        );
    }

    #[test]
    fn hybrid_degenerate_cases_compose() {
        let cfg = phase1();
        let single = apply_hybrid(&cfg, &par(1, 1, true), &hw()).unwrap();
        let baseline = ScheduledGraph::from_ops(&build_iteration(&cfg), &hw()).unwrap();
        assert_eq!(single, baseline);

        let mp_only = apply_hybrid(&cfg, &par(1, 2, true), &hw()).unwrap();
        let (_, _, direct) = apply_model_parallel(&cfg, &par(1, 2, true), &hw()).unwrap();
        assert_eq!(mp_only, direct);
    }

    #[test]
    fn hybrid_rejects_indivisible_batch() {
        let cfg = ModelConfig {
            batch_size: 1000,
            ..phase1()
        };
        let err = apply_hybrid(&cfg, &par(64, 1, true), &hw()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("batch_size") && msg.contains("data_degree"),
            "{msg}"
        );
    }

    #[test]
    fn replication_multiplies_aggregate_compute() {
        // Data parallelism replicates every compute op, so aggregate flops
        // are exactly device-count times the per-device figure.
        let cfg = phase1();
        let graph = build_iteration(&cfg);
        let schedule = apply_data_parallel(&graph, &cfg, &par(8, 1, true), &hw()).unwrap();
        let per_device: u64 = schedule.events.iter().map(|e| e.cost.flops).sum();
        let single: u64 = ScheduledGraph::from_ops(&graph, &hw())
            .unwrap()
            .events
            .iter()
            .map(|e| e.cost.flops)
            .sum();
        assert_eq!(per_device, single);
        assert_eq!(8 * per_device, 8 * single);
    }

    #[test]
    fn schedule_dump_is_json_lines() {
        let cfg = ModelConfig {
            num_layers: 2,
            ..phase1()
        };
        let graph = build_iteration(&cfg);
        let schedule = apply_data_parallel(&graph, &cfg, &par(4, 1, true), &hw()).unwrap();
        let text = dump_schedule(&schedule);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), schedule.events.len());
        for line in lines {
            let value: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(value.get("op").is_some());
            assert!(value.get("cost").is_some());
            assert!(value.get("overlapped_seconds").is_some());
        }
    }
}
