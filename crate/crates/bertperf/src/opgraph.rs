//! Enumeration of every operation in one training iteration.
//!
//! [`build_iteration`] lists the forward pass, the backward pass, and the
//! two-stage optimizer update of a single device as flat [`OpDescriptor`]
//! records. GEMM shapes come from [`gemm_dims`]; everything else is an
//! elementwise or reduction op with explicit operand counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{param_count, ModelConfig, Precision};
use crate::error::Error;

/// Storage type of one op's operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "FP32")]
    Fp32,
    #[serde(rename = "FP16")]
    Fp16,
}

impl DType {
    pub fn bytes(self) -> u64 {
        match self {
            DType::Fp32 => 4,
            DType::Fp16 => 2,
        }
    }
}

/// One (possibly batched) matrix multiply: `batch` independent products of
/// an `m x k` by a `k x n` operand. `batch == 1` for plain GEMMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub batch: u64,
    pub trans_a: bool,
    pub trans_b: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Forward,
    BackwardActGrad,
    BackwardWeightGrad,
    Update,
    Communication,
}

/// Cost-reporting bucket. Forward and backward ops of the same site share a
/// category; the report module groups categories further.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "LinearTransformGEMM")]
    LinearTransformGemm,
    #[serde(rename = "AttentionBGEMM")]
    AttentionBGemm,
    AttnScaleMaskSoftmaxDropout,
    #[serde(rename = "FCGEMM")]
    FcGemm,
    #[serde(rename = "GeLU")]
    Gelu,
    DropResidualLayerNorm,
    Embedding,
    OutputLayer,
    LambStage1,
    LambStage2,
    GlobalGradNorm,
    AllReduce,
    GradAccumulate,
}

/// What an op does, in roofline terms.
///
/// `Elementwise` covers fused groups too: `operand_reads`/`operand_writes`
/// count whole-tensor passes over `elements`, and `reduction_passes` counts
/// extra read sweeps a reduction inside the group costs (softmax, LayerNorm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum OpKind {
    #[serde(rename = "GEMM")]
    Gemm(GemmShape),
    Elementwise {
        elements: u64,
        flops_per_element: u64,
        operand_reads: u64,
        operand_writes: u64,
        reduction_passes: u64,
    },
    Reduction {
        elements: u64,
        passes: u64,
    },
    Collective {
        payload_bytes: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpDescriptor {
    /// Stable identifier, `<scope>.<pass>.<site>`, e.g. `L3.fwd.fc1`.
    pub id: String,
    /// Transformer layer index; `None` for embedding, output, and global ops.
    pub layer: Option<u32>,
    pub phase: Phase,
    pub category: Category,
    pub kind: OpKind,
    pub precision: DType,
}

impl OpDescriptor {
    pub fn gemm(&self) -> Option<&GemmShape> {
        match &self.kind {
            OpKind::Gemm(shape) => Some(shape),
            _ => None,
        }
    }
}

/// GEMM sites of one transformer layer. `LinearTrans` covers all four
/// attention projections (Q, K, V, output); they share one shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GemmSite {
    LinearTrans,
    AttnScore,
    AttnOutput,
    Fc1,
    Fc2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GemmPass {
    Fwd,
    BwdActGrad,
    BwdWtGrad,
}

// Per-element flop charges. Order-of-magnitude constants; every elementwise
// op sits far below machine balance regardless of the exact figure.
pub(crate) const FLOPS_ELEMWISE: u64 = 1; // add, mul, scale, dropout, residual
pub(crate) const FLOPS_SOFTMAX: u64 = 5;
pub(crate) const FLOPS_GELU: u64 = 10; // tanh approximation
pub(crate) const FLOPS_LAYERNORM: u64 = 6;
pub(crate) const FLOPS_ATTN_GROUP: u64 =
    FLOPS_ELEMWISE + FLOPS_ELEMWISE + FLOPS_SOFTMAX + FLOPS_ELEMWISE;
pub(crate) const FLOPS_DRLN_GROUP: u64 = FLOPS_ELEMWISE + FLOPS_ELEMWISE + FLOPS_LAYERNORM;
pub(crate) const FLOPS_LAMB_STAGE1: u64 = 10;
pub(crate) const FLOPS_LAMB_STAGE2: u64 = 2;
pub(crate) const FLOPS_GRAD_ACCUM: u64 = 2; // scale + add

/// GEMM dimensions for one site and pass.
///
/// The table below is the whole contract; `d = hidden_dim`,
/// `f = intermediate_dim`, `t = seq_len * batch_size`, `s = seq_len`,
/// `hd = hidden_dim / num_heads`, `bh = batch_size * num_heads`.
///
/// ```text
/// site         fwd                bwd act-grad       bwd weight-grad
/// LinearTrans  (d,  t, d)         (d,  t, d)         (d,  d, t)
/// AttnScore    (s,  s, hd) x bh   (s, hd, s)  x bh   (hd, s, s)  x bh
/// AttnOutput   (hd, s, s)  x bh   (hd, s, s)  x bh   (s,  s, hd) x bh
/// Fc1          (f,  t, d)         (d,  t, f)         (d,  f, t)
/// Fc2          (d,  t, f)         (f,  t, d)         (f,  d, t)
/// ```
///
/// Backward act-grad GEMMs transpose the weight operand, backward
/// weight-grad GEMMs transpose the activation operand.
pub fn gemm_dims(site: GemmSite, pass: GemmPass, cfg: &ModelConfig) -> GemmShape {
    let d = cfg.hidden_dim;
    let f = cfg.intermediate_dim;
    let t = cfg.tokens();
    let s = cfg.seq_len;
    let hd = cfg.head_dim();
    let bh = cfg.batch_size * cfg.num_heads;

    let (m, n, k, batch) = match (site, pass) {
        (GemmSite::LinearTrans, GemmPass::Fwd) => (d, t, d, 1),
        (GemmSite::LinearTrans, GemmPass::BwdActGrad) => (d, t, d, 1),
        (GemmSite::LinearTrans, GemmPass::BwdWtGrad) => (d, d, t, 1),
        (GemmSite::AttnScore, GemmPass::Fwd) => (s, s, hd, bh),
        (GemmSite::AttnScore, GemmPass::BwdActGrad) => (s, hd, s, bh),
        (GemmSite::AttnScore, GemmPass::BwdWtGrad) => (hd, s, s, bh),
        (GemmSite::AttnOutput, GemmPass::Fwd) => (hd, s, s, bh),
        (GemmSite::AttnOutput, GemmPass::BwdActGrad) => (hd, s, s, bh),
        (GemmSite::AttnOutput, GemmPass::BwdWtGrad) => (s, s, hd, bh),
        (GemmSite::Fc1, GemmPass::Fwd) => (f, t, d, 1),
        (GemmSite::Fc1, GemmPass::BwdActGrad) => (d, t, f, 1),
        (GemmSite::Fc1, GemmPass::BwdWtGrad) => (d, f, t, 1),
        (GemmSite::Fc2, GemmPass::Fwd) => (d, t, f, 1),
        (GemmSite::Fc2, GemmPass::BwdActGrad) => (f, t, d, 1),
        (GemmSite::Fc2, GemmPass::BwdWtGrad) => (f, d, t, 1),
    };
    let (trans_a, trans_b) = match pass {
        GemmPass::Fwd => (false, false),
        GemmPass::BwdActGrad => (true, false),
        GemmPass::BwdWtGrad => (false, true),
    };
    GemmShape {
        m,
        n,
        k,
        batch,
        trans_a,
        trans_b,
    }
}

/// Per-layer element counts of the non-GEMM transformer ops:
/// attention scores (`batch * heads * seq^2`), GeLU
/// (`batch * seq * intermediate_dim`), and each of the two
/// dropout+residual+LayerNorm sites (`batch * seq * hidden_dim`).
pub fn nongemm_element_counts(cfg: &ModelConfig) -> BTreeMap<Category, u64> {
    let mut map = BTreeMap::new();
    map.insert(
        Category::AttnScaleMaskSoftmaxDropout,
        cfg.batch_size * cfg.num_heads * cfg.seq_len * cfg.seq_len,
    );
    map.insert(
        Category::Gelu,
        cfg.batch_size * cfg.seq_len * cfg.intermediate_dim,
    );
    map.insert(
        Category::DropResidualLayerNorm,
        cfg.batch_size * cfg.seq_len * cfg.hidden_dim,
    );
    map
}

fn op_dtype(precision: Precision, optimizer_op: bool) -> DType {
    // Mixed mode keeps the optimizer (and its gradient-norm reduction) in
    // FP32; everything else drops to FP16.
    match (precision, optimizer_op) {
        (Precision::Mixed, false) => DType::Fp16,
        _ => DType::Fp32,
    }
}

struct GraphBuilder {
    ops: Vec<OpDescriptor>,
    dtype: DType,
}

impl GraphBuilder {
    fn gemm(
        &mut self,
        id: String,
        layer: u32,
        pass: GemmPass,
        category: Category,
        shape: GemmShape,
    ) {
        let phase = match pass {
            GemmPass::Fwd => Phase::Forward,
            GemmPass::BwdActGrad => Phase::BackwardActGrad,
            GemmPass::BwdWtGrad => Phase::BackwardWeightGrad,
        };
        self.ops.push(OpDescriptor {
            id,
            layer: Some(layer),
            phase,
            category,
            kind: OpKind::Gemm(shape),
            precision: self.dtype,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn elementwise(
        &mut self,
        id: String,
        layer: Option<u32>,
        phase: Phase,
        category: Category,
        elements: u64,
        flops_per_element: u64,
        operand_reads: u64,
        operand_writes: u64,
        reduction_passes: u64,
        precision: DType,
    ) {
        self.ops.push(OpDescriptor {
            id,
            layer,
            phase,
            category,
            kind: OpKind::Elementwise {
                elements,
                flops_per_element,
                operand_reads,
                operand_writes,
                reduction_passes,
            },
            precision,
        });
    }
}

/// Every op of one single-device training iteration, in execution order:
/// embedding, forward layers 0..N, output layer, backward layers N-1..0,
/// then the optimizer update with its global gradient-norm reduction first.
pub fn build_iteration(cfg: &ModelConfig) -> Vec<OpDescriptor> {
    build_iteration_split(cfg, 1)
}

/// The same enumeration with every weight shard, head group, and optimizer
/// bucket divided across `model_degree` devices. `model_degree` must divide
/// `num_heads` and `intermediate_dim`; 1 reproduces [`build_iteration`].
///
/// The split follows the usual intra-layer scheme: Q/K/V projections and FC1
/// are output-partitioned, the attention output projection and FC2 are
/// input-partitioned, and dropout/residual/LayerNorm stay replicated at full
/// size.
pub(crate) fn build_iteration_split(cfg: &ModelConfig, model_degree: u64) -> Vec<OpDescriptor> {
    let m = model_degree;
    let d = cfg.hidden_dim;
    let f = cfg.intermediate_dim;
    let t = cfg.tokens();
    let s = cfg.seq_len;
    let hd = cfg.head_dim();
    let bh = cfg.batch_size * cfg.num_heads / m;
    let flags = |pass: GemmPass| match pass {
        GemmPass::Fwd => (false, false),
        GemmPass::BwdActGrad => (true, false),
        GemmPass::BwdWtGrad => (false, true),
    };
    let shape = |m_dim: u64, n_dim: u64, k_dim: u64, batch: u64, pass: GemmPass| {
        let (trans_a, trans_b) = flags(pass);
        GemmShape {
            m: m_dim,
            n: n_dim,
            k: k_dim,
            batch,
            trans_a,
            trans_b,
        }
    };

    // Output-partitioned projection (Q, K, V): the weight shard is (d/m) x d.
    let qkv_dims = |pass: GemmPass| match pass {
        GemmPass::Fwd => shape(d / m, t, d, 1, pass),
        GemmPass::BwdActGrad => shape(d, t, d / m, 1, pass),
        GemmPass::BwdWtGrad => shape(d / m, d, t, 1, pass),
    };
    // Input-partitioned attention output projection: weight shard d x (d/m).
    let outp_dims = |pass: GemmPass| match pass {
        GemmPass::Fwd => shape(d, t, d / m, 1, pass),
        GemmPass::BwdActGrad => shape(d / m, t, d, 1, pass),
        GemmPass::BwdWtGrad => shape(d, d / m, t, 1, pass),
    };
    let score_dims = |pass: GemmPass| match pass {
        GemmPass::Fwd => shape(s, s, hd, bh, pass),
        GemmPass::BwdActGrad => shape(s, hd, s, bh, pass),
        GemmPass::BwdWtGrad => shape(hd, s, s, bh, pass),
    };
    let attnout_dims = |pass: GemmPass| match pass {
        GemmPass::Fwd => shape(hd, s, s, bh, pass),
        GemmPass::BwdActGrad => shape(hd, s, s, bh, pass),
        GemmPass::BwdWtGrad => shape(s, s, hd, bh, pass),
    };
    // Output-partitioned FC1, input-partitioned FC2.
    let fc1_dims = |pass: GemmPass| match pass {
        GemmPass::Fwd => shape(f / m, t, d, 1, pass),
        GemmPass::BwdActGrad => shape(d, t, f / m, 1, pass),
        GemmPass::BwdWtGrad => shape(d, f / m, t, 1, pass),
    };
    let fc2_dims = |pass: GemmPass| match pass {
        GemmPass::Fwd => shape(d, t, f / m, 1, pass),
        GemmPass::BwdActGrad => shape(f / m, t, d, 1, pass),
        GemmPass::BwdWtGrad => shape(f / m, d, t, 1, pass),
    };

    let attn_elems = cfg.batch_size * (cfg.num_heads / m) * s * s;
    let gelu_elems = cfg.batch_size * s * (f / m);
    let drln_elems = cfg.batch_size * s * d; // replicated, never split

    let params = param_count(cfg);
    let layer_params = params.per_transformer_layer / m;
    let embed_params = params.embeddings / m;
    let total_params = params.total / m;

    let act = op_dtype(cfg.precision, false);
    let opt = op_dtype(cfg.precision, true);
    let mut b = GraphBuilder {
        ops: Vec::new(),
        dtype: act,
    };

    // Embedding lookup: table reads, no modeled arithmetic.
    b.elementwise(
        "embed.fwd".into(),
        None,
        Phase::Forward,
        Category::Embedding,
        0,
        0,
        0,
        0,
        0,
        act,
    );

    for i in 0..cfg.num_layers as u32 {
        let id = |pass: &str, site: &str| format!("L{i}.{pass}.{site}");

        // Forward.
        b.gemm(
            id("fwd", "q_proj"),
            i,
            GemmPass::Fwd,
            Category::LinearTransformGemm,
            qkv_dims(GemmPass::Fwd),
        );
        b.gemm(
            id("fwd", "k_proj"),
            i,
            GemmPass::Fwd,
            Category::LinearTransformGemm,
            qkv_dims(GemmPass::Fwd),
        );
        b.gemm(
            id("fwd", "v_proj"),
            i,
            GemmPass::Fwd,
            Category::LinearTransformGemm,
            qkv_dims(GemmPass::Fwd),
        );
        b.gemm(
            id("fwd", "attn_score"),
            i,
            GemmPass::Fwd,
            Category::AttentionBGemm,
            score_dims(GemmPass::Fwd),
        );
        // scale + mask + softmax + dropout in one sweep: input and mask read,
        // output written, plus one reduction pass for the softmax sums.
        b.elementwise(
            id("fwd", "attn_smsd"),
            Some(i),
            Phase::Forward,
            Category::AttnScaleMaskSoftmaxDropout,
            attn_elems,
            FLOPS_ATTN_GROUP,
            2,
            1,
            1,
            act,
        );
        b.gemm(
            id("fwd", "attn_output"),
            i,
            GemmPass::Fwd,
            Category::AttentionBGemm,
            attnout_dims(GemmPass::Fwd),
        );
        b.gemm(
            id("fwd", "out_proj"),
            i,
            GemmPass::Fwd,
            Category::LinearTransformGemm,
            outp_dims(GemmPass::Fwd),
        );
        // dropout + residual add + LayerNorm: activation and residual read,
        // output written, one reduction pass for the norm statistics.
        b.elementwise(
            id("fwd", "attn_drln"),
            Some(i),
            Phase::Forward,
            Category::DropResidualLayerNorm,
            drln_elems,
            FLOPS_DRLN_GROUP,
            2,
            1,
            1,
            act,
        );
        b.gemm(
            id("fwd", "fc1"),
            i,
            GemmPass::Fwd,
            Category::FcGemm,
            fc1_dims(GemmPass::Fwd),
        );
        b.elementwise(
            id("fwd", "gelu"),
            Some(i),
            Phase::Forward,
            Category::Gelu,
            gelu_elems,
            FLOPS_GELU,
            1,
            1,
            0,
            act,
        );
        b.gemm(
            id("fwd", "fc2"),
            i,
            GemmPass::Fwd,
            Category::FcGemm,
            fc2_dims(GemmPass::Fwd),
        );
        b.elementwise(
            id("fwd", "fc_drln"),
            Some(i),
            Phase::Forward,
            Category::DropResidualLayerNorm,
            drln_elems,
            FLOPS_DRLN_GROUP,
            2,
            1,
            1,
            act,
        );
    }

    // Output layer placeholder: parameters live in the embedding tables and
    // the loss head is out of scope, so no modeled arithmetic.
    b.elementwise(
        "output.fwd".into(),
        None,
        Phase::Forward,
        Category::OutputLayer,
        0,
        0,
        0,
        0,
        0,
        act,
    );

    // Backward, layers in reverse, each site mirrored. Backward elementwise
    // groups read the incoming gradient on top of their forward operands.
    for i in (0..cfg.num_layers as u32).rev() {
        let id = |pass: &str, site: &str| format!("L{i}.{pass}.{site}");
        b.elementwise(
            id("bwdact", "fc_drln"),
            Some(i),
            Phase::BackwardActGrad,
            Category::DropResidualLayerNorm,
            drln_elems,
            FLOPS_DRLN_GROUP,
            3,
            1,
            1,
            act,
        );
        b.gemm(
            id("bwdact", "fc2"),
            i,
            GemmPass::BwdActGrad,
            Category::FcGemm,
            fc2_dims(GemmPass::BwdActGrad),
        );
        b.gemm(
            id("bwdwt", "fc2"),
            i,
            GemmPass::BwdWtGrad,
            Category::FcGemm,
            fc2_dims(GemmPass::BwdWtGrad),
        );
        b.elementwise(
            id("bwdact", "gelu"),
            Some(i),
            Phase::BackwardActGrad,
            Category::Gelu,
            gelu_elems,
            FLOPS_GELU,
            2,
            1,
            0,
            act,
        );
        b.gemm(
            id("bwdact", "fc1"),
            i,
            GemmPass::BwdActGrad,
            Category::FcGemm,
            fc1_dims(GemmPass::BwdActGrad),
        );
        b.gemm(
            id("bwdwt", "fc1"),
            i,
            GemmPass::BwdWtGrad,
            Category::FcGemm,
            fc1_dims(GemmPass::BwdWtGrad),
        );
        b.elementwise(
            id("bwdact", "attn_drln"),
            Some(i),
            Phase::BackwardActGrad,
            Category::DropResidualLayerNorm,
            drln_elems,
            FLOPS_DRLN_GROUP,
            3,
            1,
            1,
            act,
        );
        b.gemm(
            id("bwdact", "out_proj"),
            i,
            GemmPass::BwdActGrad,
            Category::LinearTransformGemm,
            outp_dims(GemmPass::BwdActGrad),
        );
        b.gemm(
            id("bwdwt", "out_proj"),
            i,
            GemmPass::BwdWtGrad,
            Category::LinearTransformGemm,
            outp_dims(GemmPass::BwdWtGrad),
        );
        b.gemm(
            id("bwdact", "attn_output"),
            i,
            GemmPass::BwdActGrad,
            Category::AttentionBGemm,
            attnout_dims(GemmPass::BwdActGrad),
        );
        b.gemm(
            id("bwdwt", "attn_output"),
            i,
            GemmPass::BwdWtGrad,
            Category::AttentionBGemm,
            attnout_dims(GemmPass::BwdWtGrad),
        );
        b.elementwise(
            id("bwdact", "attn_smsd"),
            Some(i),
            Phase::BackwardActGrad,
            Category::AttnScaleMaskSoftmaxDropout,
            attn_elems,
            FLOPS_ATTN_GROUP,
            3,
            1,
            1,
            act,
        );
        b.gemm(
            id("bwdact", "attn_score"),
            i,
            GemmPass::BwdActGrad,
            Category::AttentionBGemm,
            score_dims(GemmPass::BwdActGrad),
        );
        b.gemm(
            id("bwdwt", "attn_score"),
            i,
            GemmPass::BwdWtGrad,
            Category::AttentionBGemm,
            score_dims(GemmPass::BwdWtGrad),
        );
        b.gemm(
            id("bwdact", "q_proj"),
            i,
            GemmPass::BwdActGrad,
            Category::LinearTransformGemm,
            qkv_dims(GemmPass::BwdActGrad),
        );
        b.gemm(
            id("bwdwt", "q_proj"),
            i,
            GemmPass::BwdWtGrad,
            Category::LinearTransformGemm,
            qkv_dims(GemmPass::BwdWtGrad),
        );
        b.gemm(
            id("bwdact", "k_proj"),
            i,
            GemmPass::BwdActGrad,
            Category::LinearTransformGemm,
            qkv_dims(GemmPass::BwdActGrad),
        );
        b.gemm(
            id("bwdwt", "k_proj"),
            i,
            GemmPass::BwdWtGrad,
            Category::LinearTransformGemm,
            qkv_dims(GemmPass::BwdWtGrad),
        );
        b.gemm(
            id("bwdact", "v_proj"),
            i,
            GemmPass::BwdActGrad,
            Category::LinearTransformGemm,
            qkv_dims(GemmPass::BwdActGrad),
        );
        b.gemm(
            id("bwdwt", "v_proj"),
            i,
            GemmPass::BwdWtGrad,
            Category::LinearTransformGemm,
            qkv_dims(GemmPass::BwdWtGrad),
        );
    }

    // Update phase. The trust-ratio norms serialize the whole update behind
    // one global gradient-norm reduction, so that reduction comes first.
    b.ops.push(OpDescriptor {
        id: "upd.grad_norm".into(),
        layer: None,
        phase: Phase::Update,
        category: Category::GlobalGradNorm,
        kind: OpKind::Reduction {
            elements: total_params,
            passes: 1,
        },
        precision: opt,
    });
    for i in 0..cfg.num_layers as u32 {
        // Stage 1 reads w, g, m, v and writes m, v, and the update direction.
        b.elementwise(
            format!("L{i}.upd.lamb1"),
            Some(i),
            Phase::Update,
            Category::LambStage1,
            layer_params,
            FLOPS_LAMB_STAGE1,
            4,
            3,
            0,
            opt,
        );
        // Stage 2 reads w and the update direction, writes w.
        b.elementwise(
            format!("L{i}.upd.lamb2"),
            Some(i),
            Phase::Update,
            Category::LambStage2,
            layer_params,
            FLOPS_LAMB_STAGE2,
            2,
            1,
            0,
            opt,
        );
    }
    b.elementwise(
        "embed.upd.lamb1".into(),
        None,
        Phase::Update,
        Category::LambStage1,
        embed_params,
        FLOPS_LAMB_STAGE1,
        4,
        3,
        0,
        opt,
    );
    b.elementwise(
        "embed.upd.lamb2".into(),
        None,
        Phase::Update,
        Category::LambStage2,
        embed_params,
        FLOPS_LAMB_STAGE2,
        2,
        1,
        0,
        opt,
    );

    b.ops
}

/// One producer/consumer dimension incompatibility found by [`chain_check`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DimMismatch {
    pub producer: String,
    pub consumer: String,
    pub dim: String,
}

/// Walks the forward dataflow of every layer and verifies that each op
/// consumes exactly the element volume its producer emits: projections
/// reshape to heads, scores stay square, head outputs concatenate back to
/// the model width, and FC1 feeds GeLU feeds FC2. Element-count equality is
/// the right invariant here because reshapes (splitting to heads, merging
/// back) are free but never create or drop data. Returns every mismatch
/// found; an empty list means the graph is consistent.
pub fn chain_check(graph: &[OpDescriptor], cfg: &ModelConfig) -> Vec<DimMismatch> {
    let mut mismatches = Vec::new();
    let index: BTreeMap<&str, &OpDescriptor> =
        graph.iter().map(|op| (op.id.as_str(), op)).collect();

    let layers: Vec<u32> = {
        let mut seen: Vec<u32> = graph.iter().filter_map(|op| op.layer).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    };

    for i in layers {
        let id_of = |site: &str| format!("L{i}.fwd.{site}");
        // Total output elements of a forward op: m*n*batch for a GEMM (one
        // output matrix per batch entry), `elements` for elementwise groups.
        let produced = |site: &str| match index.get(id_of(site).as_str()) {
            Some(OpDescriptor {
                kind: OpKind::Gemm(g),
                ..
            }) => Some(g.m * g.n * g.batch),
            Some(OpDescriptor {
                kind: OpKind::Elementwise { elements, .. },
                ..
            }) => Some(*elements),
            _ => None,
        };
        // Elements a GEMM consumes through its A operand (m*k) or B operand
        // (k*n), summed over the batch.
        let consumed_a = |site: &str| {
            index
                .get(id_of(site).as_str())
                .and_then(|op| op.gemm())
                .map(|g| g.m * g.k * g.batch)
        };
        let consumed_b = |site: &str| {
            index
                .get(id_of(site).as_str())
                .and_then(|op| op.gemm())
                .map(|g| g.k * g.n * g.batch)
        };
        let elems = |site: &str| match index.get(id_of(site).as_str()) {
            Some(OpDescriptor {
                kind: OpKind::Elementwise { elements, .. },
                ..
            }) => Some(*elements),
            _ => None,
        };

        let mut check =
            |producer: &str, consumer: &str, dim: &str, lhs: Option<u64>, rhs: Option<u64>| {
                // A missing or malformed op reports as a mismatch rather than
                // being skipped, so a truncated graph cannot pass silently.
                let ok = matches!((lhs, rhs), (Some(a), Some(b)) if a == b);
                if !ok {
                    let name = |s: &str| {
                        if s == "config" {
                            s.to_string()
                        } else {
                            id_of(s)
                        }
                    };
                    mismatches.push(DimMismatch {
                        producer: name(producer),
                        consumer: name(consumer),
                        dim: dim.to_string(),
                    });
                }
            };

        // Q and K project to (head_dim x seq) per head and meet in the score
        // GEMM as its A and B operands.
        check(
            "q_proj",
            "attn_score",
            "q_elements",
            produced("q_proj"),
            consumed_a("attn_score"),
        );
        check(
            "k_proj",
            "attn_score",
            "k_elements",
            produced("k_proj"),
            consumed_b("attn_score"),
        );
        check(
            "attn_score",
            "attn_smsd",
            "score_elements",
            produced("attn_score"),
            elems("attn_smsd"),
        );
        // The softmax probabilities are the B operand of the context GEMM;
        // the V projection is its A operand.
        check(
            "attn_smsd",
            "attn_output",
            "prob_elements",
            elems("attn_smsd"),
            consumed_b("attn_output"),
        );
        check(
            "v_proj",
            "attn_output",
            "v_elements",
            produced("v_proj"),
            consumed_a("attn_output"),
        );
        // Head outputs concatenate back to the model width for the output
        // projection, which feeds the first residual/norm site.
        check(
            "attn_output",
            "out_proj",
            "context_elements",
            produced("attn_output"),
            consumed_b("out_proj"),
        );
        check(
            "out_proj",
            "attn_drln",
            "hidden_elements",
            produced("out_proj"),
            elems("attn_drln"),
        );
        check(
            "attn_drln",
            "fc1",
            "hidden_elements",
            elems("attn_drln"),
            consumed_b("fc1"),
        );
        check("fc1", "gelu", "ff_elements", produced("fc1"), elems("gelu"));
        check(
            "gelu",
            "fc2",
            "ff_elements",
            elems("gelu"),
            consumed_b("fc2"),
        );
        check(
            "fc2",
            "fc_drln",
            "hidden_elements",
            produced("fc2"),
            elems("fc_drln"),
        );
        // The residual stream is never sharded, so both norm sites must
        // carry the configured full hidden width.
        let residual = Some(cfg.tokens() * cfg.hidden_dim);
        check(
            "config",
            "attn_drln",
            "residual_elements",
            residual,
            elems("attn_drln"),
        );
        check(
            "config",
            "fc_drln",
            "residual_elements",
            residual,
            elems("fc_drln"),
        );
    }
    mismatches
}

/// Serializes a graph as one JSON object per line with stable field order,
/// ending in a newline. Suitable for golden-file comparison.
pub fn dump_graph(graph: &[OpDescriptor]) -> String {
    let mut out = String::new();
    for op in graph {
        out.push_str(&serde_json::to_string(op).expect("op serializes"));
        out.push('\n');
    }
    out
}

/// Parses [`dump_graph`] output back into descriptors.
pub fn parse_graph_dump(text: &str) -> Result<Vec<OpDescriptor>, Error> {
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

// =============================================================================
// Tests
// =============================================================================

#[cfg(test)]
mod tests {
    use super::*;

    fn phase1() -> ModelConfig {
        ModelConfig::preset("bert_large_phase1").unwrap()
    }

    fn gemm_flops(g: &GemmShape) -> u64 {
        2 * g.m * g.n * g.k * g.batch
    }

    #[test]
    fn shape_table_spot_checks() {
        // Phase-1 large: d=1024, f=4096, s=128, B=32 so t=4096, hd=64, bh=512.
        let cfg = phase1();
        let lt = gemm_dims(GemmSite::LinearTrans, GemmPass::Fwd, &cfg);
        assert_eq!((lt.m, lt.n, lt.k, lt.batch), (1024, 4096, 1024, 1));

        let fc1 = gemm_dims(GemmSite::Fc1, GemmPass::Fwd, &cfg);
        assert_eq!((fc1.m, fc1.n, fc1.k, fc1.batch), (4096, 4096, 1024, 1));
        assert_eq!(gemm_flops(&fc1), 34_359_738_368);

        let score = gemm_dims(GemmSite::AttnScore, GemmPass::Fwd, &cfg);
        assert_eq!(
            (score.m, score.n, score.k, score.batch),
            (128, 128, 64, 512)
        );

        let score_bwd = gemm_dims(GemmSite::AttnScore, GemmPass::BwdActGrad, &cfg);
        assert_eq!(
            (score_bwd.m, score_bwd.n, score_bwd.k, score_bwd.batch),
            (128, 64, 128, 512)
        );

        let fc2_wt = gemm_dims(GemmSite::Fc2, GemmPass::BwdWtGrad, &cfg);
        assert_eq!(
            (fc2_wt.m, fc2_wt.n, fc2_wt.k, fc2_wt.batch),
            (4096, 1024, 4096, 1)
        );

        let out_ctx = gemm_dims(GemmSite::AttnOutput, GemmPass::Fwd, &cfg);
        assert_eq!(
            (out_ctx.m, out_ctx.n, out_ctx.k, out_ctx.batch),
            (64, 128, 128, 512)
        );
    }

    #[test]
    fn transpose_flags_follow_the_pass() {
        let cfg = phase1();
        for site in [
            GemmSite::LinearTrans,
            GemmSite::AttnScore,
            GemmSite::AttnOutput,
            GemmSite::Fc1,
            GemmSite::Fc2,
        ] {
            let fwd = gemm_dims(site, GemmPass::Fwd, &cfg);
            let act = gemm_dims(site, GemmPass::BwdActGrad, &cfg);
            let wt = gemm_dims(site, GemmPass::BwdWtGrad, &cfg);
            assert_eq!((fwd.trans_a, fwd.trans_b), (false, false));
            assert_eq!((act.trans_a, act.trans_b), (true, false));
            assert_eq!((wt.trans_a, wt.trans_b), (false, true));
        }
    }

    #[test]
    fn backward_passes_cost_the_same_flops_as_forward() {
        // Each backward GEMM permutes {m, n, k} of its forward partner, so
        // the flop count is identical across the three passes of a site.
        let cfg = phase1();
        for site in [
            GemmSite::LinearTrans,
            GemmSite::AttnScore,
            GemmSite::AttnOutput,
            GemmSite::Fc1,
            GemmSite::Fc2,
        ] {
            let fwd = gemm_flops(&gemm_dims(site, GemmPass::Fwd, &cfg));
            let act = gemm_flops(&gemm_dims(site, GemmPass::BwdActGrad, &cfg));
            let wt = gemm_flops(&gemm_dims(site, GemmPass::BwdWtGrad, &cfg));
            assert_eq!(fwd, act);
            assert_eq!(fwd, wt);
        }
    }

    #[test]
    fn iteration_op_counts_for_phase1_large() {
        let cfg = phase1();
        let graph = build_iteration(&cfg);

        let plain = graph
            .iter()
            .filter(|op| matches!(op.gemm(), Some(g) if g.batch == 1))
            .count();
        let batched = graph
            .iter()
            .filter(|op| matches!(op.gemm(), Some(g) if g.batch > 1))
            .count();
        // Per layer: 6 plain forward GEMMs and 12 backward, 2 batched
        // forward and 4 backward.
        assert_eq!(plain, 24 * 18);
        assert_eq!(batched, 24 * 6);
        // 12 forward + 20 backward + 2 update ops per layer, plus embedding
        // and output placeholders, the gradient-norm reduction, and the two
        // embedding update stages.
        assert_eq!(graph.len(), 24 * 34 + 5);
    }

    #[test]
    fn single_layer_forward_order() {
        let cfg = ModelConfig {
            num_layers: 1,
            ..phase1()
        };
        let graph = build_iteration(&cfg);
        let ids: Vec<&str> = graph.iter().map(|op| op.id.as_str()).collect();
        assert_eq!(
            &ids[..14],
            &[
                "embed.fwd",
                "L0.fwd.q_proj",
                "L0.fwd.k_proj",
                "L0.fwd.v_proj",
                "L0.fwd.attn_score",
                "L0.fwd.attn_smsd",
                "L0.fwd.attn_output",
                "L0.fwd.out_proj",
                "L0.fwd.attn_drln",
                "L0.fwd.fc1",
                "L0.fwd.gelu",
                "L0.fwd.fc2",
                "L0.fwd.fc_drln",
                "output.fwd",
            ]
        );
        // Backward starts from the top of the stack and the update phase
        // begins with the global norm.
        assert_eq!(ids[14], "L0.bwdact.fc_drln");
        assert_eq!(ids[ids.len() - 5], "upd.grad_norm");
        assert_eq!(ids[ids.len() - 1], "embed.upd.lamb2");
    }

    #[test]
    fn every_forward_gemm_has_both_backward_partners() {
        let cfg = phase1();
        let graph = build_iteration(&cfg);
        let index: BTreeMap<&str, &OpDescriptor> =
            graph.iter().map(|op| (op.id.as_str(), op)).collect();

        let mut checked = 0;
        for op in &graph {
            let Some(fwd) = op.gemm() else { continue };
            if op.phase != Phase::Forward {
                continue;
            }
            let site = op
                .id
                .strip_prefix(&format!("L{}.fwd.", op.layer.unwrap()))
                .unwrap();
            let act = index[format!("L{}.bwdact.{site}", op.layer.unwrap()).as_str()];
            let wt = index[format!("L{}.bwdwt.{site}", op.layer.unwrap()).as_str()];
            assert_eq!(act.phase, Phase::BackwardActGrad);
            assert_eq!(wt.phase, Phase::BackwardWeightGrad);
            assert_eq!(act.category, op.category);
            assert_eq!(wt.category, op.category);
            // Same flop volume, transposed operands.
            assert_eq!(gemm_flops(act.gemm().unwrap()), gemm_flops(fwd));
            assert_eq!(gemm_flops(wt.gemm().unwrap()), gemm_flops(fwd));
            assert!(act.gemm().unwrap().trans_a);
            assert!(wt.gemm().unwrap().trans_b);
            checked += 1;
        }
        assert_eq!(checked, 24 * 8);
    }

    #[test]
    fn backward_act_grad_precedes_weight_grad_at_every_site() {
        let graph = build_iteration(&phase1());
        let pos: BTreeMap<&str, usize> = graph
            .iter()
            .enumerate()
            .map(|(i, op)| (op.id.as_str(), i))
            .collect();
        for (id, i) in &pos {
            if let Some(rest) = id.strip_prefix('L') {
                if let Some((layer, site)) = rest.split_once(".bwdact.") {
                    let wt = format!("L{layer}.bwdwt.{site}");
                    if let Some(j) = pos.get(wt.as_str()) {
                        assert!(i < j, "{id} should precede {wt}");
                    }
                }
            }
        }
    }

    #[test]
    fn update_phase_is_norm_then_per_bucket_stages() {
        let graph = build_iteration(&phase1());
        let norm_pos = graph
            .iter()
            .position(|op| op.id == "upd.grad_norm")
            .unwrap();
        for (i, op) in graph.iter().enumerate() {
            match op.category {
                Category::LambStage1 | Category::LambStage2 => {
                    assert!(i > norm_pos, "{} runs before the global norm", op.id);
                }
                _ => {}
            }
        }
        // Stage 1 must precede stage 2 within each bucket.
        let pos: BTreeMap<&str, usize> = graph
            .iter()
            .enumerate()
            .map(|(i, op)| (op.id.as_str(), i))
            .collect();
        for op in &graph {
            if let Some(bucket) = op.id.strip_suffix(".lamb1") {
                assert!(pos[op.id.as_str()] < pos[format!("{bucket}.lamb2").as_str()]);
            }
        }
    }

    #[test]
    fn lamb_elements_cover_every_parameter_exactly_once() {
        let cfg = phase1();
        let graph = build_iteration(&cfg);
        let params = param_count(&cfg);
        for cat in [Category::LambStage1, Category::LambStage2] {
            let total: u64 = graph
                .iter()
                .filter(|op| op.category == cat)
                .map(|op| match op.kind {
                    OpKind::Elementwise { elements, .. } => elements,
                    _ => panic!("optimizer ops are elementwise"),
                })
                .sum();
            assert_eq!(total, params.total);
        }
        // The norm reduction sweeps the same parameter count.
        let norm = graph.iter().find(|op| op.id == "upd.grad_norm").unwrap();
        assert_eq!(
            norm.kind,
            OpKind::Reduction {
                elements: params.total,
                passes: 1
            }
        );
    }

    #[test]
    fn attention_elements_grow_quadratically_with_seq_len() {
        let short = phase1();
        let long = ModelConfig {
            seq_len: 256,
            ..short.clone()
        };
        let a = nongemm_element_counts(&short)[&Category::AttnScaleMaskSoftmaxDropout];
        let b = nongemm_element_counts(&long)[&Category::AttnScaleMaskSoftmaxDropout];
        assert_eq!(b, 4 * a);
        // GeLU and the norm sites scale linearly.
        let ga = nongemm_element_counts(&short)[&Category::Gelu];
        let gb = nongemm_element_counts(&long)[&Category::Gelu];
        assert_eq!(gb, 2 * ga);
    }

    #[test]
    fn graph_elementwise_counts_match_the_formulas() {
        let cfg = phase1();
        let graph = build_iteration(&cfg);
        let expected = nongemm_element_counts(&cfg);
        for op in &graph {
            let Some(want) = expected.get(&op.category) else {
                continue;
            };
            if let OpKind::Elementwise { elements, .. } = op.kind {
                assert_eq!(elements, *want, "{}", op.id);
            }
        }
    }

    #[test]
    fn chain_check_accepts_built_graphs() {
        for cfg in [
            phase1(),
            ModelConfig::preset("bert_large_phase2").unwrap(),
            ModelConfig::preset("bert_base_phase1").unwrap(),
        ] {
            let graph = build_iteration(&cfg);
            assert_eq!(chain_check(&graph, &cfg), Vec::new());
        }
        // Head-sharded graphs stay consistent too.
        let cfg = phase1();
        for degree in [2, 4, 8, 16] {
            let graph = build_iteration_split(&cfg, degree);
            assert_eq!(chain_check(&graph, &cfg), Vec::new(), "degree {degree}");
        }
    }

    #[test]
    fn chain_check_flags_corruption_and_truncation() {
        let cfg = phase1();
        let mut graph = build_iteration(&cfg);
        let idx = graph.iter().position(|op| op.id == "L3.fwd.fc1").unwrap();
        if let OpKind::Gemm(ref mut g) = graph[idx].kind {
            g.n += 1;
        }
        let found = chain_check(&graph, &cfg);
        assert!(
            found.iter().any(|m| m.consumer == "L3.fwd.gelu"),
            "{found:?}"
        );

        let mut graph = build_iteration(&cfg);
        graph.retain(|op| op.id != "L0.fwd.gelu");
        let found = chain_check(&graph, &cfg);
        assert!(
            found.iter().any(|m| m.producer == "L0.fwd.fc1"),
            "{found:?}"
        );
    }

    #[test]
    fn model_split_divides_weights_but_not_the_residual() {
        let cfg = phase1();
        let whole = build_iteration(&cfg);
        let split = build_iteration_split(&cfg, 4);
        assert_eq!(whole.len(), split.len());

        let flops_of = |ops: &[OpDescriptor], id: &str| {
            gemm_flops(ops.iter().find(|op| op.id == id).unwrap().gemm().unwrap())
        };
        for id in [
            "L0.fwd.q_proj",
            "L0.fwd.fc1",
            "L0.fwd.attn_score",
            "L0.bwdwt.out_proj",
        ] {
            assert_eq!(flops_of(&whole, id), 4 * flops_of(&split, id), "{id}");
        }
        // Residual norm sites are replicated, not divided.
        let elems_of = |ops: &[OpDescriptor], id: &str| match ops
            .iter()
            .find(|op| op.id == id)
            .unwrap()
            .kind
        {
            OpKind::Elementwise { elements, .. } => elements,
            _ => unreachable!(),
        };
        assert_eq!(
            elems_of(&whole, "L0.fwd.attn_drln"),
            elems_of(&split, "L0.fwd.attn_drln")
        );
        assert_eq!(
            elems_of(&whole, "L0.fwd.gelu"),
            4 * elems_of(&split, "L0.fwd.gelu")
        );
        assert_eq!(
            elems_of(&whole, "L0.fwd.attn_smsd"),
            4 * elems_of(&split, "L0.fwd.attn_smsd")
        );
        assert_eq!(
            elems_of(&whole, "L0.upd.lamb1"),
            4 * elems_of(&split, "L0.upd.lamb1")
        );
    }

    #[test]
    fn precision_assignment_per_mode() {
        let fp32 = build_iteration(&phase1());
        assert!(fp32.iter().all(|op| op.precision == DType::Fp32));

        let mixed_cfg = ModelConfig {
            precision: Precision::Mixed,
            ..phase1()
        };
        let mixed = build_iteration(&mixed_cfg);
        for op in &mixed {
            let expect = match op.phase {
                Phase::Update => DType::Fp32,
                _ => DType::Fp16,
            };
            assert_eq!(op.precision, expect, "{}", op.id);
        }
    }

    #[test]
    fn dump_round_trips_and_rejects_garbage() {
        let cfg = ModelConfig {
            num_layers: 2,
            ..phase1()
        };
        let graph = build_iteration(&cfg);
        let text = dump_graph(&graph);
        assert!(text.ends_with('\n'));
        let parsed = parse_graph_dump(&text).unwrap();
        assert_eq!(parsed, graph);

        assert!(parse_graph_dump("not json\n").is_err());
        assert!(parse_graph_dump(r#"{"id": "x"}"#).is_err());
        // Blank lines are tolerated.
        let padded = format!("\n{text}\n");
        assert_eq!(parse_graph_dump(&padded).unwrap(), graph);
    }

    #[test]
    fn dtype_serialization_uses_uppercase_names() {
        let json = serde_json::to_string(&DType::Fp16).unwrap();
        assert_eq!(json, r#""FP16""#);
        let cat = serde_json::to_string(&Category::FcGemm).unwrap();
        assert_eq!(cat, r#""FCGEMM""#);
        let cat = serde_json::to_string(&Category::Gelu).unwrap();
        assert_eq!(cat, r#""GeLU""#);
        let cat = serde_json::to_string(&Category::LinearTransformGemm).unwrap();
        assert_eq!(cat, r#""LinearTransformGEMM""#);
    }
}
