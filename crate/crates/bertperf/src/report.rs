//! Runtime breakdowns, hyperparameter sweeps, and JSON/CSV emission.
//!
//! A breakdown folds a schedule's per-op times into the reporting groups
//! used throughout the toolkit: the transformer layers (forward and backward
//! together), the embedding and output placeholders, the optimizer update,
//! exposed communication, and gradient accumulation. Sweeps rerun the full
//! pipeline across one axis and emit one row per value.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{HardwareSpec, ModelConfig, ParallelismConfig};
use crate::error::Error;
use crate::opgraph::Category;
use crate::parallel::{apply_hybrid, ScheduledGraph};
use crate::roofline::CostEstimate;
use crate::whatif::apply_microbatching;

// ---------------------------------------------------------------------------
// Category groups
// ---------------------------------------------------------------------------

/// Top-level reporting buckets. A layer's forward and backward phases are
/// grouped together; the optimizer update is shown separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CategoryGroup {
    Transformer,
    Embedding,
    OutputLayer,
    LambUpdate,
    Communication,
    GradAccumulate,
}

impl CategoryGroup {
    /// Every group, in the fixed emission order.
    pub const ALL: [CategoryGroup; 6] = [
        CategoryGroup::Transformer,
        CategoryGroup::Embedding,
        CategoryGroup::OutputLayer,
        CategoryGroup::LambUpdate,
        CategoryGroup::Communication,
        CategoryGroup::GradAccumulate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CategoryGroup::Transformer => "Transformer",
            CategoryGroup::Embedding => "Embedding",
            CategoryGroup::OutputLayer => "OutputLayer",
            CategoryGroup::LambUpdate => "LambUpdate",
            CategoryGroup::Communication => "Communication",
            CategoryGroup::GradAccumulate => "GradAccumulate",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for CategoryGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The reporting bucket an op category rolls up into.
pub fn group_of(category: Category) -> CategoryGroup {
    match category {
        Category::LinearTransformGemm
        | Category::AttentionBGemm
        | Category::AttnScaleMaskSoftmaxDropout
        | Category::FcGemm
        | Category::Gelu
        | Category::DropResidualLayerNorm => CategoryGroup::Transformer,
        Category::Embedding => CategoryGroup::Embedding,
        Category::OutputLayer => CategoryGroup::OutputLayer,
        Category::LambStage1 | Category::LambStage2 | Category::GlobalGradNorm => {
            CategoryGroup::LambUpdate
        }
        Category::AllReduce => CategoryGroup::Communication,
        Category::GradAccumulate => CategoryGroup::GradAccumulate,
    }
}

// ---------------------------------------------------------------------------
// Breakdowns
// ---------------------------------------------------------------------------

/// Time and share of total for one bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct GroupStat {
    pub time_seconds: f64,
    pub fraction: f64,
}

/// Where one iteration's wall-clock time goes.
///
/// Only buckets with at least one scheduled event appear. Fractions sum to
/// one and times sum to `total_time_seconds` (both within 1e-9); overlapped
/// communication contributes only its exposed portion, so nothing is counted
/// twice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IterationBreakdown {
    pub total_time_seconds: f64,
    pub groups: BTreeMap<CategoryGroup, GroupStat>,
}

fn fold_times<K: Ord>(
    schedule: &ScheduledGraph,
    estimates: &[CostEstimate],
    key: impl Fn(Category) -> K,
) -> Result<(f64, BTreeMap<K, GroupStat>), Error> {
    if schedule.events.len() != estimates.len() {
        return Err(Error::IndexMismatch {
            schedule: schedule.events.len(),
            estimates: estimates.len(),
        });
    }
    let mut times: BTreeMap<K, f64> = BTreeMap::new();
    for (event, est) in schedule.events.iter().zip(estimates) {
        let exposed = (est.time_seconds - event.overlapped_seconds).max(0.0);
        *times.entry(key(event.op.category)).or_insert(0.0) += exposed;
    }
    let total: f64 = times.values().sum();
    let stats = times
        .into_iter()
        .map(|(k, time_seconds)| {
            let fraction = if total > 0.0 {
                time_seconds / total
            } else {
                0.0
            };
            (
                k,
                GroupStat {
                    time_seconds,
                    fraction,
                },
            )
        })
        .collect();
    Ok((total, stats))
}

/// Folds a schedule's exposed per-op times into the reporting buckets.
/// `estimates` must be parallel-indexed to the schedule's events (use
/// [`ScheduledGraph::estimates`] for the schedule's own costs).
pub fn breakdown(
    schedule: &ScheduledGraph,
    estimates: &[CostEstimate],
) -> Result<IterationBreakdown, Error> {
    let (total_time_seconds, groups) = fold_times(schedule, estimates, group_of)?;
    Ok(IterationBreakdown {
        total_time_seconds,
        groups,
    })
}

/// The same fold at full category granularity, for drilling into the
/// transformer-internal and optimizer-internal split.
pub fn category_breakdown(
    schedule: &ScheduledGraph,
    estimates: &[CostEstimate],
) -> Result<BTreeMap<Category, GroupStat>, Error> {
    let (_, stats) = fold_times(schedule, estimates, |c| c)?;
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Analysis pipeline
// ---------------------------------------------------------------------------

/// A fully costed iteration: the schedule and its breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Analysis {
    pub schedule: ScheduledGraph,
    pub breakdown: IterationBreakdown,
}

/// Validates the configs, builds the iteration under the requested layout
/// (micro-batching, or the model-within-data parallel hierarchy), costs it,
/// and folds the breakdown.
///
/// Micro-batching is modeled on a single device; combining
/// `micro_batches > 1` with a parallelism degree above one is unsupported.
pub fn run_analysis(
    cfg: &ModelConfig,
    par: &ParallelismConfig,
    hw: &HardwareSpec,
) -> Result<Analysis, Error> {
    cfg.validate()?;
    hw.validate()?;
    par.validate(cfg)?;

    let schedule = if par.micro_batches > 1 {
        if par.data_degree > 1 || par.model_degree > 1 {
            return Err(Error::Unsupported(
                "micro-batching combined with data or model parallelism".to_string(),
            ));
        }
        let graph = apply_microbatching(cfg, par.micro_batches)?;
        ScheduledGraph::from_ops(&graph, hw)?
    } else {
        apply_hybrid(cfg, par, hw)?
    };
    let breakdown = breakdown(&schedule, &schedule.estimates())?;
    Ok(Analysis {
        schedule,
        breakdown,
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// The configuration dimension a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BatchSize,
    SeqLen,
    HiddenDim,
    NumLayers,
    ModelDegree,
    DataDegree,
    Precision,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::SeqLen => "seq_len",
            SweepAxis::HiddenDim => "hidden_dim",
            SweepAxis::NumLayers => "num_layers",
            SweepAxis::ModelDegree => "model_degree",
            SweepAxis::DataDegree => "data_degree",
            SweepAxis::Precision => "precision",
        }
    }

    const ALL: [SweepAxis; 7] = [
        SweepAxis::BatchSize,
        SweepAxis::SeqLen,
        SweepAxis::HiddenDim,
        SweepAxis::NumLayers,
        SweepAxis::ModelDegree,
        SweepAxis::DataDegree,
        SweepAxis::Precision,
    ];
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(raw: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|axis| axis.name() == raw)
            .ok_or_else(|| Error::InvalidValue {
                key: "axis",
                reason: format!(
                    "`{raw}` is not one of batch_size, seq_len, hidden_dim, num_layers, \
                     model_degree, data_degree, precision"
                ),
            })
    }
}

/// One sweep point: the axis value as given, and the breakdown or the error
/// that value produced.
#[derive(Debug)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub outcome: Result<IterationBreakdown, Error>,
}

fn parse_axis_u64(axis: SweepAxis, raw: &str) -> Result<u64, Error> {
    raw.parse().map_err(|_| Error::InvalidValue {
        key: axis.name(),
        reason: format!("`{raw}` is not an unsigned integer"),
    })
}

fn sweep_point(
    axis: SweepAxis,
    raw: &str,
    cfg: &ModelConfig,
    par: &ParallelismConfig,
    hw: &HardwareSpec,
) -> Result<IterationBreakdown, Error> {
    let mut cfg = cfg.clone();
    let mut par = par.clone();
    match axis {
        SweepAxis::BatchSize => cfg.batch_size = parse_axis_u64(axis, raw)?,
        SweepAxis::SeqLen => cfg.seq_len = parse_axis_u64(axis, raw)?,
        SweepAxis::HiddenDim => {
            // Wider models keep the conventional 4x feed-forward expansion.
            cfg.hidden_dim = parse_axis_u64(axis, raw)?;
            cfg.intermediate_dim = 4 * cfg.hidden_dim;
        }
        SweepAxis::NumLayers => cfg.num_layers = parse_axis_u64(axis, raw)?,
        SweepAxis::ModelDegree => par.model_degree = parse_axis_u64(axis, raw)?,
        SweepAxis::DataDegree => par.data_degree = parse_axis_u64(axis, raw)?,
        SweepAxis::Precision => cfg.precision = raw.parse()?,
    }
    run_analysis(&cfg, &par, hw).map(|analysis| analysis.breakdown)
}

/// Runs the analysis once per value along one axis. Rows keep the given
/// order; a value that fails validation yields an error row and the
/// remaining values are still computed.
pub fn sweep(
    axis: SweepAxis,
    values: &[&str],
    cfg: &ModelConfig,
    par: &ParallelismConfig,
    hw: &HardwareSpec,
) -> Vec<SweepRow> {
    values
        .iter()
        .map(|raw| SweepRow {
            axis,
            value: raw.to_string(),
            outcome: sweep_point(axis, raw, cfg, par, hw),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

/// Serialization format for emitted tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmitFormat {
    Json,
    Csv,
}

impl FromStr for EmitFormat {
    type Err = Error;

    fn from_str(raw: &str) -> Result<Self, Error> {
        match raw {
            "json" => Ok(EmitFormat::Json),
            "csv" => Ok(EmitFormat::Csv),
            _ => Err(Error::InvalidValue {
                key: "format",
                reason: format!("`{raw}` is not one of `json`, `csv`"),
            }),
        }
    }
}

/// One emitted table row: identifying labels (for sweeps, the axis value)
/// plus the breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitRow {
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(flatten)]
    pub breakdown: IterationBreakdown,
}

/// Rounds to 9 significant digits, the emission precision for every number.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

fn rounded(row: &EmitRow) -> EmitRow {
    EmitRow {
        labels: row.labels.clone(),
        breakdown: IterationBreakdown {
            total_time_seconds: round_sig9(row.breakdown.total_time_seconds),
            groups: row
                .breakdown
                .groups
                .iter()
                .map(|(g, s)| {
                    (
                        *g,
                        GroupStat {
                            time_seconds: round_sig9(s.time_seconds),
                            fraction: round_sig9(s.fraction),
                        },
                    )
                })
                .collect(),
        },
    }
}

/// Serializes rows as a JSON array or a CSV table, both newline-terminated,
/// with every number rendered at 9 significant digits.
///
/// CSV columns are the union of label keys (sorted), then one fraction
/// column per reporting group in [`CategoryGroup::ALL`] order (absent groups
/// emit 0), then `total_time_seconds`.
pub fn emit(rows: &[EmitRow], format: EmitFormat) -> String {
    let rows: Vec<EmitRow> = rows.iter().map(rounded).collect();
    match format {
        EmitFormat::Json => {
            let mut out = serde_json::to_string_pretty(&rows).expect("rows serialize");
            out.push('\n');
            out
        }
        EmitFormat::Csv => {
            let mut label_keys: Vec<&String> =
                rows.iter().flat_map(|row| row.labels.keys()).collect();
            label_keys.sort();
            label_keys.dedup();

            let mut out = String::new();
            for key in &label_keys {
                out.push_str(key);
                out.push(',');
            }
            let group_names: Vec<&str> = CategoryGroup::ALL.iter().map(|g| g.name()).collect();
            out.push_str(&group_names.join(","));
            out.push_str(",total_time_seconds\n");

            for row in &rows {
                for key in &label_keys {
                    out.push_str(row.labels.get(*key).map(String::as_str).unwrap_or(""));
                    out.push(',');
                }
                let fractions: Vec<String> = CategoryGroup::ALL
                    .iter()
                    .map(|g| fmt_sig9(row.breakdown.groups.get(g).map_or(0.0, |s| s.fraction)))
                    .collect();
                out.push_str(&fractions.join(","));
                out.push(',');
                out.push_str(&fmt_sig9(row.breakdown.total_time_seconds));
                out.push('\n');
            }
            out
        }
    }
}

/// Reads rows back from [`emit`]'s JSON form: an array of rows, or a single
/// row object.
pub fn parse_breakdown_json(text: &str) -> Result<Vec<EmitRow>, Error> {
    if let Ok(rows) = serde_json::from_str::<Vec<EmitRow>>(text) {
        return Ok(rows);
    }
    serde_json::from_str::<EmitRow>(text)
        .map(|row| vec![row])
        .map_err(|e| Error::Parse(e.to_string()))
}

/// Reads rows back from [`emit`]'s CSV form. Group times are reconstructed
/// as `fraction * total`; zero-fraction groups are treated as absent.
pub fn parse_breakdown_csv(text: &str) -> Result<Vec<EmitRow>, Error> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty table".to_string()))?;
    let columns: Vec<&str> = header.split(',').collect();

    enum Col {
        Label(String),
        Group(CategoryGroup),
        Total,
    }
    let mut saw_total = false;
    let schema: Vec<Col> = columns
        .iter()
        .map(|&name| {
            if name == "total_time_seconds" {
                saw_total = true;
                Col::Total
            } else if let Some(group) = CategoryGroup::from_name(name) {
                Col::Group(group)
            } else {
                Col::Label(name.to_string())
            }
        })
        .collect();
    if !saw_total {
        return Err(Error::Parse(
            "missing `total_time_seconds` column".to_string(),
        ));
    }

    let mut rows = Vec::new();
    for (number, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != schema.len() {
            return Err(Error::Parse(format!(
                "row {} has {} fields, header has {}",
                number + 2,
                fields.len(),
                schema.len()
            )));
        }
        let number_field = |field: &str| -> Result<f64, Error> {
            field.parse().map_err(|_| {
                Error::Parse(format!("`{field}` is not a number (row {})", number + 2))
            })
        };
        let mut labels = BTreeMap::new();
        let mut fractions: Vec<(CategoryGroup, f64)> = Vec::new();
        let mut total = 0.0;
        for (col, field) in schema.iter().zip(&fields) {
            match col {
                Col::Label(key) => {
                    labels.insert(key.clone(), field.to_string());
                }
                Col::Group(group) => fractions.push((*group, number_field(field)?)),
                Col::Total => total = number_field(field)?,
            }
        }
        let groups = fractions
            .into_iter()
            .filter(|(_, fraction)| *fraction != 0.0)
            .map(|(group, fraction)| {
                (
                    group,
                    GroupStat {
                        time_seconds: fraction * total,
                        fraction,
                    },
                )
            })
            .collect();
        rows.push(EmitRow {
            labels,
            breakdown: IterationBreakdown {
                total_time_seconds: total,
                groups,
            },
        });
    }
    Ok(rows)
}

// =============================================================================
// Tests
// =============================================================================
