//! JSON bodies of the labeling service. Every response carries
//! `schema_version`; requests may omit it.

use querysynth_core::harness::eval::GridSummary;
use querysynth_core::harness::{MetricRecord, Query};
use serde::{Deserialize, Serialize};

pub use crate::records::Label;

pub const SCHEMA_VERSION: u32 = 1;

/// One transition awaiting a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireQuery {
    pub id: u64,
    pub af: String,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
}

impl From<&Query> for WireQuery {
    fn from(q: &Query) -> Self {
        Self { id: q.id, af: q.af.clone(), s: q.s.clone(), a: q.a.clone(), s_next: q.s_next.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    /// Queries are waiting for labels.
    Ready,
    /// A label batch is being committed; retry after the signalled delay.
    Retraining,
    /// The label budget is spent.
    Finished,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueriesResponse {
    pub schema_version: u32,
    pub session_id: String,
    pub round: usize,
    pub status: SessionStatus,
    pub queries: Vec<WireQuery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsRequest {
    #[serde(default)]
    pub schema_version: Option<u32>,
    pub labels: Vec<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainState {
    Done,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrainStatus {
    pub state: RetrainState,
    /// The round this retrain produces; poll `queries` until it appears.
    pub token: usize,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelsResponse {
    pub schema_version: u32,
    pub session_id: String,
    pub round: usize,
    pub labels_total: usize,
    pub retrain: RetrainStatus,
    /// The batch repeated the last committed one and changed nothing.
    pub duplicate: bool,
}

/// Per-cell grids over the unit square, row-major with `y` as the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub resolution: usize,
    /// `classes[c][cell]`: probability of class `c` (good, unsafe, neutral).
    pub classes: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
    pub disagreement: Vec<f64>,
}

impl From<GridSummary> for Heatmap {
    fn from(g: GridSummary) -> Self {
        Self { resolution: g.resolution, classes: g.classes, reward: g.reward, disagreement: g.disagreement }
    }
}

/// Shadow-oracle metrics after a round; never used for labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub round: usize,
    pub labels: usize,
    pub fpr: Option<f64>,
    pub tnr: Option<f64>,
    pub grid_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
}

impl From<&MetricRecord> for HistoryPoint {
    fn from(r: &MetricRecord) -> Self {
        Self { round: r.round, labels: r.labels, fpr: r.fpr, tnr: r.tnr, grid_accuracy: r.grid_accuracy, accuracy: r.accuracy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryResponse {
    pub schema_version: u32,
    pub session_id: String,
    pub round: usize,
    pub labels: usize,
    pub status: SessionStatus,
    pub dataset_size: usize,
    /// Absent for domains without a 2-D state.
    pub heatmap: Option<Heatmap>,
    pub history: Vec<HistoryPoint>,
    /// Path of the stop endpoint.
    pub stop: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    /// Configuration overrides, same keys as the configuration file.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    #[serde(default)]
    pub heatmap_resolution: Option<usize>,
    /// Track FPR/TNR with the simulated oracle (default true).
    #[serde(default)]
    pub shadow_oracle: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub schema_version: u32,
    pub session_id: String,
    pub round: usize,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema_version: u32,
    pub error: String,
    /// The offending request field, when one can be named.
    pub field: Option<String>,
}
