//! Destination predictors: the multi-input LSTM, the single-input LSTM and
//! MLP references, and the geometric baseline.

mod baseline;
mod network;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{weighted_mean_point, GeoPoint};
use crate::ingest::{Trajectory, TripMetadata};
use crate::nn::NnError;
use crate::partition::{RegionId, SpacePartition};

pub use baseline::Baseline;
pub use network::{mlp_input_ids, ModelConfig, NeuralModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty region sequence")]
    EmptySequence,
    #[error("region id {id} outside 1..={n_regions}")]
    RegionOutOfRange { id: u32, n_regions: usize },
    #[error("baseline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("model expects {expected} regions, partition has {found}")]
    RegionCountMismatch { expected: usize, found: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("baseline has no candidate regions")]
    NoCandidates,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MultiLstm,
    SingleLstm,
    Mlp,
    Baseline,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::MultiLstm,
        ModelKind::SingleLstm,
        ModelKind::Mlp,
        ModelKind::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MultiLstm => "multi_lstm",
            ModelKind::SingleLstm => "single_lstm",
            ModelKind::Mlp => "mlp",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn is_neural(self) -> bool {
        self != ModelKind::Baseline
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown model kind {s:?}")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A trip with its region encoding, ready for sampling partial queries.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTrip {
    pub id: String,
    pub points: Vec<GeoPoint>,
    pub regions: Vec<RegionId>,
    pub meta: TripMetadata,
    pub duration_s: i64,
    pub timestamps: Vec<i64>,
}

impl EncodedTrip {
    pub fn new(trip: &Trajectory, partition: &SpacePartition) -> Self {
        Self {
            id: trip.id.clone(),
            points: trip.points.clone(),
            regions: partition.encode_trajectory(trip),
            meta: trip.meta,
            duration_s: trip.duration_s(),
            timestamps: trip.timestamps(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The true destination, the last point.
    pub fn destination(&self) -> GeoPoint {
        *self.points.last().expect("encoded trips are non-empty")
    }

    /// Query over points `start..end`.
    pub fn window(&self, start: usize, end: usize) -> Query<'_> {
        Query {
            points: &self.points[start..end],
            regions: &self.regions[start..end],
            meta: &self.meta,
        }
    }

    /// Query over the first `n` points.
    pub fn prefix(&self, n: usize) -> Query<'_> {
        self.window(0, n)
    }
}

/// Model input: a (partial) trip as points and regions plus its metadata.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub points: &'a [GeoPoint],
    pub regions: &'a [RegionId],
    pub meta: &'a TripMetadata,
}

/// Destination scores over all regions, the score-weighted destination and
/// the best regions by score.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub y_gps_hat: GeoPoint,
    pub top_n: Vec<(RegionId, f64)>,
}

/// Regions kept in [`Prediction::top_n`].
pub const TOP_N: usize = 10;

impl Prediction {
    pub fn from_scores(scores: Vec<f64>, centroids: &[GeoPoint]) -> Result<Self, ModelError> {
        if scores.len() != centroids.len() {
            return Err(ModelError::RegionCountMismatch {
                expected: scores.len(),
                found: centroids.len(),
            });
        }
        let y_gps_hat = weighted_mean_point(centroids, &scores)
            .map_err(|e| ModelError::Checkpoint(format!("scores are not a distribution: {e}")))?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        // descending score, ascending id among equal scores
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let top_n = order
            .into_iter()
            .take(TOP_N)
            .map(|i| (RegionId::from_index(i), scores[i]))
            .collect();
        Ok(Self {
            scores,
            y_gps_hat,
            top_n,
        })
    }

    pub fn one_hot(index: usize, centroids: &[GeoPoint]) -> Result<Self, ModelError> {
        let mut scores = vec![0.0; centroids.len()];
        scores[index] = 1.0;
        Self::from_scores(scores, centroids)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "top_n": self.top_n.iter().map(|(r, s)| serde_json::json!({"region": r.0, "score": s})).collect::<Vec<_>>(),
            "dest": [self.y_gps_hat.lat, self.y_gps_hat.lon],
        })
    }
}

/// Anything that maps a query to a destination distribution.
pub trait Predictor: Sync {
    fn kind(&self) -> ModelKind;

    fn n_regions(&self) -> usize;

    fn predict(&self, query: &Query<'_>, centroids: &[GeoPoint]) -> Result<Prediction, ModelError>;
}

/// Either kind of stored model.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum AnyModel {
    Neural(NeuralModel),
    Baseline(Baseline),
}

impl AnyModel {
    pub fn as_predictor(&self) -> &dyn Predictor {
        match self {
            AnyModel::Neural(m) => m,
            AnyModel::Baseline(b) => b,
        }
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        match self {
            AnyModel::Neural(m) => m.to_json(),
            AnyModel::Baseline(b) => b.to_json(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        match v.get("kind").and_then(|k| k.as_str()) {
            Some("baseline") => Ok(AnyModel::Baseline(Baseline::from_json(text)?)),
            Some(_) => Ok(AnyModel::Neural(NeuralModel::from_json(text)?)),
            None => Err(ModelError::Checkpoint("missing \"kind\"".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn check_regions(regions: &[RegionId], n_regions: usize) -> Result<(), ModelError> {
    if regions.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if let Some(bad) = regions.iter().find(|r| r.0 == 0 || r.index() >= n_regions) {
        return Err(ModelError::RegionOutOfRange {
            id: bad.0,
            n_regions,
        });
    }
    Ok(())
}
