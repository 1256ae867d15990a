use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelKind, Prediction, Predictor, Query};
use crate::geo::{haversine, point_to_ray_distance, GeoPoint};
use crate::partition::RegionId;

/// Geometric baseline: among the `k` regions most frequent as trip
/// destinations, pick the one whose centroid lies closest to the ray from
/// the first through the last known point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baseline {
    kind: ModelKind,
    n_regions: usize,
    /// Candidate regions, most frequent destination first.
    candidates: Vec<RegionId>,
}

impl Baseline {
    /// Ranks regions by how often they hold a trip's last point. Equal
    /// counts rank the smaller id first.
    pub fn fit<I>(destinations: I, n_regions: usize, k: usize) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = RegionId>,
    {
        let mut counts: HashMap<RegionId, usize> = HashMap::new();
        for r in destinations {
            *counts.entry(r).or_default() += 1;
        }
        let mut ranked: Vec<(RegionId, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let candidates: Vec<RegionId> = ranked.into_iter().take(k).map(|(r, _)| r).collect();
        Self::with_candidates(candidates, n_regions)
    }

    pub fn with_candidates(
        candidates: Vec<RegionId>,
        n_regions: usize,
    ) -> Result<Self, ModelError> {
        if candidates.is_empty() {
            return Err(ModelError::NoCandidates);
        }
        super::check_regions(&candidates, n_regions)?;
        Ok(Self {
            kind: ModelKind::Baseline,
            n_regions,
            candidates,
        })
    }

    pub fn candidates(&self) -> &[RegionId] {
        &self.candidates
    }

    /// The chosen candidate for a partial trip given as points.
    pub fn choose(
        &self,
        points: &[GeoPoint],
        centroids: &[GeoPoint],
    ) -> Result<RegionId, ModelError> {
        if points.len() < 2 {
            return Err(ModelError::TooFewPoints(points.len()));
        }
        let first = points[0];
        let last = points[points.len() - 1];
        let mut best: Option<(f64, f64, RegionId)> = None;
        for &r in &self.candidates {
            let c = centroids[r.index()];
            let to_last = haversine(last, c);
            // no heading when the trip has not moved: nearest candidate wins
            let ray = point_to_ray_distance(first, last, c).unwrap_or(to_last);
            let better = match best {
                None => true,
                Some((d, t, _)) => ray < d || (ray == d && to_last < t),
            };
            if better {
                best = Some((ray, to_last, r));
            }
        }
        Ok(best.expect("candidates are non-empty").2)
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let b: Baseline = serde_json::from_str(text)?;
        if b.kind != ModelKind::Baseline {
            return Err(ModelError::Checkpoint(format!(
                "expected a baseline, found {}",
                b.kind
            )));
        }
        Self::with_candidates(b.candidates, b.n_regions)
    }
}

impl Predictor for Baseline {
    fn kind(&self) -> ModelKind {
        ModelKind::Baseline
    }

    fn n_regions(&self) -> usize {
        self.n_regions
    }

    fn predict(&self, query: &Query<'_>, centroids: &[GeoPoint]) -> Result<Prediction, ModelError> {
        if centroids.len() != self.n_regions {
            return Err(ModelError::RegionCountMismatch {
                expected: self.n_regions,
                found: centroids.len(),
            });
        }
        let r = self.choose(query.points, centroids)?;
        Prediction::one_hot(r.index(), centroids)
    }
}
