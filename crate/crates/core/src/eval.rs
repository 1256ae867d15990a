//! Evaluation protocols: mean errors over sampled partial trips,
//! completion curves, error histograms and time-window snippets.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::geo::{haversine, GeoPoint};
use crate::models::{EncodedTrip, ModelError, Predictor, Query};
use crate::train::{loss_e2, sample_partial};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty snippet: window length must be positive")]
    EmptySnippet,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    /// Completion levels in percent.
    pub completion_levels: Vec<u32>,
    pub histogram_bin_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            completion_levels: (1..=19).map(|k| 5 * k).collect(),
            histogram_bin_m: 100.0,
        }
    }
}

/// Counts of errors in bins `[k * bin_m, (k + 1) * bin_m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_m: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn from_errors(errors: &[f64], bin_m: f64) -> Self {
        let mut counts = Vec::new();
        for &e in errors {
            let k = (e / bin_m).floor() as usize;
            if counts.len() <= k {
                counts.resize(k + 1, 0);
            }
            counts[k] += 1;
        }
        Self { bin_m, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionPoint {
    pub percent: u32,
    pub count: usize,
    pub e1_m: f64,
    pub e2_m: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// Trips evaluated (those with at least 3 points).
    pub count: usize,
    #[serde(rename = "E1_m")]
    pub e1_m: f64,
    #[serde(rename = "E2_m")]
    pub e2_m: f64,
    pub histogram: Histogram,
    pub completion: Vec<CompletionPoint>,
}

impl EvalReport {
    pub fn completion_at(&self, percent: u32) -> Option<&CompletionPoint> {
        self.completion.iter().find(|c| c.percent == percent)
    }

    /// `percent,count,E1_m,E2_m`
    pub fn write_completion_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["percent", "count", "E1_m", "E2_m"])?;
        for c in &self.completion {
            out.write_record([
                c.percent.to_string(),
                c.count.to_string(),
                c.e1_m.to_string(),
                c.e2_m.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// `completion,bin_start_m,count`, with `completion` = `all` for the
    /// sampled partials.
    pub fn write_histogram_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["completion", "bin_start_m", "count"])?;
        let mut rows = |label: String, h: &Histogram| -> Result<(), csv::Error> {
            for (k, c) in h.counts.iter().enumerate() {
                out.write_record([
                    label.clone(),
                    (k as f64 * h.bin_m).to_string(),
                    c.to_string(),
                ])?;
            }
            Ok(())
        };
        rows("all".into(), &self.histogram)?;
        for c in &self.completion {
            rows(c.percent.to_string(), &c.histogram)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One prediction's errors.
#[derive(Debug, Clone, Copy)]
struct Errors {
    e1: f64,
    e2: f64,
}

fn score(
    model: &dyn Predictor,
    q: &Query<'_>,
    truth: GeoPoint,
    centroids: &[GeoPoint],
) -> Result<Errors, ModelError> {
    let p = model.predict(q, centroids)?;
    Ok(Errors {
        e1: haversine(p.y_gps_hat, truth),
        e2: loss_e2(&p.scores, centroids, truth),
    })
}

fn summarize(errors: &[Errors]) -> (f64, f64) {
    if errors.is_empty() {
        return (0.0, 0.0);
    }
    let n = errors.len() as f64;
    (
        errors.iter().map(|e| e.e1).sum::<f64>() / n,
        errors.iter().map(|e| e.e2).sum::<f64>() / n,
    )
}

/// Prefix length for a completion level: `ceil(p * N)`, at least 2 and at
/// most `N - 1` so the destination is never part of the input.
pub fn completion_prefix(n: usize, percent: u32) -> usize {
    let k = (f64::from(percent) / 100.0 * n as f64).ceil() as usize;
    k.clamp(2, n - 1)
}

/// Seeded partial lengths for every trip with at least 3 points, in order.
pub fn sampled_partials(trips: &[EncodedTrip], seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trips
        .iter()
        .enumerate()
        .filter_map(|(i, t)| sample_partial(t.len(), &mut rng).map(|n_p| (i, n_p)))
        .collect()
}

/// Mean E1 / E2 over one seeded partial per trip, plus completion curves
/// and 100 m error histograms.
pub fn evaluate(
    model: &dyn Predictor,
    trips: &[EncodedTrip],
    centroids: &[GeoPoint],
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    let partials = sampled_partials(trips, cfg.seed);
    let errors = exec
        .map(&partials, |&(i, n_p)| {
            let t = &trips[i];
            score(model, &t.prefix(n_p), t.destination(), centroids)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let (e1_m, e2_m) = summarize(&errors);
    let e1s: Vec<f64> = errors.iter().map(|e| e.e1).collect();

    let eligible: Vec<&EncodedTrip> = trips.iter().filter(|t| t.len() >= 3).collect();
    let mut completion = Vec::with_capacity(cfg.completion_levels.len());
    for &percent in &cfg.completion_levels {
        let errs = exec
            .map(&eligible, |t| {
                score(
                    model,
                    &t.prefix(completion_prefix(t.len(), percent)),
                    t.destination(),
                    centroids,
                )
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let (e1, e2) = summarize(&errs);
        let level_e1: Vec<f64> = errs.iter().map(|e| e.e1).collect();
        completion.push(CompletionPoint {
            percent,
            count: errs.len(),
            e1_m: e1,
            e2_m: e2,
            histogram: Histogram::from_errors(&level_e1, cfg.histogram_bin_m),
        });
    }
    Ok(EvalReport {
        model: model.kind().to_string(),
        count: errors.len(),
        e1_m,
        e2_m,
        histogram: Histogram::from_errors(&e1s, cfg.histogram_bin_m),
        completion,
    })
}

/// Snippet window `start..end` (exclusive) for a trip: a random start whose
/// window of `t_seconds` fits before the final point. When the window is
/// at least as long as the trip without its final point, that whole span
/// is used.
pub fn snippet_window<R: Rng + ?Sized>(
    trip: &EncodedTrip,
    t_seconds: i64,
    rng: &mut R,
) -> (usize, usize) {
    let ts = &trip.timestamps;
    let last_input = trip.len() - 2;
    if t_seconds >= ts[last_input] - ts[0] {
        return (0, last_input + 1);
    }
    let starts: Vec<usize> = (0..=last_input)
        .filter(|&s| ts[s] + t_seconds <= ts[last_input])
        .collect();
    let s = starts[rng.random_range(0..starts.len())];
    let mut e = s;
    while e < last_input && ts[e + 1] <= ts[s] + t_seconds {
        e += 1;
    }
    // at least two points so that every model has a heading
    (s, e.max(s + 1) + 1)
}

/// Errors for queries made of a random `t_seconds` window of each trip.
pub fn snippet_evaluate(
    model: &dyn Predictor,
    trips: &[EncodedTrip],
    centroids: &[GeoPoint],
    t_seconds: i64,
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    if t_seconds <= 0 {
        return Err(EvalError::EmptySnippet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let windows: Vec<(usize, (usize, usize))> = trips
        .iter()
        .enumerate()
        .filter(|(_, t)| t.len() >= 3)
        .map(|(i, t)| (i, snippet_window(t, t_seconds, &mut rng)))
        .collect();
    let errors = exec
        .map(&windows, |&(i, (s, e))| {
            let t = &trips[i];
            score(model, &t.window(s, e), t.destination(), centroids)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let (e1_m, e2_m) = summarize(&errors);
    let e1s: Vec<f64> = errors.iter().map(|e| e.e1).collect();
    Ok(EvalReport {
        model: model.kind().to_string(),
        count: errors.len(),
        e1_m,
        e2_m,
        histogram: Histogram::from_errors(&e1s, cfg.histogram_bin_m),
        completion: Vec::new(),
    })
}

/// `TRIP_ID,LATITUDE,LONGITUDE` rows: one point prediction per trip with
/// at least 3 points, from the same seeded partials as [`evaluate`].
pub fn write_kaggle_csv<W: Write>(
    model: &dyn Predictor,
    trips: &[EncodedTrip],
    centroids: &[GeoPoint],
    seed: u64,
    exec: Execution,
    w: W,
) -> Result<usize, EvalError> {
    let partials = sampled_partials(trips, seed);
    let preds = exec
        .map(&partials, |&(i, n_p)| {
            model.predict(&trips[i].prefix(n_p), centroids)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["TRIP_ID", "LATITUDE", "LONGITUDE"])?;
    for ((i, _), p) in partials.iter().zip(&preds) {
        out.write_record([
            trips[*i].id.clone(),
            p.y_gps_hat.lat.to_string(),
            p.y_gps_hat.lon.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(preds.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::TripMetadata;
    use crate::models::{ModelKind, Prediction};
    use crate::partition::RegionId;

    /// Predicts the region of the trip's true destination, which it reads
    /// from a lookup keyed by the first region.
    struct Oracle {
        dest_of_first: Vec<usize>,
    }

    impl Predictor for Oracle {
        fn kind(&self) -> ModelKind {
            ModelKind::Baseline
        }

        fn n_regions(&self) -> usize {
            self.dest_of_first.len()
        }

        fn predict(&self, q: &Query<'_>, c: &[GeoPoint]) -> Result<Prediction, ModelError> {
            Prediction::one_hot(self.dest_of_first[q.regions[0].index()], c)
        }
    }

    fn trip(id: usize, regions: &[usize], c: &[GeoPoint]) -> EncodedTrip {
        EncodedTrip {
            id: id.to_string(),
            points: regions.iter().map(|&r| c[r]).collect(),
            regions: regions.iter().map(|&r| RegionId::from_index(r)).collect(),
            meta: TripMetadata::default(),
            duration_s: 15 * (regions.len() as i64 - 1),
            timestamps: (0..regions.len() as i64).map(|k| 15 * k).collect(),
        }
    }

    fn setup() -> (Vec<EncodedTrip>, Vec<GeoPoint>, Oracle) {
        let c: Vec<GeoPoint> = (0..3)
            .map(|i| GeoPoint::new(41.1 + 0.01 * i as f64, -8.6))
            .collect();
        let trips = vec![
            trip(0, &[0, 1, 1, 2], &c),
            trip(1, &[1, 0, 0], &c),
            trip(2, &[2, 2, 1, 0, 0, 0, 1], &c),
            trip(3, &[0, 2], &c),
        ];
        let oracle = Oracle {
            dest_of_first: vec![2, 0, 1],
        };
        (trips, c, oracle)
    }

    #[test]
    fn perfect_predictor_has_zero_error() {
        let (trips, c, oracle) = setup();
        let r = evaluate(
            &oracle,
            &trips,
            &c,
            &EvalConfig::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(r.count, 3);
        assert_eq!((r.e1_m, r.e2_m), (0.0, 0.0));
        assert_eq!(r.completion.len(), 19);
        assert!(r.completion.iter().all(|p| p.e1_m == 0.0 && p.count == 3));
        assert_eq!(r.histogram.counts, vec![3]);
    }

    #[test]
    fn completion_prefix_bounds() {
        assert_eq!(completion_prefix(3, 5), 2);
        assert_eq!(completion_prefix(3, 95), 2);
        assert_eq!(completion_prefix(100, 20), 20);
        assert_eq!(completion_prefix(10, 95), 9);
        assert_eq!(completion_prefix(7, 50), 4);
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::from_errors(&[0.0, 99.9, 100.0, 350.0], 100.0);
        assert_eq!(h.counts, vec![2, 1, 0, 1]);
        assert_eq!(h.total(), 4);
    }

    #[test]
    fn snippet_rules() {
        let (trips, c, oracle) = setup();
        assert!(matches!(
            snippet_evaluate(
                &oracle,
                &trips,
                &c,
                0,
                &EvalConfig::default(),
                Execution::Sequential
            ),
            Err(EvalError::EmptySnippet)
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // 7 points over 90 s; without the final point the span is 75 s
        assert_eq!(snippet_window(&trips[2], 75, &mut rng), (0, 6));
        assert_eq!(snippet_window(&trips[2], 10_000, &mut rng), (0, 6));
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, e) = snippet_window(&trips[2], 30, &mut rng);
            assert!(s < e && e <= 6);
            let ts = &trips[2].timestamps;
            assert!(ts[e - 1] - ts[s] <= 30);
            seen.insert(s);
        }
        assert!(seen.len() > 1);
    }

    #[test]
    fn kaggle_rows() {
        let (trips, c, oracle) = setup();
        let mut buf = Vec::new();
        let n = write_kaggle_csv(&oracle, &trips, &c, 1, Execution::Sequential, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(n, 3);
        assert_eq!(text.lines().count(), 4);
        let first = format!("TRIP_ID,LATITUDE,LONGITUDE\n0,{},{}\n", c[2].lat, c[2].lon);
        assert!(text.starts_with(&first), "{text}");
    }

    #[test]
    fn report_is_deterministic_across_execution_modes() {
        let (trips, c, oracle) = setup();
        let cfg = EvalConfig::default();
        let a = evaluate(&oracle, &trips, &c, &cfg, Execution::Sequential).unwrap();
        let b = evaluate(&oracle, &trips, &c, &cfg, Execution::Parallel).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
