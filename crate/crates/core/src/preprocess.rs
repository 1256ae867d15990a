//! Four-step trip cleaning:
//!
//! 1. drop trips shorter than `min_duration_s`, longer than `max_duration_s`
//!    or with a single point;
//! 2. smooth points whose implied speed exceeds `speed_limit_kmh` with a
//!    3-point moving median (at most two passes, no trip is removed);
//! 3. drop trips with any point outside the analysis bounding box;
//! 4. drop roundtrips whose roundtrip factor (path length over beeline)
//!    exceeds a fixed or percentile threshold.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::exec::Execution;
use crate::geo::{haversine, path_length, GeoPoint};
use crate::ingest::Trajectory;
use crate::partition::BoundingBox;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("roundtrip factor needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("no finite roundtrip factor to take a percentile of")]
    NoFiniteTau,
}

/// Threshold for the roundtrip factor: a fixed value or a nearest-rank
/// percentile of the factors observed at step (4).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauThreshold {
    Fixed(f64),
    Percentile(f64),
}

impl fmt::Display for TauThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauThreshold::Fixed(v) => write!(f, "{v}"),
            TauThreshold::Percentile(p) => write!(f, "p{p}"),
        }
    }
}

impl FromStr for TauThreshold {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PreprocessError::InvalidConfig(format!("bad tau threshold {s:?}"));
        let s = s.trim();
        if let Some(p) = s.strip_prefix('p') {
            let p: f64 = p.parse().map_err(|_| bad())?;
            Ok(TauThreshold::Percentile(p))
        } else {
            Ok(TauThreshold::Fixed(s.parse().map_err(|_| bad())?))
        }
    }
}

impl Serialize for TauThreshold {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TauThreshold::Fixed(v) => s.serialize_f64(*v),
            TauThreshold::Percentile(_) => s.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for TauThreshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(TauThreshold::Fixed(v)),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_duration_s: i64,
    pub max_duration_s: i64,
    pub speed_limit_kmh: f64,
    /// `[min_lat, max_lat, min_lon, max_lon]`
    pub bbox: [f64; 4],
    pub tau_threshold: TauThreshold,
}

impl PreprocessConfig {
    pub fn porto() -> Self {
        Self {
            min_duration_s: 120,
            max_duration_s: 7200,
            speed_limit_kmh: 240.0,
            bbox: [41.0, 41.35, -8.75, -8.45],
            tau_threshold: TauThreshold::Percentile(95.0),
        }
    }

    pub fn san_francisco() -> Self {
        Self {
            bbox: [37.6, 37.85, -122.55, -122.3],
            tau_threshold: TauThreshold::Fixed(2.65),
            ..Self::porto()
        }
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: &str| Err(PreprocessError::InvalidConfig(m.to_string()));
        if !(0 < self.min_duration_s && self.min_duration_s < self.max_duration_s) {
            return bad("need 0 < min_duration_s < max_duration_s");
        }
        if !(self.speed_limit_kmh > 0.0) {
            return bad("speed_limit_kmh must be positive");
        }
        if !(self.bbox[0] < self.bbox[1] && self.bbox[2] < self.bbox[3]) {
            return bad("bbox must be [min_lat, max_lat, min_lon, max_lon]");
        }
        match self.tau_threshold {
            TauThreshold::Fixed(t) if !(t > 1.0) => bad("tau threshold must exceed 1"),
            TauThreshold::Percentile(p) if !(p > 0.0 && p <= 100.0) => {
                bad("percentile must be in (0, 100]")
            }
            _ => Ok(()),
        }
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::porto()
    }
}

/// Step (1).
pub fn filter_duration(trips: Vec<Trajectory>, cfg: &PreprocessConfig) -> Vec<Trajectory> {
    trips
        .into_iter()
        .filter(|t| {
            let d = t.duration_s();
            t.len() > 1 && d >= cfg.min_duration_s && d <= cfg.max_duration_s
        })
        .collect()
}

/// Speed in km/h between two timed points; infinite for a jump in zero time.
fn implied_speed_kmh(a: GeoPoint, b: GeoPoint, dt_s: i64) -> f64 {
    let d = haversine(a, b);
    if d == 0.0 {
        0.0
    } else if dt_s <= 0 {
        f64::INFINITY
    } else {
        d / dt_s as f64 * 3.6
    }
}

fn speed_violations(points: &[GeoPoint], times: &[i64], limit: f64) -> Vec<bool> {
    let n = points.len();
    let fast: Vec<bool> = (1..n)
        .map(|i| implied_speed_kmh(points[i - 1], points[i], times[i] - times[i - 1]) > limit)
        .collect();
    (0..n)
        .map(|i| (i > 0 && fast[i - 1]) || (i + 1 < n && fast[i]))
        .collect()
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Number of consecutive pairs whose implied speed exceeds the limit.
pub fn count_speed_violations(trip: &Trajectory, limit_kmh: f64) -> usize {
    let times = trip.timestamps();
    (1..trip.len())
        .filter(|&i| {
            implied_speed_kmh(trip.points[i - 1], trip.points[i], times[i] - times[i - 1])
                > limit_kmh
        })
        .count()
}

/// Step (2): every point with an incoming or outgoing implied speed above the
/// limit takes the per-coordinate median of its window `[n-1, n, n+1]`
/// (two points at the ends). At most two passes; the point count never changes.
pub fn smooth_speed_outliers(mut trip: Trajectory, cfg: &PreprocessConfig) -> Trajectory {
    if trip.len() < 2 {
        return trip;
    }
    let times = trip.timestamps();
    for _ in 0..2 {
        let flagged = speed_violations(&trip.points, &times, cfg.speed_limit_kmh);
        if !flagged.iter().any(|&f| f) {
            break;
        }
        let before = trip.points.clone();
        let n = before.len();
        for (i, _) in flagged.iter().enumerate().filter(|(_, &f)| f) {
            let window = &before[i.saturating_sub(1)..(i + 2).min(n)];
            let mut lats: Vec<f64> = window.iter().map(|p| p.lat).collect();
            let mut lons: Vec<f64> = window.iter().map(|p| p.lon).collect();
            trip.points[i] = GeoPoint::new(median(&mut lats), median(&mut lons));
        }
    }
    trip
}

/// Step (3): the whole trip goes if any point lies outside the box.
pub fn filter_bbox(trips: Vec<Trajectory>, cfg: &PreprocessConfig) -> Vec<Trajectory> {
    let bbox = cfg.bounding_box();
    trips
        .into_iter()
        .filter(|t| t.points.iter().all(|&p| bbox.contains(p)))
        .collect()
}

/// Path length over beeline. Infinite when start and end coincide.
pub fn roundtrip_factor(trip: &Trajectory) -> Result<f64, PreprocessError> {
    if trip.len() < 2 {
        return Err(PreprocessError::TooFewPoints(trip.len()));
    }
    let beeline = haversine(trip.points[0], trip.points[trip.len() - 1]);
    let length = path_length(&trip.points).expect("non-empty");
    Ok(if beeline == 0.0 {
        f64::INFINITY
    } else {
        length / beeline
    })
}

/// Nearest-rank percentile of the finite factors.
pub fn tau_percentile_threshold(taus: &[f64], percentile: f64) -> Result<f64, PreprocessError> {
    let mut finite: Vec<f64> = taus.iter().copied().filter(|t| t.is_finite()).collect();
    if finite.is_empty() {
        return Err(PreprocessError::NoFiniteTau);
    }
    finite.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * finite.len() as f64).ceil() as usize;
    Ok(finite[rank.clamp(1, finite.len()) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepCount {
    pub step: String,
    pub kept_count: usize,
    pub kept_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub rows: Vec<StepCount>,
    /// Roundtrip threshold applied in step (4).
    pub tau_threshold: f64,
    /// Points moved by the speed smoothing.
    pub smoothed_points: usize,
}

impl PipelineReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "kept_count", "kept_percent"])?;
        for r in &self.rows {
            out.write_record([
                r.step.clone(),
                r.kept_count.to_string(),
                format!("{:.2}", r.kept_percent),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn final_count(&self) -> usize {
        self.rows.last().map_or(0, |r| r.kept_count)
    }
}

/// Runs steps (1) to (4) in order. Output order follows trip id.
pub fn run_pipeline(
    trips: Vec<Trajectory>,
    cfg: &PreprocessConfig,
    exec: Execution,
) -> Result<(Vec<Trajectory>, PipelineReport), PreprocessError> {
    cfg.validate()?;
    let mut trips = trips;
    trips.sort_by(|a, b| a.id.cmp(&b.id));
    let total = trips.len();
    let mut rows = Vec::new();
    let mut record = |step: &str, kept: usize| {
        let kept_percent = if total == 0 {
            0.0
        } else {
            100.0 * kept as f64 / total as f64
        };
        rows.push(StepCount {
            step: step.to_string(),
            kept_count: kept,
            kept_percent,
        });
    };
    record("input", total);

    let trips = filter_duration(trips, cfg);
    record("1", trips.len());

    let smoothed = exec.map_owned(trips, |t| {
        let before = t.points.clone();
        let after = smooth_speed_outliers(t, cfg);
        let moved = before
            .iter()
            .zip(&after.points)
            .filter(|(a, b)| a != b)
            .count();
        (after, moved)
    });
    let smoothed_points = smoothed.iter().map(|(_, m)| m).sum();
    let trips: Vec<Trajectory> = smoothed.into_iter().map(|(t, _)| t).collect();
    record("2", trips.len());

    let trips = filter_bbox(trips, cfg);
    record("3", trips.len());

    let taus: Vec<f64> = exec.map(&trips, |t| roundtrip_factor(t).unwrap_or(f64::INFINITY));
    let threshold = match cfg.tau_threshold {
        TauThreshold::Fixed(v) => v,
        TauThreshold::Percentile(p) if trips.is_empty() => p,
        TauThreshold::Percentile(p) => tau_percentile_threshold(&taus, p)?,
    };
    let trips: Vec<Trajectory> = trips
        .into_iter()
        .zip(&taus)
        .filter(|(_, &tau)| tau.is_finite() && tau <= threshold)
        .map(|(t, _)| t)
        .collect();
    record("4", trips.len());

    Ok((
        trips,
        PipelineReport {
            rows,
            tau_threshold: threshold,
            smoothed_points,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Timing, TripMetadata};

    fn trip(points: Vec<GeoPoint>) -> Trajectory {
        Trajectory {
            id: "t".into(),
            start_time: 0,
            points,
            timing: Timing::Interval(15),
            meta: TripMetadata::default(),
        }
    }

    fn straight(n: usize) -> Vec<GeoPoint> {
        // about 111 m per step along the equator, 27 km/h at 15 s
        (0..n)
            .map(|i| GeoPoint::new(0.0, i as f64 * 0.001))
            .collect()
    }

    #[test]
    fn duration_boundaries() {
        let cfg = PreprocessConfig::porto();
        let kept = filter_duration(
            vec![
                trip(straight(1)),
                trip(straight(9)),
                trip(straight(8)),
                trip(straight(482)),
            ],
            &cfg,
        );
        // 9 points = 120 s kept, 8 points = 105 s dropped, 482 points = 7215 s dropped
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].len(), 9);
    }

    #[test]
    fn clean_trip_is_unchanged() {
        let t = trip(straight(10));
        assert_eq!(
            smooth_speed_outliers(t.clone(), &PreprocessConfig::porto()),
            t
        );
    }

    #[test]
    fn teleport_is_smoothed() {
        let mut pts = straight(10);
        // roughly 10 km north
        pts[5].lat += 0.09;
        let t = trip(pts);
        let cfg = PreprocessConfig::porto();
        assert!(count_speed_violations(&t, cfg.speed_limit_kmh) > 0);
        let s = smooth_speed_outliers(t, &cfg);
        assert_eq!(s.len(), 10);
        assert_eq!(s.points[5], GeoPoint::new(0.0, 0.005));
        assert_eq!(count_speed_violations(&s, cfg.speed_limit_kmh), 0);
    }

    #[test]
    fn bbox_is_whole_trip() {
        let cfg = PreprocessConfig {
            bbox: [-1.0, 1.0, -1.0, 1.0],
            ..PreprocessConfig::porto()
        };
        let inside = trip(straight(5));
        let mut outside = straight(5);
        outside[2].lat = 1.0 + 1e-6;
        assert_eq!(filter_bbox(vec![inside, trip(outside)], &cfg).len(), 1);
    }

    #[test]
    fn roundtrip_factor_cases() {
        assert!((roundtrip_factor(&trip(straight(3))).unwrap() - 1.0).abs() < 1e-9);
        let out_and_back = vec![
            GeoPoint::new(0.0, 0.0),
            GeoPoint::new(0.0, 0.01),
            GeoPoint::new(0.0, 0.0),
        ];
        assert_eq!(
            roundtrip_factor(&trip(out_and_back)).unwrap(),
            f64::INFINITY
        );
        assert_eq!(
            roundtrip_factor(&trip(straight(1))),
            Err(PreprocessError::TooFewPoints(1))
        );
    }

    #[test]
    fn percentile_cases() {
        let taus: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(tau_percentile_threshold(&taus, 95.0).unwrap(), 95.0);
        assert_eq!(tau_percentile_threshold(&[2.5; 7], 95.0).unwrap(), 2.5);
        assert_eq!(
            tau_percentile_threshold(&[f64::INFINITY], 95.0),
            Err(PreprocessError::NoFiniteTau)
        );
    }

    #[test]
    fn tau_threshold_parsing() {
        assert_eq!(
            "p95".parse::<TauThreshold>().unwrap(),
            TauThreshold::Percentile(95.0)
        );
        assert_eq!(
            "2.65".parse::<TauThreshold>().unwrap(),
            TauThreshold::Fixed(2.65)
        );
        assert!("x".parse::<TauThreshold>().is_err());
    }

    #[test]
    fn pipeline_counts_are_monotone() {
        let mut trips = Vec::new();
        for i in 0..30 {
            let mut t = trip(straight(5 + i));
            t.id = format!("{i:03}");
            trips.push(t);
        }
        let cfg = PreprocessConfig {
            bbox: [-1.0, 1.0, -1.0, 0.02],
            tau_threshold: TauThreshold::Fixed(3.5),
            ..PreprocessConfig::porto()
        };
        let (kept, report) = run_pipeline(trips.clone(), &cfg, Execution::Sequential).unwrap();
        let counts: Vec<usize> = report.rows.iter().map(|r| r.kept_count).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(counts[1], counts[2]);
        assert_eq!(kept.len(), report.final_count());
        let (_, again) = run_pipeline(trips, &cfg, Execution::Parallel).unwrap();
        assert_eq!(again, report);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("step,kept_count,kept_percent\ninput,30,100.00\n"));
    }
}
