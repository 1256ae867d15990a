//! Trip data: the in-memory trajectory model, per-trip metadata, dataset
//! readers, the synthetic city generator and the train/validation/test split.

mod crawdad;
mod porto;
mod split;
mod store;
mod synth;
mod weather;

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geo::GeoPoint;

pub use crawdad::parse_crawdad_sf;
pub use porto::{parse_porto_csv, parse_porto_reader, PORTO_HEADER};
pub use split::{split_dataset, DatasetSplit, SplitIds};
pub use store::{read_trips_jsonl, write_trips_jsonl};
pub use synth::{generate_synthetic_city, SynthConfig, SyntheticCity};
pub use weather::{attach_weather, PrecipitationBin, TemperatureBin, WeatherTable};

/// Sampling interval of the Porto taxi data.
pub const PORTO_INTERVAL_S: u32 = 15;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing or invalid header: expected column {0}")]
    MissingHeader(String),
    #[error("too few trips to split: {0} (need at least 20)")]
    TooFewTrips(usize),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Row accounting for a parse: `parsed + rejected + dropped_missing == rows`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub rows: usize,
    pub parsed: usize,
    pub rejected: usize,
    pub dropped_missing: usize,
}

/// Per-point timing of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum Timing {
    /// Point `n` (0-based) was recorded at `start_time + n * interval`.
    Interval(u32),
    /// Recorded unix timestamps, one per point, non-decreasing.
    Recorded(Vec<i64>),
}

/// A trip: an ordered sequence of GPS observations with timing and metadata.
/// The destination is the last point.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub start_time: i64,
    pub points: Vec<GeoPoint>,
    pub timing: Timing,
    pub meta: TripMetadata,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn timestamp(&self, n: usize) -> i64 {
        match &self.timing {
            Timing::Interval(dt) => self.start_time + n as i64 * i64::from(*dt),
            Timing::Recorded(ts) => ts[n],
        }
    }

    pub fn timestamps(&self) -> Vec<i64> {
        (0..self.len()).map(|n| self.timestamp(n)).collect()
    }

    /// Seconds between first and last observation; 0 for fewer than 2 points.
    pub fn duration_s(&self) -> i64 {
        if self.len() < 2 {
            0
        } else {
            self.timestamp(self.len() - 1) - self.timestamp(0)
        }
    }

    pub fn destination(&self) -> Option<GeoPoint> {
        self.points.last().copied()
    }

    /// Sub-trajectory of points `start..end`, keeping absolute timestamps.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        let timing = match &self.timing {
            Timing::Interval(dt) => Timing::Interval(*dt),
            Timing::Recorded(ts) => Timing::Recorded(ts[start..end].to_vec()),
        };
        Trajectory {
            id: self.id.clone(),
            start_time: self.timestamp(start),
            points: self.points[start..end].to_vec(),
            timing,
            meta: self.meta,
        }
    }

    /// The first `n` points.
    pub fn prefix(&self, n: usize) -> Trajectory {
        self.slice(0, n)
    }
}

/// Number of quarter-hour bins in a day.
pub const TIME_OF_DAY_BINS: usize = 96;
pub const DAY_OF_WEEK_BINS: usize = 7;

/// Metadata attributes in the fixed order the models consume them.
pub const META_ATTRIBUTES: [&str; 4] =
    ["time_of_day", "day_of_week", "temperature", "precipitation"];

/// Vocabulary size per metadata attribute, in [`META_ATTRIBUTES`] order.
pub const META_VOCAB: [usize; 4] = [
    TIME_OF_DAY_BINS,
    DAY_OF_WEEK_BINS,
    TemperatureBin::VOCAB,
    PrecipitationBin::VOCAB,
];

/// Trip-constant context: time of day, day of week, temperature and
/// precipitation, each discretized for an embedding lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripMetadata {
    #[serde(deserialize_with = "bounded::<_, 96>")]
    pub time_of_day: u8,
    #[serde(deserialize_with = "bounded::<_, 7>")]
    pub day_of_week: u8,
    pub temperature: TemperatureBin,
    pub precipitation: PrecipitationBin,
}

fn bounded<'de, D: Deserializer<'de>, const N: u8>(d: D) -> Result<u8, D::Error> {
    let v = u8::deserialize(d)?;
    if v >= N {
        return Err(serde::de::Error::custom(format!(
            "bin {v} out of range 0..{N}"
        )));
    }
    Ok(v)
}

impl Default for TripMetadata {
    fn default() -> Self {
        Self {
            time_of_day: 0,
            day_of_week: 0,
            temperature: TemperatureBin::UNKNOWN,
            precipitation: PrecipitationBin::Unknown,
        }
    }
}

impl TripMetadata {
    /// Calendar bins for a unix start time shifted into local time by a
    /// fixed UTC offset. Weather bins are left unknown.
    pub fn from_start_time(unix_s: i64, utc_offset_s: i32) -> Self {
        let local = local_datetime(unix_s, utc_offset_s);
        Self {
            time_of_day: ((local.hour() * 60 + local.minute()) / 15) as u8,
            day_of_week: local.weekday().num_days_from_monday() as u8,
            ..Self::default()
        }
    }

    /// Embedding indices in [`META_ATTRIBUTES`] order.
    pub fn indices(&self) -> [usize; 4] {
        [
            usize::from(self.time_of_day),
            usize::from(self.day_of_week),
            self.temperature.index(),
            self.precipitation.index(),
        ]
    }
}

pub(crate) fn local_datetime(unix_s: i64, utc_offset_s: i32) -> NaiveDateTime {
    DateTime::from_timestamp(unix_s + i64::from(utc_offset_s), 0)
        .unwrap_or_default()
        .naive_utc()
}

impl Serialize for TemperatureBin {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Some(b) => s.serialize_u8(b),
            None => s.serialize_str("unknown"),
        }
    }
}

impl<'de> Deserialize<'de> for TemperatureBin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Bin(u8),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Bin(b) if usize::from(b) < TemperatureBin::VOCAB - 1 => {
                Ok(TemperatureBin(Some(b)))
            }
            Repr::Word(w) if w == "unknown" => Ok(TemperatureBin::UNKNOWN),
            _ => Err(serde::de::Error::custom(
                "temperature bin must be 0..9 or \"unknown\"",
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metadata_bins_from_time() {
        // 2014-01-07 14:37:00 UTC, a Tuesday
        let m = TripMetadata::from_start_time(1_389_105_420, 0);
        assert_eq!(usize::from(m.time_of_day), (14 * 60 + 37) / 15);
        assert_eq!(m.day_of_week, 1);
        // one hour east of UTC moves the bin by four quarter hours
        let shifted = TripMetadata::from_start_time(1_389_105_420, 3600);
        assert_eq!(shifted.time_of_day, m.time_of_day + 4);
    }

    #[test]
    fn metadata_json_shape() {
        let m = TripMetadata {
            time_of_day: 3,
            day_of_week: 6,
            temperature: TemperatureBin(Some(4)),
            precipitation: PrecipitationBin::Light,
        };
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(
            text,
            r#"{"time_of_day":3,"day_of_week":6,"temperature":4,"precipitation":"light"}"#
        );
        assert_eq!(serde_json::from_str::<TripMetadata>(&text).unwrap(), m);
        let unknown = serde_json::to_string(&TripMetadata::default()).unwrap();
        assert!(unknown.contains(r#""temperature":"unknown""#));
        assert!(serde_json::from_str::<TripMetadata>(
            r#"{"time_of_day":96,"day_of_week":0,"temperature":"unknown","precipitation":"none"}"#
        )
        .is_err());
    }

    #[test]
    fn slicing_keeps_absolute_time() {
        let t = Trajectory {
            id: "a".into(),
            start_time: 100,
            points: vec![GeoPoint::new(0.0, 0.0); 5],
            timing: Timing::Interval(15),
            meta: TripMetadata::default(),
        };
        assert_eq!(t.timestamps(), vec![100, 115, 130, 145, 160]);
        assert_eq!(t.duration_s(), 60);
        let s = t.slice(2, 4);
        assert_eq!(s.timestamps(), vec![130, 145]);
        assert_eq!(t.prefix(3).len(), 3);
    }
}
