//! Canonical trip store: one JSON object per line.
//!
//! ```text
//! {"id":"...","start_time":1372636858,"interval_s":15,"points":[[41.14,-8.61],...],"meta":{...}}
//! {"id":"...","start_time":1211018404,"timestamps":[...],"points":[...],"meta":{...}}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IngestError, Timing, Trajectory, TripMetadata};
use crate::geo::GeoPoint;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripRecord {
    id: String,
    start_time: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    interval_s: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamps: Option<Vec<i64>>,
    points: Vec<[f64; 2]>,
    meta: TripMetadata,
}

impl From<&Trajectory> for TripRecord {
    fn from(t: &Trajectory) -> Self {
        let (interval_s, timestamps) = match &t.timing {
            Timing::Interval(dt) => (Some(*dt), None),
            Timing::Recorded(ts) => (None, Some(ts.clone())),
        };
        TripRecord {
            id: t.id.clone(),
            start_time: t.start_time,
            interval_s,
            timestamps,
            points: t.points.iter().map(|p| [p.lat, p.lon]).collect(),
            meta: t.meta,
        }
    }
}

impl TripRecord {
    fn into_trajectory(self, line: usize) -> Result<Trajectory, IngestError> {
        let malformed = |msg: &str| IngestError::Malformed {
            line,
            msg: msg.to_string(),
        };
        let timing = match (self.interval_s, self.timestamps) {
            (Some(dt), None) => Timing::Interval(dt),
            (None, Some(ts)) => {
                if ts.len() != self.points.len() {
                    return Err(malformed("timestamps and points differ in length"));
                }
                if ts.windows(2).any(|w| w[1] < w[0]) {
                    return Err(malformed("timestamps decrease"));
                }
                Timing::Recorded(ts)
            }
            _ => {
                return Err(malformed(
                    "exactly one of interval_s and timestamps is required",
                ))
            }
        };
        Ok(Trajectory {
            id: self.id,
            start_time: self.start_time,
            points: self
                .points
                .iter()
                .map(|p| GeoPoint::new(p[0], p[1]))
                .collect(),
            timing,
            meta: self.meta,
        })
    }
}

pub fn write_trips_jsonl(path: &Path, trips: &[Trajectory]) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trips {
        serde_json::to_writer(&mut w, &TripRecord::from(t))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trips_jsonl(path: &Path) -> Result<Vec<Trajectory>, IngestError> {
    let reader = BufReader::new(File::open(path)?);
    let mut trips = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TripRecord =
            serde_json::from_str(&line).map_err(|e| IngestError::Malformed {
                line: i + 1,
                msg: e.to_string(),
            })?;
        trips.push(record.into_trajectory(i + 1)?);
    }
    Ok(trips)
}
