//! Reader for the Kaggle Porto taxi CSV.

use std::io::Read;
use std::path::Path;

use super::{IngestError, ParseReport, Timing, Trajectory, TripMetadata, PORTO_INTERVAL_S};
use crate::exec::Execution;
use crate::geo::GeoPoint;

pub const PORTO_HEADER: [&str; 9] = [
    "TRIP_ID",
    "CALL_TYPE",
    "ORIGIN_CALL",
    "ORIGIN_STAND",
    "TAXI_ID",
    "TIMESTAMP",
    "DAY_TYPE",
    "MISSING_DATA",
    "POLYLINE",
];

const CHUNK_ROWS: usize = 1 << 16;

struct Columns {
    trip_id: usize,
    timestamp: usize,
    missing: usize,
    polyline: usize,
}

enum Row {
    Trip(Trajectory),
    Missing,
    Rejected,
}

pub fn parse_porto_csv(
    path: &Path,
    utc_offset_s: i32,
    exec: Execution,
) -> Result<(Vec<Trajectory>, ParseReport), IngestError> {
    parse_porto_reader(std::fs::File::open(path)?, utc_offset_s, exec)
}

/// Parses Porto rows. Rows flagged `MISSING_DATA` are dropped, rows whose
/// timestamp or polyline cannot be decoded are rejected and counted.
pub fn parse_porto_reader<R: Read>(
    reader: R,
    utc_offset_s: i32,
    exec: Execution,
) -> Result<(Vec<Trajectory>, ParseReport), IngestError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MissingHeader(name.to_string()))
    };
    for name in PORTO_HEADER {
        find(name)?;
    }
    let cols = Columns {
        trip_id: find("TRIP_ID")?,
        timestamp: find("TIMESTAMP")?,
        missing: find("MISSING_DATA")?,
        polyline: find("POLYLINE")?,
    };

    let mut report = ParseReport::default();
    let mut trips = Vec::new();
    let mut chunk = Vec::with_capacity(CHUNK_ROWS);
    let mut records = csv.into_records();
    loop {
        let next = records.next();
        let done = next.is_none();
        if let Some(record) = next {
            report.rows += 1;
            match record {
                Ok(r) => chunk.push(r),
                Err(_) => report.rejected += 1,
            }
        }
        if chunk.len() == CHUNK_ROWS || (done && !chunk.is_empty()) {
            let rows = exec.map_owned(std::mem::take(&mut chunk), |r| {
                parse_row(&r, &cols, utc_offset_s)
            });
            for row in rows {
                match row {
                    Row::Trip(t) => {
                        report.parsed += 1;
                        trips.push(t);
                    }
                    Row::Missing => report.dropped_missing += 1,
                    Row::Rejected => report.rejected += 1,
                }
            }
        }
        if done {
            break;
        }
    }
    trips.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((trips, report))
}

fn parse_row(record: &csv::StringRecord, cols: &Columns, utc_offset_s: i32) -> Row {
    let field = |i: usize| record.get(i).unwrap_or("").trim();
    if field(cols.missing).eq_ignore_ascii_case("true") {
        return Row::Missing;
    }
    let Ok(start_time) = field(cols.timestamp).parse::<i64>() else {
        return Row::Rejected;
    };
    let Ok(pairs) = serde_json::from_str::<Vec<[f64; 2]>>(field(cols.polyline)) else {
        return Row::Rejected;
    };
    // POLYLINE pairs are [lon, lat]
    let points: Vec<GeoPoint> = pairs.iter().map(|p| GeoPoint::new(p[1], p[0])).collect();
    if points.iter().any(|p| !p.is_valid()) {
        return Row::Rejected;
    }
    Row::Trip(Trajectory {
        id: field(cols.trip_id).to_string(),
        start_time,
        points,
        timing: Timing::Interval(PORTO_INTERVAL_S),
        meta: TripMetadata::from_start_time(start_time, utc_offset_s),
    })
}
