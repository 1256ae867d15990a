//! Reader for the CRAWDAD San Francisco cab traces: one text file per taxi
//! with lines `lat lon occupancy unix_time`. Each maximal run of occupied
//! fixes becomes one trip.

use std::path::{Path, PathBuf};

use super::{IngestError, ParseReport, Timing, Trajectory, TripMetadata};
use crate::exec::Execution;
use crate::geo::GeoPoint;

struct Fix {
    point: GeoPoint,
    occupied: bool,
    time: i64,
}

fn parse_line(line: &str) -> Option<Fix> {
    let mut it = line.split_whitespace();
    let lat: f64 = it.next()?.parse().ok()?;
    let lon: f64 = it.next()?.parse().ok()?;
    let occupied = match it.next()? {
        "0" => false,
        "1" => true,
        _ => return None,
    };
    let time: i64 = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    let point = GeoPoint::checked(lat, lon).ok()?;
    Some(Fix {
        point,
        occupied,
        time,
    })
}

/// Splits one taxi's text into occupied runs. Returns the trips plus
/// (line count, malformed count).
pub(crate) fn trips_from_text(
    taxi: &str,
    text: &str,
    utc_offset_s: i32,
) -> (Vec<Trajectory>, usize, usize) {
    let mut lines = 0;
    let mut bad = 0;
    let mut fixes = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        lines += 1;
        match parse_line(line) {
            Some(f) => fixes.push(f),
            None => bad += 1,
        }
    }
    fixes.sort_by_key(|f| f.time);

    let mut trips = Vec::new();
    let mut run: Vec<&Fix> = Vec::new();
    let mut flush = |run: &mut Vec<&Fix>| {
        if run.is_empty() {
            return;
        }
        let start = run[0].time;
        trips.push(Trajectory {
            id: format!("{taxi}_{start}"),
            start_time: start,
            points: run.iter().map(|f| f.point).collect(),
            timing: Timing::Recorded(run.iter().map(|f| f.time).collect()),
            meta: TripMetadata::from_start_time(start, utc_offset_s),
        });
        run.clear();
    };
    for fix in &fixes {
        if fix.occupied {
            run.push(fix);
        } else {
            flush(&mut run);
        }
    }
    flush(&mut run);
    (trips, lines, bad)
}

/// Reads every `*.txt` file in `dir`. `rows` counts non-empty lines and
/// `rejected` counts malformed lines.
pub fn parse_crawdad_sf(
    dir: &Path,
    utc_offset_s: i32,
    exec: Execution,
) -> Result<(Vec<Trajectory>, ParseReport), IngestError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let results = exec.map(&files, |path| -> Result<_, IngestError> {
        let text = std::fs::read_to_string(path)?;
        let taxi = path
            .file_stem()
            .map(|s| s.to_string_lossy().trim_start_matches("new_").to_string())
            .unwrap_or_default();
        Ok(trips_from_text(&taxi, &text, utc_offset_s))
    });
    let mut report = ParseReport::default();
    let mut trips = Vec::new();
    for r in results {
        let (t, lines, bad) = r?;
        report.rows += lines;
        report.rejected += bad;
        report.parsed += lines - bad;
        trips.extend(t);
    }
    trips.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((trips, report))
}
