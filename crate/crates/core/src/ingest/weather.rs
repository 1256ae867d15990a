use std::collections::HashMap;
use std::path::Path;

use chrono::{NaiveDate, Timelike};
use serde::{Deserialize, Serialize};

use super::{local_datetime, IngestError, Trajectory};

/// Temperature in 5 °C buckets over [-10, 40] °C; `None` is unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemperatureBin(pub Option<u8>);

impl TemperatureBin {
    pub const UNKNOWN: TemperatureBin = TemperatureBin(None);
    /// Ten buckets plus unknown.
    pub const VOCAB: usize = 11;

    pub fn from_celsius(t: f64) -> Self {
        if !t.is_finite() {
            return Self::UNKNOWN;
        }
        let bucket = ((t.clamp(-10.0, 40.0) + 10.0) / 5.0).floor() as u8;
        TemperatureBin(Some(bucket.min(9)))
    }

    pub fn index(self) -> usize {
        match self.0 {
            Some(b) => usize::from(b),
            None => Self::VOCAB - 1,
        }
    }
}

/// Hourly precipitation: none (0 mm), light (0, 1], moderate (1, 5],
/// heavy (> 5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecipitationBin {
    None,
    Light,
    Moderate,
    Heavy,
    Unknown,
}

impl PrecipitationBin {
    pub const VOCAB: usize = 5;

    pub fn from_mm(mm: f64) -> Self {
        if !mm.is_finite() || mm < 0.0 {
            PrecipitationBin::Unknown
        } else if mm == 0.0 {
            PrecipitationBin::None
        } else if mm <= 1.0 {
            PrecipitationBin::Light
        } else if mm <= 5.0 {
            PrecipitationBin::Moderate
        } else {
            PrecipitationBin::Heavy
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Deserialize)]
struct WeatherRow {
    date: NaiveDate,
    hour: u32,
    temperature_c: f64,
    precip_mm: f64,
}

/// Hourly weather keyed by local date and hour.
#[derive(Debug, Default, Clone)]
pub struct WeatherTable {
    rows: HashMap<(NaiveDate, u32), (f64, f64)>,
}

impl WeatherTable {
    /// Reads `date,hour,temperature_c,precip_mm` rows.
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = HashMap::new();
        for row in reader.deserialize() {
            let row: WeatherRow = row?;
            rows.insert((row.date, row.hour), (row.temperature_c, row.precip_mm));
        }
        Ok(Self { rows })
    }

    pub fn insert(&mut self, date: NaiveDate, hour: u32, temperature_c: f64, precip_mm: f64) {
        self.rows.insert((date, hour), (temperature_c, precip_mm));
    }

    pub fn lookup(&self, unix_s: i64, utc_offset_s: i32) -> Option<(f64, f64)> {
        let local = local_datetime(unix_s, utc_offset_s);
        self.rows.get(&(local.date(), local.hour())).copied()
    }
}

/// Joins weather onto trips by the local date and hour of their start time.
/// Trips without a matching row, or every trip when the file cannot be read,
/// get unknown weather bins.
pub fn attach_weather(trips: &mut [Trajectory], weather_path: Option<&Path>, utc_offset_s: i32) {
    let table = match weather_path.map(WeatherTable::load) {
        Some(Ok(t)) => t,
        Some(Err(e)) => {
            log::warn!("weather file unreadable, all weather bins unknown: {e}");
            WeatherTable::default()
        }
        None => WeatherTable::default(),
    };
    attach_weather_table(trips, &table, utc_offset_s);
}

pub(crate) fn attach_weather_table(
    trips: &mut [Trajectory],
    table: &WeatherTable,
    utc_offset_s: i32,
) {
    for trip in trips {
        match table.lookup(trip.start_time, utc_offset_s) {
            Some((t, p)) => {
                trip.meta.temperature = TemperatureBin::from_celsius(t);
                trip.meta.precipitation = PrecipitationBin::from_mm(p);
            }
            None => {
                trip.meta.temperature = TemperatureBin::UNKNOWN;
                trip.meta.precipitation = PrecipitationBin::Unknown;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::ingest::{Timing, TripMetadata};
    use std::io::Write;

    fn trip_at(unix: i64) -> Trajectory {
        Trajectory {
            id: "t".into(),
            start_time: unix,
            points: vec![GeoPoint::new(41.0, -8.6)],
            timing: Timing::Interval(15),
            meta: TripMetadata::default(),
        }
    }

    #[test]
    fn bins() {
        assert_eq!(PrecipitationBin::from_mm(0.0), PrecipitationBin::None);
        assert_eq!(PrecipitationBin::from_mm(0.5), PrecipitationBin::Light);
        assert_eq!(PrecipitationBin::from_mm(1.0), PrecipitationBin::Light);
        assert_eq!(PrecipitationBin::from_mm(3.0), PrecipitationBin::Moderate);
        assert_eq!(PrecipitationBin::from_mm(5.0), PrecipitationBin::Moderate);
        assert_eq!(PrecipitationBin::from_mm(5.1), PrecipitationBin::Heavy);
        assert_eq!(TemperatureBin::from_celsius(-30.0), TemperatureBin(Some(0)));
        assert_eq!(TemperatureBin::from_celsius(12.0), TemperatureBin(Some(4)));
        assert_eq!(TemperatureBin::from_celsius(40.0), TemperatureBin(Some(9)));
        assert_eq!(TemperatureBin::UNKNOWN.index(), 10);
    }

    #[test]
    fn joins_on_floor_hour() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weather.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "date,hour,temperature_c,precip_mm").unwrap();
        writeln!(f, "2014-01-07,14,12.0,3.0").unwrap();
        writeln!(f, "2014-01-07,15,30.0,0.0").unwrap();
        drop(f);
        // 2014-01-07 14:37 UTC
        let mut trips = vec![trip_at(1_389_105_420), trip_at(1_389_105_420 + 86_400)];
        attach_weather(&mut trips, Some(&path), 0);
        assert_eq!(trips[0].meta.temperature, TemperatureBin(Some(4)));
        assert_eq!(trips[0].meta.precipitation, PrecipitationBin::Moderate);
        assert_eq!(trips[1].meta.precipitation, PrecipitationBin::Unknown);
    }

    #[test]
    fn missing_file_means_unknown() {
        let mut trips = vec![trip_at(0)];
        trips[0].meta.precipitation = PrecipitationBin::Heavy;
        attach_weather(&mut trips, Some(Path::new("/nonexistent/weather.csv")), 0);
        assert_eq!(trips[0].meta.precipitation, PrecipitationBin::Unknown);
        attach_weather(&mut trips, None, 0);
        assert_eq!(trips[0].meta.temperature, TemperatureBin::UNKNOWN);
    }
}
