//! Desk-scale synthetic taxi data.
//!
//! A square grid road network with points of interest spread over its four
//! quadrants. Each trip drives the shortest path between two POIs, sampled
//! every 15 s at constant speed with Gaussian position noise. The destination
//! quadrant depends on the origin quadrant and the period of the day, so trip
//! metadata carries information the trajectory prefix alone does not.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Timing, Trajectory, TripMetadata, PORTO_INTERVAL_S};
use crate::geo::{GeoPoint, LocalPlane};
use crate::partition::BoundingBox;
use crate::routing::{grid_graph, NodeId, RoadGraph};

/// Monday 2014-01-06 00:00:00 UTC.
const EPOCH_MONDAY: i64 = 1_388_966_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_trips: usize,
    /// Nodes per side of the grid.
    pub grid_size: usize,
    pub n_pois: usize,
    pub spacing_m: f64,
    /// Standard deviation of the per-point position noise.
    pub jitter_m: f64,
    /// Nominal distance driven between two 15 s samples.
    pub step_m: f64,
    /// South-west corner of the grid, `[lat, lon]`.
    pub origin: [f64; 2],
    /// Probability that the destination follows the time-of-day rule rather
    /// than being drawn uniformly.
    pub destination_signal: f64,
    pub days: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_trips: 5000,
            grid_size: 12,
            n_pois: 24,
            spacing_m: 250.0,
            jitter_m: 20.0,
            step_m: 150.0,
            origin: [41.10, -8.70],
            destination_signal: 0.8,
            days: 28,
        }
    }
}

impl SynthConfig {
    /// Shortest trip length that still yields at least 9 samples (120 s).
    pub fn min_trip_m(&self) -> f64 {
        8.0 * self.step_m
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCity {
    pub trips: Vec<Trajectory>,
    pub graph: RoadGraph,
    pub pois: Vec<NodeId>,
    /// Quadrant (0..4) of each POI.
    pub poi_cluster: Vec<usize>,
    /// Destination POI index of each trip.
    pub trip_destination: Vec<usize>,
    pub config: SynthConfig,
}

impl SyntheticCity {
    /// Grid extent padded by 500 m on every side.
    pub fn bbox(&self) -> BoundingBox {
        let pts: Vec<GeoPoint> = self.graph.nodes().map(|(_, p)| p).collect();
        let b = BoundingBox::enclosing(&pts).expect("grid has nodes");
        let plane = LocalPlane::new(b.center());
        let (dx, _) = plane.project(GeoPoint::new(b.center().lat, b.center().lon + 1.0));
        let (_, dy) = plane.project(GeoPoint::new(b.center().lat + 1.0, b.center().lon));
        let (pad_lat, pad_lon) = (500.0 / dy, 500.0 / dx);
        BoundingBox::new(
            b.min_lat - pad_lat,
            b.max_lat + pad_lat,
            b.min_lon - pad_lon,
            b.max_lon + pad_lon,
        )
    }
}

/// Quadrant the destination is steered to for an origin quadrant and a
/// six-hour period of the day. Never the origin quadrant itself.
pub(crate) fn preferred_cluster(origin_cluster: usize, period: usize) -> usize {
    (origin_cluster + 1 + period % 3) % 4
}

pub fn generate_synthetic_city(cfg: &SynthConfig) -> SyntheticCity {
    let size = cfg.grid_size.max(2);
    let origin = GeoPoint::new(cfg.origin[0], cfg.origin[1]);
    let graph = grid_graph(origin, size, cfg.spacing_m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (pois, poi_cluster) = place_pois(&mut rng, size, cfg.n_pois.max(4));

    // all POI-to-POI paths
    let paths: Vec<Vec<(Vec<GeoPoint>, f64)>> = pois
        .iter()
        .map(|&src| {
            let tree = graph.shortest_path_tree(src).expect("POI is a node");
            pois.iter()
                .map(|&dst| {
                    let path = tree.path_to(dst).expect("grid is connected");
                    let pts = path
                        .nodes
                        .iter()
                        .map(|&n| graph.position(n).expect("node exists"))
                        .collect();
                    (pts, path.cost)
                })
                .collect()
        })
        .collect();

    let min_len = cfg.min_trip_m();
    let noise = (cfg.jitter_m > 0.0).then(|| Normal::new(0.0, cfg.jitter_m).expect("finite sigma"));
    let plane = LocalPlane::new(origin);
    let (m_per_lon, _) = plane.project(GeoPoint::new(origin.lat, origin.lon + 1.0));
    let (_, m_per_lat) = plane.project(GeoPoint::new(origin.lat + 1.0, origin.lon));

    let mut trips = Vec::with_capacity(cfg.n_trips);
    let mut trip_destination = Vec::with_capacity(cfg.n_trips);
    while trips.len() < cfg.n_trips {
        let day = rng.random_range(0..cfg.days.max(1)) as i64;
        let second_of_day = rng.random_range(0..86_400) as i64;
        let start_time = EPOCH_MONDAY + day * 86_400 + second_of_day;
        let period = (second_of_day / 21_600) as usize;

        let from = rng.random_range(0..pois.len());
        let far_enough = |to: usize| to != from && paths[from][to].1 >= min_len;
        let candidates: Vec<usize> = if rng.random_bool(cfg.destination_signal.clamp(0.0, 1.0)) {
            let target = preferred_cluster(poi_cluster[from], period);
            (0..pois.len())
                .filter(|&to| poi_cluster[to] == target && far_enough(to))
                .collect()
        } else {
            (0..pois.len()).filter(|&to| far_enough(to)).collect()
        };
        let Some(&to) = candidates.choose(&mut rng) else {
            continue;
        };

        let (route, length) = &paths[from][to];
        let mut points = sample_along(route, *length, cfg.step_m);
        if let Some(noise) = &noise {
            for p in &mut points {
                p.lat += noise.sample(&mut rng) / m_per_lat;
                p.lon += noise.sample(&mut rng) / m_per_lon;
            }
        }
        trips.push(Trajectory {
            id: format!("syn{:06}", trips.len()),
            start_time,
            points,
            timing: Timing::Interval(PORTO_INTERVAL_S),
            meta: TripMetadata::from_start_time(start_time, 0),
        });
        trip_destination.push(to);
    }

    SyntheticCity {
        trips,
        graph,
        pois,
        poi_cluster,
        trip_destination,
        config: cfg.clone(),
    }
}

fn place_pois(rng: &mut ChaCha8Rng, size: usize, n_pois: usize) -> (Vec<NodeId>, Vec<usize>) {
    let half = size / 2;
    let mut quadrants: [Vec<NodeId>; 4] = Default::default();
    for row in 0..size {
        for col in 0..size {
            let q = usize::from(row >= half) * 2 + usize::from(col >= half);
            quadrants[q].push((row * size + col) as NodeId);
        }
    }
    let mut pois = Vec::new();
    let mut cluster = Vec::new();
    for (q, nodes) in quadrants.iter().enumerate() {
        let want = n_pois / 4 + usize::from(q < n_pois % 4);
        for &node in nodes.choose_multiple(rng, want.min(nodes.len())) {
            pois.push(node);
            cluster.push(q);
        }
    }
    (pois, cluster)
}

/// Evenly spaced samples along a polyline, first and last vertex included.
fn sample_along(route: &[GeoPoint], length: f64, step_m: f64) -> Vec<GeoPoint> {
    if route.len() < 2 || length <= 0.0 {
        return route.to_vec();
    }
    let n_steps = (length / step_m).ceil().max(1.0) as usize;
    let seg_len: Vec<f64> = route
        .windows(2)
        .map(|w| crate::geo::haversine(w[0], w[1]))
        .collect();
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..=n_steps {
        if k == n_steps {
            out.push(*route.last().expect("non-empty"));
            break;
        }
        let s = length * k as f64 / n_steps as f64;
        while seg + 1 < seg_len.len() && s > seg_start + seg_len[seg] {
            seg_start += seg_len[seg];
            seg += 1;
        }
        let t = ((s - seg_start) / seg_len[seg]).clamp(0.0, 1.0);
        let (a, b) = (route[seg], route[seg + 1]);
        out.push(GeoPoint::new(
            a.lat + t * (b.lat - a.lat),
            a.lon + t * (b.lon - a.lon),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{haversine, path_length};
    use std::collections::HashMap;

    fn small(seed: u64, jitter: f64) -> SyntheticCity {
        generate_synthetic_city(&SynthConfig {
            seed,
            n_trips: 300,
            jitter_m: jitter,
            ..SynthConfig::default()
        })
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(small(3, 20.0).trips, small(3, 20.0).trips);
        assert_ne!(small(3, 20.0).trips, small(4, 20.0).trips);
    }

    #[test]
    fn zero_jitter_lies_on_grid_edges() {
        let city = small(1, 0.0);
        let nodes: Vec<GeoPoint> = city.graph.nodes().map(|(_, p)| p).collect();
        let on_line = |x: f64, lines: &[f64]| lines.iter().any(|l| (x - l).abs() < 1e-12);
        let mut lats: Vec<f64> = nodes.iter().map(|p| p.lat).collect();
        let mut lons: Vec<f64> = nodes.iter().map(|p| p.lon).collect();
        lats.dedup();
        lons.sort_by(f64::total_cmp);
        lons.dedup();
        for t in &city.trips {
            for p in &t.points {
                assert!(
                    on_line(p.lat, &lats) || on_line(p.lon, &lons),
                    "{p:?} off grid"
                );
            }
        }
    }

    #[test]
    fn trips_meet_cleaning_constraints() {
        let city = small(2, 20.0);
        let bbox = city.bbox();
        for t in &city.trips {
            assert!(t.len() >= 9);
            assert!(t.duration_s() >= 120 && t.duration_s() <= 7200);
            let tau =
                path_length(&t.points).unwrap() / haversine(t.points[0], *t.points.last().unwrap());
            assert!(tau < 2.0, "tau {tau}");
            assert!(t.points.iter().all(|p| bbox.contains(*p)));
        }
    }

    fn mutual_information(xs: &[usize], ys: &[usize]) -> f64 {
        let n = xs.len() as f64;
        let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
        let mut px: HashMap<usize, f64> = HashMap::new();
        let mut py: HashMap<usize, f64> = HashMap::new();
        for (&x, &y) in xs.iter().zip(ys) {
            *joint.entry((x, y)).or_default() += 1.0 / n;
            *px.entry(x).or_default() += 1.0 / n;
            *py.entry(y).or_default() += 1.0 / n;
        }
        joint
            .iter()
            .map(|(&(x, y), &p)| p * (p / (px[&x] * py[&y])).ln())
            .sum()
    }

    #[test]
    fn time_of_day_informs_destination() {
        let city = generate_synthetic_city(&SynthConfig {
            n_trips: 2000,
            ..SynthConfig::default()
        });
        let bins: Vec<usize> = city
            .trips
            .iter()
            .map(|t| usize::from(t.meta.time_of_day) / 24)
            .collect();
        let origin_q: Vec<usize> = city
            .trips
            .iter()
            .map(|t| {
                let p = t.points[0];
                let b = city.bbox().center();
                usize::from(p.lat >= b.lat) * 2 + usize::from(p.lon >= b.lon)
            })
            .collect();
        let dest: Vec<usize> = city
            .trip_destination
            .iter()
            .map(|&d| city.poi_cluster[d])
            .collect();
        // condition on the origin quadrant by pairing it with the time bin
        let context: Vec<usize> = bins.iter().zip(&origin_q).map(|(b, o)| b * 4 + o).collect();
        let with_time = mutual_information(&context, &dest);
        let without_time = mutual_information(&origin_q, &dest);
        assert!(mutual_information(&bins, &dest) > 0.0);
        assert!(
            with_time - without_time > 0.1,
            "{with_time} vs {without_time}"
        );
    }
}
