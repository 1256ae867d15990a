//! k-d tree space discretization.
//!
//! The tree splits at the median along alternating axes (latitude at even
//! depth, longitude at odd depth) until every leaf holds at most
//! `points_per_region_max` points. Each leaf is a region with a 1-based id.
//! Points with a coordinate strictly below a split value go left, everything
//! else goes right, so [`SpacePartition::locate`] is total over the plane.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::geo::{GeoPoint, LocalPlane};
use crate::ingest::Trajectory;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("cannot build a partition from an empty point set")]
    EmptyInput,
    #[error("points_per_region_max must be at least 1")]
    InvalidConfig,
    #[error("malformed partition file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub points_per_region_max: usize,
}

impl PartitionConfig {
    pub fn new(points_per_region_max: usize) -> Result<Self, PartitionError> {
        if points_per_region_max == 0 {
            return Err(PartitionError::InvalidConfig);
        }
        Ok(Self {
            points_per_region_max,
        })
    }

    /// Leaf capacity that yields roughly `target_regions` leaves for a data
    /// set of `n_points` points.
    pub fn for_target_regions(n_points: usize, target_regions: usize) -> Self {
        let target = target_regions.max(1);
        Self {
            points_per_region_max: n_points.div_ceil(target).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Lat,
    Lon,
}

impl Axis {
    fn of_depth(depth: usize) -> Self {
        if depth.is_multiple_of(2) {
            Axis::Lat
        } else {
            Axis::Lon
        }
    }

    fn other(self) -> Self {
        match self {
            Axis::Lat => Axis::Lon,
            Axis::Lon => Axis::Lat,
        }
    }

    pub fn coord(self, p: GeoPoint) -> f64 {
        match self {
            Axis::Lat => p.lat,
            Axis::Lon => p.lon,
        }
    }
}

/// Axis-aligned box in degrees. Bounds may be infinite for outer regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub const UNBOUNDED: BoundingBox = BoundingBox {
        min_lat: f64::NEG_INFINITY,
        max_lat: f64::INFINITY,
        min_lon: f64::NEG_INFINITY,
        max_lon: f64::INFINITY,
    };

    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64) -> Self {
        Self {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        }
    }

    /// Smallest box containing all points. `None` for an empty slice.
    pub fn enclosing(points: &[GeoPoint]) -> Option<Self> {
        let first = points.first()?;
        let mut b = BoundingBox::new(first.lat, first.lat, first.lon, first.lon);
        for p in points {
            b.min_lat = b.min_lat.min(p.lat);
            b.max_lat = b.max_lat.max(p.lat);
            b.min_lon = b.min_lon.min(p.lon);
            b.max_lon = b.max_lon.max(p.lon);
        }
        Some(b)
    }

    /// Closed containment test.
    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.min_lat
            && p.lat <= self.max_lat
            && p.lon >= self.min_lon
            && p.lon <= self.max_lon
    }

    /// Half-open containment `[min, max)` matching the split tie rule.
    pub fn contains_half_open(&self, p: GeoPoint) -> bool {
        p.lat >= self.min_lat
            && p.lat < self.max_lat
            && p.lon >= self.min_lon
            && p.lon < self.max_lon
    }

    pub fn intersect(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            min_lat: self.min_lat.max(other.min_lat),
            max_lat: self.max_lat.min(other.max_lat),
            min_lon: self.min_lon.max(other.min_lon),
            max_lon: self.max_lon.min(other.max_lon),
        }
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint::new(
            (self.min_lat + self.max_lat) / 2.0,
            (self.min_lon + self.max_lon) / 2.0,
        )
    }

    /// Approximate area in square meters using a local plane at the center.
    pub fn area_m2(&self) -> f64 {
        let plane = LocalPlane::new(self.center());
        let (x0, y0) = plane.project(GeoPoint::new(self.min_lat, self.min_lon));
        let (x1, y1) = plane.project(GeoPoint::new(self.max_lat, self.max_lon));
        ((x1 - x0) * (y1 - y0)).abs()
    }
}

/// 1-based region identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionId(pub u32);

impl RegionId {
    pub fn from_index(index: usize) -> Self {
        RegionId(index as u32 + 1)
    }

    /// Zero-based position, used as the embedding / score index.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: RegionId,
    pub centroid: GeoPoint,
    pub count: usize,
    /// Half-space bounds from the split chain, infinite on open sides.
    pub bounds: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Node {
    Split {
        axis: Axis,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        region: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpacePartition {
    nodes: Vec<Node>,
    regions: Vec<Region>,
    bbox: BoundingBox,
}

#[derive(Serialize, Deserialize)]
struct RegionRecord {
    id: RegionId,
    centroid: [f64; 2],
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    format: String,
    version: u32,
    bbox: [f64; 4],
    nodes: Vec<Node>,
    regions: Vec<RegionRecord>,
}

const PARTITION_FORMAT: &str = "trajdest-partition";

struct Builder<'a> {
    points: &'a [GeoPoint],
    capacity: usize,
    nodes: Vec<Node>,
    regions: Vec<Region>,
}

impl Builder<'_> {
    fn build(&mut self, idx: &mut [usize], depth: usize, bounds: BoundingBox) -> usize {
        if idx.len() > self.capacity {
            let preferred = Axis::of_depth(depth);
            let split = [preferred, preferred.other()]
                .into_iter()
                .find_map(|axis| self.choose_split(idx, axis).map(|v| (axis, v)));
            if let Some((axis, value)) = split {
                // idx is sorted along `axis` by choose_split
                let cut = idx.partition_point(|&i| axis.coord(self.points[i]) < value);
                let slot = self.nodes.len();
                self.nodes.push(Node::Leaf { region: usize::MAX });
                let (lo, hi) = split_bounds(bounds, axis, value);
                let (left_idx, right_idx) = idx.split_at_mut(cut);
                let left = self.build(left_idx, depth + 1, lo);
                let right = self.build(right_idx, depth + 1, hi);
                self.nodes[slot] = Node::Split {
                    axis,
                    value,
                    left,
                    right,
                };
                return slot;
            }
        }
        // all remaining points coincide, or the leaf is small enough
        let n = idx.len() as f64;
        let (lat, lon) = idx.iter().fold((0.0, 0.0), |(a, b), &i| {
            (a + self.points[i].lat, b + self.points[i].lon)
        });
        let region = self.regions.len();
        self.regions.push(Region {
            id: RegionId::from_index(region),
            centroid: GeoPoint::new(lat / n, lon / n),
            count: idx.len(),
            bounds,
        });
        self.nodes.push(Node::Leaf { region });
        self.nodes.len() - 1
    }

    /// Sorts `idx` along `axis` and returns the split value, or `None` when
    /// every point shares the same coordinate on that axis.
    fn choose_split(&self, idx: &mut [usize], axis: Axis) -> Option<f64> {
        let pts = self.points;
        idx.sort_by(|&a, &b| axis.coord(pts[a]).total_cmp(&axis.coord(pts[b])));
        let lowest = axis.coord(pts[idx[0]]);
        let median = axis.coord(pts[idx[idx.len() / 2]]);
        if median > lowest {
            return Some(median);
        }
        idx.iter()
            .map(|&i| axis.coord(pts[i]))
            .find(|&c| c > lowest)
    }
}

fn split_bounds(b: BoundingBox, axis: Axis, value: f64) -> (BoundingBox, BoundingBox) {
    let (mut lo, mut hi) = (b, b);
    match axis {
        Axis::Lat => {
            lo.max_lat = value;
            hi.min_lat = value;
        }
        Axis::Lon => {
            lo.max_lon = value;
            hi.min_lon = value;
        }
    }
    (lo, hi)
}

impl SpacePartition {
    /// Builds the tree over `points`. Deterministic for a fixed input order.
    pub fn build(points: &[GeoPoint], cfg: PartitionConfig) -> Result<Self, PartitionError> {
        if cfg.points_per_region_max == 0 {
            return Err(PartitionError::InvalidConfig);
        }
        let bbox = BoundingBox::enclosing(points).ok_or(PartitionError::EmptyInput)?;
        let mut builder = Builder {
            points,
            capacity: cfg.points_per_region_max,
            nodes: Vec::new(),
            regions: Vec::new(),
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let root = builder.build(&mut idx, 0, BoundingBox::UNBOUNDED);
        debug_assert_eq!(root, 0);
        Ok(Self {
            nodes: builder.nodes,
            regions: builder.regions,
            bbox,
        })
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, id: RegionId) -> &Region {
        &self.regions[id.index()]
    }

    /// Data bounding box the tree was built from.
    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    /// Region centroids ordered by region index.
    pub fn centroids(&self) -> Vec<GeoPoint> {
        self.regions.iter().map(|r| r.centroid).collect()
    }

    /// Region whose half-space chain contains `p`.
    pub fn locate(&self, p: GeoPoint) -> RegionId {
        let mut node = 0;
        loop {
            match self.nodes[node] {
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => node = if axis.coord(p) < value { left } else { right },
                Node::Leaf { region } => return self.regions[region].id,
            }
        }
    }

    pub fn encode_points(&self, points: &[GeoPoint]) -> Vec<RegionId> {
        points.iter().map(|&p| self.locate(p)).collect()
    }

    pub fn encode_trajectory(&self, trip: &Trajectory) -> Vec<RegionId> {
        self.encode_points(&trip.points)
    }

    /// Region box clipped to the data bounding box.
    pub fn display_box(&self, id: RegionId) -> BoundingBox {
        self.region(id).bounds.intersect(&self.bbox)
    }

    /// Mean over regions of `sqrt(area / π)` for the clipped boxes: the
    /// radius of a disc with the region's area.
    pub fn mean_region_radius_m(&self) -> f64 {
        let total: f64 = self
            .regions
            .iter()
            .map(|r| (self.display_box(r.id).area_m2() / std::f64::consts::PI).sqrt())
            .sum();
        total / self.regions.len() as f64
    }

    pub fn to_geojson(&self) -> serde_json::Value {
        let features: Vec<serde_json::Value> = self
            .regions
            .iter()
            .map(|r| {
                let b = self.display_box(r.id);
                let ring = vec![
                    [b.min_lon, b.min_lat],
                    [b.max_lon, b.min_lat],
                    [b.max_lon, b.max_lat],
                    [b.min_lon, b.max_lat],
                    [b.min_lon, b.min_lat],
                ];
                json!({
                    "type": "Feature",
                    "geometry": { "type": "Polygon", "coordinates": [ring] },
                    "properties": {
                        "region_id": r.id.0,
                        "count": r.count,
                        "centroid": [r.centroid.lon, r.centroid.lat],
                    }
                })
            })
            .collect();
        json!({ "type": "FeatureCollection", "features": features })
    }

    pub fn export_regions_geojson(&self, path: &Path) -> Result<(), PartitionError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.to_geojson())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, PartitionError> {
        let file = PartitionFile {
            format: PARTITION_FORMAT.to_string(),
            version: 1,
            bbox: [
                self.bbox.min_lat,
                self.bbox.max_lat,
                self.bbox.min_lon,
                self.bbox.max_lon,
            ],
            nodes: self.nodes.clone(),
            regions: self
                .regions
                .iter()
                .map(|r| RegionRecord {
                    id: r.id,
                    centroid: [r.centroid.lat, r.centroid.lon],
                    count: r.count,
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, PartitionError> {
        let file: PartitionFile = serde_json::from_str(text)?;
        if file.format != PARTITION_FORMAT || file.version != 1 {
            return Err(PartitionError::Malformed(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        let mut regions: Vec<Region> = file
            .regions
            .iter()
            .map(|r| Region {
                id: r.id,
                centroid: GeoPoint::new(r.centroid[0], r.centroid[1]),
                count: r.count,
                bounds: BoundingBox::UNBOUNDED,
            })
            .collect();
        for (i, r) in regions.iter().enumerate() {
            if r.id != RegionId::from_index(i) {
                return Err(PartitionError::Malformed(
                    "region ids not contiguous".into(),
                ));
            }
        }
        if file.nodes.is_empty() {
            return Err(PartitionError::Malformed("no nodes".into()));
        }
        // recover leaf bounds by walking the split chain
        let mut stack = vec![(0usize, BoundingBox::UNBOUNDED)];
        let mut seen = 0;
        while let Some((node, bounds)) = stack.pop() {
            seen += 1;
            if seen > file.nodes.len() {
                return Err(PartitionError::Malformed("cyclic tree".into()));
            }
            match file.nodes.get(node) {
                Some(Node::Split {
                    axis,
                    value,
                    left,
                    right,
                }) => {
                    let (lo, hi) = split_bounds(bounds, *axis, *value);
                    stack.push((*left, lo));
                    stack.push((*right, hi));
                }
                Some(Node::Leaf { region }) => match regions.get_mut(*region) {
                    Some(r) => r.bounds = bounds,
                    None => return Err(PartitionError::Malformed("dangling leaf".into())),
                },
                None => return Err(PartitionError::Malformed("dangling node".into())),
            }
        }
        let [min_lat, max_lat, min_lon, max_lon] = file.bbox;
        Ok(Self {
            nodes: file.nodes,
            regions,
            bbox: BoundingBox::new(min_lat, max_lat, min_lon, max_lon),
        })
    }

    /// Number of split records between the root and each leaf, by region.
    pub fn leaf_depths(&self) -> Vec<usize> {
        let mut depths = vec![0; self.regions.len()];
        let mut stack = vec![(0usize, 0usize)];
        while let Some((node, depth)) = stack.pop() {
            match self.nodes[node] {
                Node::Split { left, right, .. } => {
                    stack.push((left, depth + 1));
                    stack.push((right, depth + 1));
                }
                Node::Leaf { region } => depths[region] = depth,
            }
        }
        depths
    }

    /// Sizes of the two point sets produced at every split, recomputed from
    /// the leaf counts.
    pub fn sibling_counts(&self) -> Vec<(usize, usize)> {
        fn total(
            nodes: &[Node],
            regions: &[Region],
            node: usize,
            out: &mut Vec<(usize, usize)>,
        ) -> usize {
            match nodes[node] {
                Node::Split { left, right, .. } => {
                    let l = total(nodes, regions, left, out);
                    let r = total(nodes, regions, right, out);
                    out.push((l, r));
                    l + r
                }
                Node::Leaf { region } => regions[region].count,
            }
        }
        let mut out = Vec::new();
        total(&self.nodes, &self.regions, 0, &mut out);
        out
    }
}
