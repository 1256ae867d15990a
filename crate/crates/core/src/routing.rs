//! Road graph, shortest paths and top-n route prediction.
//!
//! Routes run from the last known position to each of the top-n predicted
//! destination regions. Every route carries its destination score, and an
//! edge shared by several routes scores the sum of those routes' scores.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::geo::{haversine, GeoPoint};
use crate::models::Prediction;
use crate::partition::RegionId;

pub type NodeId = u64;

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error("{file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{file} line {line}: edge references unknown node {node}")]
    DanglingEdge {
        file: String,
        line: usize,
        node: NodeId,
    },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("edge cost must be positive and finite, got {0}")]
    BadCost(f64),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("no route from {from} to {to}")]
    NoRoute { from: NodeId, to: NodeId },
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("no predicted destination is reachable")]
    AllUnreachable,
    #[error("route count must be at least 1")]
    InvalidRouteCount,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Undirected road graph with positive edge costs.
#[derive(Debug, Clone, Default)]
pub struct RoadGraph {
    ids: Vec<NodeId>,
    coords: Vec<GeoPoint>,
    index: HashMap<NodeId, usize>,
    // neighbours sorted by node id
    adj: Vec<Vec<(usize, f64)>>,
}

impl RoadGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: NodeId, p: GeoPoint) -> Result<(), RoutingError> {
        if self.index.contains_key(&id) {
            return Err(RoutingError::DuplicateNode(id));
        }
        self.index.insert(id, self.ids.len());
        self.ids.push(id);
        self.coords.push(p);
        self.adj.push(Vec::new());
        Ok(())
    }

    /// Adds an undirected edge. A duplicate keeps the smaller cost and
    /// returns `Ok(true)`.
    pub fn add_edge(&mut self, u: NodeId, v: NodeId, cost: f64) -> Result<bool, RoutingError> {
        if !(cost > 0.0 && cost.is_finite()) {
            return Err(RoutingError::BadCost(cost));
        }
        let a = self.node_index(u)?;
        let b = self.node_index(v)?;
        let mut duplicate = false;
        for (from, to) in [(a, b), (b, a)] {
            let list = &mut self.adj[from];
            let to_id = self.ids[to];
            match list.binary_search_by(|&(n, _)| self.ids[n].cmp(&to_id)) {
                Ok(pos) => {
                    duplicate = true;
                    list[pos].1 = list[pos].1.min(cost);
                }
                Err(pos) => list.insert(pos, (to, cost)),
            }
            if a == b {
                break;
            }
        }
        Ok(duplicate)
    }

    fn node_index(&self, id: NodeId) -> Result<usize, RoutingError> {
        self.index
            .get(&id)
            .copied()
            .ok_or(RoutingError::UnknownNode(id))
    }

    pub fn num_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges().len()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn position(&self, id: NodeId) -> Option<GeoPoint> {
        self.index.get(&id).map(|&i| self.coords[i])
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, GeoPoint)> + '_ {
        self.ids.iter().copied().zip(self.coords.iter().copied())
    }

    /// Edges as `(u, v, cost)` with `u < v`, sorted.
    pub fn edges(&self) -> Vec<(NodeId, NodeId, f64)> {
        let mut out = Vec::new();
        for (a, list) in self.adj.iter().enumerate() {
            for &(b, cost) in list {
                if self.ids[a] <= self.ids[b] {
                    out.push((self.ids[a], self.ids[b], cost));
                }
            }
        }
        out.sort_by_key(|e| (e.0, e.1));
        out
    }

    pub fn edge_cost(&self, u: NodeId, v: NodeId) -> Option<f64> {
        let a = *self.index.get(&u)?;
        let b = *self.index.get(&v)?;
        self.adj[a].iter().find(|&&(n, _)| n == b).map(|&(_, c)| c)
    }

    /// Node closest to `p` by haversine distance; ties go to the smaller id.
    pub fn nearest_node(&self, p: GeoPoint) -> Option<NodeId> {
        self.ids
            .iter()
            .zip(&self.coords)
            .map(|(&id, &c)| (haversine(p, c), id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, id)| id)
    }

    /// Single-source Dijkstra. On equal cost the predecessor with the smaller
    /// node id wins, which makes every path deterministic.
    pub fn shortest_path_tree(&self, src: NodeId) -> Result<ShortestPathTree<'_>, RoutingError> {
        let s = self.node_index(src)?;
        let n = self.ids.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred: Vec<Option<usize>> = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[s] = 0.0;
        heap.push(Entry {
            cost: 0.0,
            id: self.ids[s],
            idx: s,
        });
        while let Some(Entry { cost, idx, .. }) = heap.pop() {
            if done[idx] {
                continue;
            }
            done[idx] = true;
            for &(next, w) in &self.adj[idx] {
                if done[next] {
                    continue;
                }
                let candidate = cost + w;
                let better = candidate < dist[next]
                    || (candidate == dist[next]
                        && pred[next].is_some_and(|p| self.ids[idx] < self.ids[p]));
                if better {
                    let improved = candidate < dist[next];
                    dist[next] = candidate;
                    pred[next] = Some(idx);
                    if improved {
                        heap.push(Entry {
                            cost: candidate,
                            id: self.ids[next],
                            idx: next,
                        });
                    }
                }
            }
        }
        Ok(ShortestPathTree {
            graph: self,
            source: s,
            dist,
            pred,
        })
    }

    pub fn shortest_path(&self, src: NodeId, dst: NodeId) -> Result<GraphPath, RoutingError> {
        self.node_index(dst)?;
        self.shortest_path_tree(src)?.path_to(dst)
    }

    /// Reads `id lat lon` node lines and `u v cost` edge lines. Blank lines
    /// and lines starting with `#` are skipped. Returns the graph and the
    /// number of duplicate edges collapsed.
    pub fn load(nodes_path: &Path, edges_path: &Path) -> Result<(Self, usize), RoutingError> {
        let mut g = RoadGraph::new();
        let nodes_name = nodes_path.display().to_string();
        for (line_no, fields) in data_lines(nodes_path)? {
            let err = |msg: &str| RoutingError::Parse {
                file: nodes_name.clone(),
                line: line_no,
                msg: msg.to_string(),
            };
            if fields.len() != 3 {
                return Err(err("expected `id lat lon`"));
            }
            let id: NodeId = fields[0].parse().map_err(|_| err("bad node id"))?;
            let lat: f64 = fields[1].parse().map_err(|_| err("bad latitude"))?;
            let lon: f64 = fields[2].parse().map_err(|_| err("bad longitude"))?;
            let p = GeoPoint::checked(lat, lon).map_err(|e| err(&e.to_string()))?;
            g.add_node(id, p).map_err(|e| err(&e.to_string()))?;
        }
        let edges_name = edges_path.display().to_string();
        let mut duplicates = 0;
        for (line_no, fields) in data_lines(edges_path)? {
            let err = |msg: &str| RoutingError::Parse {
                file: edges_name.clone(),
                line: line_no,
                msg: msg.to_string(),
            };
            if fields.len() != 3 {
                return Err(err("expected `u v cost`"));
            }
            let u: NodeId = fields[0].parse().map_err(|_| err("bad node id"))?;
            let v: NodeId = fields[1].parse().map_err(|_| err("bad node id"))?;
            let cost: f64 = fields[2].parse().map_err(|_| err("bad cost"))?;
            for node in [u, v] {
                if !g.contains(node) {
                    return Err(RoutingError::DanglingEdge {
                        file: edges_name.clone(),
                        line: line_no,
                        node,
                    });
                }
            }
            match g.add_edge(u, v, cost) {
                Ok(true) => {
                    log::warn!("{edges_name} line {line_no}: duplicate edge {u}-{v}, keeping the cheaper one");
                    duplicates += 1;
                }
                Ok(false) => {}
                Err(e) => return Err(err(&e.to_string())),
            }
        }
        Ok((g, duplicates))
    }

    pub fn write(&self, nodes_path: &Path, edges_path: &Path) -> Result<(), RoutingError> {
        let mut w = BufWriter::new(File::create(nodes_path)?);
        for (id, p) in self.nodes() {
            writeln!(w, "{id} {} {}", p.lat, p.lon)?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(edges_path)?);
        for (u, v, c) in self.edges() {
            writeln!(w, "{u} {v} {c}")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn data_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>, RoutingError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((
            i + 1,
            trimmed.split_whitespace().map(str::to_string).collect(),
        ));
    }
    Ok(out)
}

#[derive(Debug, PartialEq)]
struct Entry {
    cost: f64,
    id: NodeId,
    idx: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (cost, id)
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphPath {
    pub nodes: Vec<NodeId>,
    pub cost: f64,
}

pub struct ShortestPathTree<'g> {
    graph: &'g RoadGraph,
    source: usize,
    dist: Vec<f64>,
    pred: Vec<Option<usize>>,
}

impl ShortestPathTree<'_> {
    pub fn cost_to(&self, dst: NodeId) -> Option<f64> {
        let i = *self.graph.index.get(&dst)?;
        self.dist[i].is_finite().then_some(self.dist[i])
    }

    pub fn path_to(&self, dst: NodeId) -> Result<GraphPath, RoutingError> {
        let g = self.graph;
        let d = g.node_index(dst)?;
        if !self.dist[d].is_finite() {
            return Err(RoutingError::NoRoute {
                from: g.ids[self.source],
                to: dst,
            });
        }
        let mut nodes = vec![g.ids[d]];
        let mut cur = d;
        while let Some(p) = self.pred[cur] {
            nodes.push(g.ids[p]);
            cur = p;
        }
        nodes.reverse();
        Ok(GraphPath {
            nodes,
            cost: self.dist[d],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictedRoute {
    pub region: RegionId,
    pub score: f64,
    pub nodes: Vec<NodeId>,
    pub cost: f64,
}

/// Undirected edge key with `u < v`.
pub fn edge_key(u: NodeId, v: NodeId) -> (NodeId, NodeId) {
    (u.min(v), u.max(v))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutePrediction {
    pub start_node: NodeId,
    pub routes: Vec<PredictedRoute>,
    pub edge_scores: BTreeMap<(NodeId, NodeId), f64>,
}

impl RoutePrediction {
    /// Builds the merged edge scores from a set of routes.
    pub fn from_routes(start_node: NodeId, routes: Vec<PredictedRoute>) -> Self {
        let mut edge_scores = BTreeMap::new();
        for route in &routes {
            let mut seen = std::collections::BTreeSet::new();
            for w in route.nodes.windows(2) {
                let key = edge_key(w[0], w[1]);
                if seen.insert(key) {
                    *edge_scores.entry(key).or_insert(0.0) += route.score;
                }
            }
        }
        Self {
            start_node,
            routes,
            edge_scores,
        }
    }

    /// Edges whose merged score is at least `threshold`, sorted.
    pub fn edges_above(&self, threshold: f64) -> Vec<(NodeId, NodeId)> {
        self.edge_scores
            .iter()
            .filter(|(_, &s)| s >= threshold)
            .map(|(&k, _)| k)
            .collect()
    }

    pub fn to_geojson(&self, graph: &RoadGraph) -> serde_json::Value {
        let coord = |id: NodeId| {
            let p = graph
                .position(id)
                .unwrap_or(GeoPoint::new(f64::NAN, f64::NAN));
            [p.lon, p.lat]
        };
        let mut features = Vec::new();
        for r in &self.routes {
            let line: Vec<[f64; 2]> = r.nodes.iter().map(|&n| coord(n)).collect();
            features.push(json!({
                "type": "Feature",
                "geometry": { "type": "LineString", "coordinates": line },
                "properties": { "kind": "route", "region_id": r.region.0, "score": r.score, "cost": r.cost }
            }));
        }
        for (&(u, v), &s) in &self.edge_scores {
            features.push(json!({
                "type": "Feature",
                "geometry": { "type": "LineString", "coordinates": [coord(u), coord(v)] },
                "properties": { "kind": "edge", "u": u, "v": v, "merged_score": s }
            }));
        }
        json!({ "type": "FeatureCollection", "features": features })
    }
}

/// Routes from the node nearest `last_pos` to the nodes nearest the top-`n`
/// predicted region centroids. Unreachable destinations are skipped.
pub fn predict_routes(
    graph: &RoadGraph,
    last_pos: GeoPoint,
    prediction: &Prediction,
    centroids: &[GeoPoint],
    n: usize,
) -> Result<RoutePrediction, RoutingError> {
    if n == 0 {
        return Err(RoutingError::InvalidRouteCount);
    }
    let start = graph
        .nearest_node(last_pos)
        .ok_or(RoutingError::EmptyGraph)?;
    let tree = graph.shortest_path_tree(start)?;
    let mut routes = Vec::new();
    for &(region, score) in prediction.top_n.iter().take(n) {
        let Some(&target) = centroids.get(region.index()) else {
            continue;
        };
        let dst = graph.nearest_node(target).ok_or(RoutingError::EmptyGraph)?;
        match tree.path_to(dst) {
            Ok(path) => routes.push(PredictedRoute {
                region,
                score,
                nodes: path.nodes,
                cost: path.cost,
            }),
            Err(RoutingError::NoRoute { .. }) => {
                log::warn!(
                    "destination region {} unreachable from node {start}",
                    region.0
                );
            }
            Err(e) => return Err(e),
        }
    }
    if routes.is_empty() {
        return Err(RoutingError::AllUnreachable);
    }
    Ok(RoutePrediction::from_routes(start, routes))
}

/// Square grid road network: node `row * size + col`, edges between
/// 4-neighbours costed by their haversine length in meters.
pub fn grid_graph(origin: GeoPoint, size: usize, spacing_m: f64) -> RoadGraph {
    let plane = crate::geo::LocalPlane::new(origin);
    let (dx, _) = plane.project(GeoPoint::new(origin.lat, origin.lon + 1.0));
    let (_, dy) = plane.project(GeoPoint::new(origin.lat + 1.0, origin.lon));
    let (dlon, dlat) = (spacing_m / dx, spacing_m / dy);
    let mut g = RoadGraph::new();
    for row in 0..size {
        for col in 0..size {
            let p = GeoPoint::new(
                origin.lat + row as f64 * dlat,
                origin.lon + col as f64 * dlon,
            );
            g.add_node((row * size + col) as NodeId, p)
                .expect("unique ids");
        }
    }
    for row in 0..size {
        for col in 0..size {
            let id = (row * size + col) as NodeId;
            let here = g.position(id).expect("node exists");
            let mut link = |other: NodeId| {
                let there = g.position(other).expect("node exists");
                g.add_edge(id, other, haversine(here, there))
                    .expect("valid edge");
            };
            if col + 1 < size {
                link(id + 1);
            }
            if row + 1 < size {
                link(id + size as NodeId);
            }
        }
    }
    g
}
