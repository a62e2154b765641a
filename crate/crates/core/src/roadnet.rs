//! Directed road network with a uniform-grid spatial index.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geo::{haversine, point_segment, LngLat, LocalFrame, EARTH_RADIUS_M};
use crate::{Error, Result};

pub type NodeId = u64;
pub type SegmentId = usize;

/// Grid cell edge, twice the largest default query radius (δ = 100 m).
pub const INDEX_CELL_M: f64 = 200.0;
const ENDPOINT_TOLERANCE_DEG: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub pos: LngLat,
}

/// Segment description used to build a network; lengths are derived.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSpec {
    pub id: SegmentId,
    pub from: NodeId,
    pub to: NodeId,
    pub polyline: Vec<LngLat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub id: SegmentId,
    pub from: NodeId,
    pub to: NodeId,
    pub polyline: Vec<LngLat>,
    pub length_m: f64,
    /// Arclength at each polyline vertex.
    cumulative: Vec<f64>,
}

impl Segment {
    fn new(spec: SegmentSpec) -> Result<Self> {
        if spec.polyline.len() < 2 {
            return Err(Error::Network(format!("segment {} needs at least 2 polyline points", spec.id)));
        }
        let mut cumulative = Vec::with_capacity(spec.polyline.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in spec.polyline.windows(2) {
            acc += haversine(w[0], w[1]);
            cumulative.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::Network(format!("segment {} has zero length", spec.id)));
        }
        Ok(Self { id: spec.id, from: spec.from, to: spec.to, polyline: spec.polyline, length_m: acc, cumulative })
    }

    pub fn spec(&self) -> SegmentSpec {
        SegmentSpec { id: self.id, from: self.from, to: self.to, polyline: self.polyline.clone() }
    }

    /// Distance from `p` to the polyline and the arclength fraction of the
    /// closest point, measured in a local frame centred on `p`.
    pub fn project_point(&self, p: LngLat) -> (f64, f64) {
        let frame = LocalFrame::new(p);
        let origin = (0.0, 0.0);
        let mut best = (f64::INFINITY, 0.0);
        for (k, w) in self.polyline.windows(2).enumerate() {
            let (d, t) = point_segment(origin, frame.to_xy(w[0]), frame.to_xy(w[1]));
            if d < best.0 {
                let sub = self.cumulative[k + 1] - self.cumulative[k];
                best = (d, (self.cumulative[k] + t * sub) / self.length_m);
            }
        }
        (best.0, best.1.clamp(0.0, 1.0))
    }

    /// Coordinate at arclength `fraction · length_m`.
    pub fn point_at(&self, fraction: f64) -> LngLat {
        let target = fraction * self.length_m;
        let k = match self.cumulative.iter().position(|&c| c >= target) {
            Some(0) => return self.polyline[0],
            Some(k) => k,
            None => return *self.polyline.last().expect("polyline is non-empty"),
        };
        let (c0, c1) = (self.cumulative[k - 1], self.cumulative[k]);
        let t = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.0 };
        self.polyline[k - 1].lerp(self.polyline[k], t)
    }
}

/// A location on the network: segment plus traveled fraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadPos {
    pub segment: SegmentId,
    pub fraction: f64,
}

impl RoadPos {
    pub fn new(segment: SegmentId, fraction: f64) -> Self {
        Self { segment, fraction }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub segment: SegmentId,
    pub fraction: f64,
    pub offset_m: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub segments: Vec<SegmentId>,
    pub distance_m: f64,
}

#[derive(Clone, Debug)]
struct GridIndex {
    frame: LocalFrame,
    cell_m: f64,
    min_x: f64,
    min_y: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<SegmentId>>,
}

impl GridIndex {
    fn build(segments: &[Segment], cell_m: f64) -> Self {
        let pts = segments.iter().flat_map(|s| s.polyline.iter());
        let (mut lo, mut hi) = (LngLat::new(f64::MAX, f64::MAX), LngLat::new(f64::MIN, f64::MIN));
        for p in pts {
            lo = LngLat::new(lo.lng.min(p.lng), lo.lat.min(p.lat));
            hi = LngLat::new(hi.lng.max(p.lng), hi.lat.max(p.lat));
        }
        if segments.is_empty() {
            lo = LngLat::new(0.0, 0.0);
            hi = lo;
        }
        let frame = LocalFrame::new(lo.lerp(hi, 0.5));
        let (min_x, min_y) = frame.to_xy(lo);
        let (max_x, max_y) = frame.to_xy(hi);
        let nx = ((max_x - min_x) / cell_m).floor() as usize + 1;
        let ny = ((max_y - min_y) / cell_m).floor() as usize + 1;
        let mut idx = Self { frame, cell_m, min_x, min_y, nx, ny, cells: vec![Vec::new(); nx * ny] };
        for s in segments {
            let mut touched = Vec::new();
            for w in s.polyline.windows(2) {
                let (a, b) = (frame.to_xy(w[0]), frame.to_xy(w[1]));
                let r = idx.cell_range(a.0.min(b.0), a.1.min(b.1), a.0.max(b.0), a.1.max(b.1));
                if let Some((x0, y0, x1, y1)) = r {
                    for cy in y0..=y1 {
                        for cx in x0..=x1 {
                            touched.push(cy * nx + cx);
                        }
                    }
                }
            }
            touched.sort_unstable();
            touched.dedup();
            for c in touched {
                idx.cells[c].push(s.id);
            }
        }
        idx
    }

    fn cell_range(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<(usize, usize, usize, usize)> {
        let to_cell = |v: f64, min: f64| ((v - min) / self.cell_m).floor();
        let (cx0, cy0) = (to_cell(x0, self.min_x), to_cell(y0, self.min_y));
        let (cx1, cy1) = (to_cell(x1, self.min_x), to_cell(y1, self.min_y));
        if cx1 < 0.0 || cy1 < 0.0 || cx0 >= self.nx as f64 || cy0 >= self.ny as f64 {
            return None;
        }
        let clamp = |c: f64, n: usize| c.max(0.0).min((n - 1) as f64) as usize;
        Some((clamp(cx0, self.nx), clamp(cy0, self.ny), clamp(cx1, self.nx), clamp(cy1, self.ny)))
    }

    /// Segment ids whose cells intersect the square of half-width `radius_m`
    /// around `p` (a superset of the true answer).
    fn candidates(&self, p: LngLat, radius_m: f64, out: &mut Vec<SegmentId>) {
        out.clear();
        // Slack for the difference between this frame and the query-centred one.
        let r = radius_m * 1.01 + 1.0;
        let (x, y) = self.frame.to_xy(p);
        if let Some((x0, y0, x1, y1)) = self.cell_range(x - r, y - r, x + r, y + r) {
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    out.extend_from_slice(&self.cells[cy * self.nx + cx]);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
    }

    fn diagonal_m(&self) -> f64 {
        self.cell_m * ((self.nx * self.nx + self.ny * self.ny) as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    node_slot: HashMap<NodeId, usize>,
    segments: Vec<Segment>,
    out_edges: Vec<Vec<SegmentId>>,
    index: GridIndex,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    dist: f64,
    slot: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance, then on node slot for determinism.
        other.dist.total_cmp(&self.dist).then_with(|| other.slot.cmp(&self.slot))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl RoadNetwork {
    pub fn build(nodes: Vec<Node>, segments: Vec<SegmentSpec>) -> Result<Self> {
        let mut node_slot = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if !n.pos.is_valid() {
                return Err(Error::Network(format!("node {} has invalid coordinate {:?}", n.id, n.pos)));
            }
            if node_slot.insert(n.id, i).is_some() {
                return Err(Error::Network(format!("duplicate node id {}", n.id)));
            }
        }
        let count = segments.len();
        let mut slots: Vec<Option<Segment>> = vec![None; count];
        for spec in segments {
            if spec.id >= count {
                return Err(Error::Network(format!("segment id {} outside [0, {count})", spec.id)));
            }
            if slots[spec.id].is_some() {
                return Err(Error::Network(format!("duplicate segment id {}", spec.id)));
            }
            for end in [spec.from, spec.to] {
                if !node_slot.contains_key(&end) {
                    return Err(Error::Network(format!("segment {}: unknown node {end}", spec.id)));
                }
            }
            let first = *spec.polyline.first().ok_or_else(|| Error::Network(format!("segment {} has no geometry", spec.id)))?;
            let last = *spec.polyline.last().expect("checked non-empty");
            let (from_pos, to_pos) = (nodes[node_slot[&spec.from]].pos, nodes[node_slot[&spec.to]].pos);
            let close = |a: LngLat, b: LngLat| {
                (a.lng - b.lng).abs() <= ENDPOINT_TOLERANCE_DEG && (a.lat - b.lat).abs() <= ENDPOINT_TOLERANCE_DEG
            };
            if !close(first, from_pos) || !close(last, to_pos) {
                return Err(Error::Network(format!(
                    "segment {}: polyline endpoints do not match nodes {} and {}",
                    spec.id, spec.from, spec.to
                )));
            }
            let id = spec.id;
            slots[id] = Some(Segment::new(spec)?);
        }
        let segments: Vec<Segment> = slots.into_iter().map(|s| s.expect("ids cover 0..count")).collect();
        let mut out_edges = vec![Vec::new(); nodes.len()];
        for s in &segments {
            out_edges[node_slot[&s.from]].push(s.id);
        }
        let index = GridIndex::build(&segments, INDEX_CELL_M);
        Ok(Self { nodes, node_slot, segments, out_edges, index })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, id: SegmentId) -> Result<&Segment> {
        self.segments.get(id).ok_or(Error::UnknownSegment(id))
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.node_slot.get(&id).map(|&s| &self.nodes[s]).ok_or(Error::UnknownNode(id))
    }

    /// Out-going segment ids of a node.
    pub fn out_segments(&self, id: NodeId) -> Result<&[SegmentId]> {
        self.node_slot.get(&id).map(|&s| self.out_edges[s].as_slice()).ok_or(Error::UnknownNode(id))
    }

    /// Bounding box `(min, max)` over all node coordinates.
    pub fn bbox(&self) -> (LngLat, LngLat) {
        let mut lo = LngLat::new(f64::MAX, f64::MAX);
        let mut hi = LngLat::new(f64::MIN, f64::MIN);
        for s in &self.segments {
            for p in &s.polyline {
                lo = LngLat::new(lo.lng.min(p.lng), lo.lat.min(p.lat));
                hi = LngLat::new(hi.lng.max(p.lng), hi.lat.max(p.lat));
            }
        }
        (lo, hi)
    }

    /// Segments whose geometry lies within `delta_m` of `p`, nearest first
    /// (ties by lower id).
    pub fn neighbors_within(&self, p: LngLat, delta_m: f64) -> Vec<SegmentId> {
        self.neighbors_with_distance(p, delta_m).into_iter().map(|(s, _)| s).collect()
    }

    pub fn neighbors_with_distance(&self, p: LngLat, delta_m: f64) -> Vec<(SegmentId, f64)> {
        let mut cand = Vec::new();
        self.index.candidates(p, delta_m, &mut cand);
        let mut hits: Vec<(SegmentId, f64)> = cand
            .into_iter()
            .filter_map(|s| {
                let (d, _) = self.segments[s].project_point(p);
                (d <= delta_m).then_some((s, d))
            })
            .collect();
        hits.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        hits
    }

    /// Nearest segment to `p`, with the fraction and perpendicular offset of
    /// the closest point.
    pub fn project(&self, p: LngLat) -> Result<Projection> {
        if self.segments.is_empty() {
            return Err(Error::Network("cannot project onto an empty network".into()));
        }
        let mut radius = self.index.cell_m;
        let limit = self.index.diagonal_m() + self.index.cell_m;
        let nearest = loop {
            if let Some(&(s, _)) = self.neighbors_with_distance(p, radius).first() {
                break s;
            }
            if radius > limit {
                // Far outside the indexed area: scan everything.
                break (0..self.segments.len())
                    .map(|s| (s, self.segments[s].project_point(p).0))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                    .expect("non-empty network")
                    .0;
            }
            radius *= 2.0;
        };
        Ok(self.project_onto(nearest, p))
    }

    pub fn project_onto(&self, segment: SegmentId, p: LngLat) -> Projection {
        let (offset_m, fraction) = self.segments[segment].project_point(p);
        Projection { segment, fraction, offset_m }
    }

    pub fn locate(&self, segment: SegmentId, fraction: f64) -> Result<LngLat> {
        let s = self.segment(segment)?;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Network(format!("fraction {fraction} outside [0, 1]")));
        }
        Ok(s.point_at(fraction))
    }

    fn check_pos(&self, p: RoadPos) -> Result<()> {
        self.segment(p.segment)?;
        if !(0.0..=1.0).contains(&p.fraction) {
            return Err(Error::Network(format!("fraction {} outside [0, 1]", p.fraction)));
        }
        Ok(())
    }

    /// Dijkstra from a node slot; returns distance and incoming segment per slot.
    fn dijkstra(&self, source: usize) -> (Vec<f64>, Vec<Option<SegmentId>>) {
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(HeapItem { dist: 0.0, slot: source });
        while let Some(HeapItem { dist: d, slot }) = heap.pop() {
            if d > dist[slot] {
                continue;
            }
            for &s in &self.out_edges[slot] {
                let seg = &self.segments[s];
                let next = self.node_slot[&seg.to];
                let nd = d + seg.length_m;
                if nd < dist[next] {
                    dist[next] = nd;
                    pred[next] = Some(s);
                    heap.push(HeapItem { dist: nd, slot: next });
                }
            }
        }
        (dist, pred)
    }

    /// Shortest directed route between two on-network positions. `Ok(None)`
    /// when the destination cannot be reached.
    pub fn shortest_path(&self, src: RoadPos, dst: RoadPos) -> Result<Option<Route>> {
        self.check_pos(src)?;
        self.check_pos(dst)?;
        if src == dst {
            return Ok(Some(Route { segments: Vec::new(), distance_m: 0.0 }));
        }
        if src.segment == dst.segment && dst.fraction >= src.fraction {
            let len = self.segments[src.segment].length_m;
            return Ok(Some(Route { segments: vec![src.segment], distance_m: len * (dst.fraction - src.fraction) }));
        }
        let (s, d) = (&self.segments[src.segment], &self.segments[dst.segment]);
        let start = self.node_slot[&s.to];
        let goal = self.node_slot[&d.from];
        let (dist, pred) = self.dijkstra(start);
        if !dist[goal].is_finite() {
            return Ok(None);
        }
        let mut middle = Vec::new();
        let mut at = goal;
        while at != start {
            let seg = pred[at].expect("reachable node has a predecessor");
            middle.push(seg);
            at = self.node_slot[&self.segments[seg].from];
        }
        middle.reverse();
        let mut segments = Vec::with_capacity(middle.len() + 2);
        segments.push(src.segment);
        segments.extend(middle);
        segments.push(dst.segment);
        let distance_m = s.length_m * (1.0 - src.fraction) + dist[goal] + d.length_m * dst.fraction;
        Ok(Some(Route { segments, distance_m }))
    }

    /// Directed route lengths from `src` to each target with one Dijkstra run.
    pub fn route_distances(&self, src: RoadPos, targets: &[RoadPos]) -> Vec<Option<f64>> {
        let s = &self.segments[src.segment];
        let (dist, _) = self.dijkstra(self.node_slot[&s.to]);
        targets
            .iter()
            .map(|t| {
                if t.segment == src.segment && t.fraction >= src.fraction {
                    return Some(s.length_m * (t.fraction - src.fraction));
                }
                let d = &self.segments[t.segment];
                let via = dist[self.node_slot[&d.from]];
                via.is_finite().then_some(s.length_m * (1.0 - src.fraction) + via + d.length_m * t.fraction)
            })
            .collect()
    }

    /// Route-based distance between two positions, whichever direction is
    /// shorter.
    pub fn road_distance(&self, a: RoadPos, b: RoadPos) -> Result<f64> {
        let ab = self.shortest_path(a, b)?.map(|r| r.distance_m);
        let ba = self.shortest_path(b, a)?.map(|r| r.distance_m);
        match (ab, ba) {
            (Some(x), Some(y)) => Ok(x.min(y)),
            (Some(x), None) | (None, Some(x)) => Ok(x),
            (None, None) => Err(Error::Disconnected { from: a.segment, to: b.segment }),
        }
    }

    /// Node-to-node shortest route as a segment list.
    pub fn node_route(&self, from: NodeId, to: NodeId) -> Result<Option<Route>> {
        let (&a, &b) = (
            self.node_slot.get(&from).ok_or(Error::UnknownNode(from))?,
            self.node_slot.get(&to).ok_or(Error::UnknownNode(to))?,
        );
        let (dist, pred) = self.dijkstra(a);
        if !dist[b].is_finite() {
            return Ok(None);
        }
        let mut segments = Vec::new();
        let mut at = b;
        while at != a {
            let seg = pred[at].expect("reachable node has a predecessor");
            segments.push(seg);
            at = self.node_slot[&self.segments[seg].from];
        }
        segments.reverse();
        Ok(Some(Route { segments, distance_m: dist[b] }))
    }
}

/// Regular `rows × cols` grid with two-way segments between neighbors.
/// Node `(r, c)` gets id `r · cols + c`; segment ids are a seeded permutation.
pub fn synth_grid_network(
    rows: usize,
    cols: usize,
    spacing_m: f64,
    origin_lng: f64,
    origin_lat: f64,
    seed: u64,
) -> Result<RoadNetwork> {
    if rows < 2 || cols < 2 {
        return Err(Error::Network(format!("grid needs at least 2x2 nodes, got {rows}x{cols}")));
    }
    if spacing_m <= 0.0 || !spacing_m.is_finite() {
        return Err(Error::Network(format!("grid spacing must be positive, got {spacing_m}")));
    }
    let deg_lat = (spacing_m / EARTH_RADIUS_M).to_degrees();
    let deg_lng = deg_lat / origin_lat.to_radians().cos();
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let pos = LngLat::new(origin_lng + c as f64 * deg_lng, origin_lat + r as f64 * deg_lat);
            nodes.push(Node { id: (r * cols + c) as NodeId, pos });
        }
    }
    let mut pairs = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let here = r * cols + c;
            if c + 1 < cols {
                pairs.push((here, here + 1));
                pairs.push((here + 1, here));
            }
            if r + 1 < rows {
                pairs.push((here, here + cols));
                pairs.push((here + cols, here));
            }
        }
    }
    let mut ids: Vec<SegmentId> = (0..pairs.len()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let specs = pairs
        .iter()
        .zip(ids)
        .map(|(&(a, b), id)| SegmentSpec {
            id,
            from: a as NodeId,
            to: b as NodeId,
            polyline: vec![nodes[a].pos, nodes[b].pos],
        })
        .collect();
    RoadNetwork::build(nodes, specs)
}

#[derive(Serialize, Deserialize)]
struct NodeRow {
    node_id: NodeId,
    lng: f64,
    lat: f64,
}

#[derive(Serialize, Deserialize)]
struct EdgeRow {
    edge_id: SegmentId,
    from_node: NodeId,
    to_node: NodeId,
    polyline: String,
}

fn format_polyline(points: &[LngLat]) -> String {
    points.iter().map(|p| format!("{} {}", p.lng, p.lat)).collect::<Vec<_>>().join(";")
}

fn parse_polyline(s: &str, line: u64) -> Result<Vec<LngLat>> {
    s.split(';')
        .map(|pair| {
            let mut it = pair.split_whitespace();
            let parse = |v: Option<&str>| -> Result<f64> {
                v.and_then(|x| x.parse().ok())
                    .ok_or_else(|| Error::Malformed { line, message: format!("bad polyline point {pair:?}") })
            };
            let p = LngLat::new(parse(it.next())?, parse(it.next())?);
            if it.next().is_some() {
                return Err(Error::Malformed { line, message: format!("bad polyline point {pair:?}") });
            }
            Ok(p)
        })
        .collect()
}

/// Writes `nodes.csv` and `edges.csv` into `dir`.
pub fn write_network(net: &RoadNetwork, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("nodes.csv"))?;
    for n in &net.nodes {
        w.serialize(NodeRow { node_id: n.id, lng: n.pos.lng, lat: n.pos.lat })?;
    }
    w.flush().map_err(|e| Error::io(dir.join("nodes.csv"), e))?;
    let mut w = csv::Writer::from_path(dir.join("edges.csv"))?;
    for s in &net.segments {
        w.serialize(EdgeRow {
            edge_id: s.id,
            from_node: s.from,
            to_node: s.to,
            polyline: format_polyline(&s.polyline),
        })?;
    }
    w.flush().map_err(|e| Error::io(dir.join("edges.csv"), e))?;
    Ok(())
}

pub fn read_network(nodes_csv: &Path, edges_csv: &Path) -> Result<RoadNetwork> {
    let mut nodes = Vec::new();
    let mut r = csv::Reader::from_path(nodes_csv)?;
    for (i, row) in r.deserialize::<NodeRow>().enumerate() {
        let row = row.map_err(|e| Error::Malformed { line: i as u64 + 2, message: e.to_string() })?;
        nodes.push(Node { id: row.node_id, pos: LngLat::new(row.lng, row.lat) });
    }
    let mut segments = Vec::new();
    let mut r = csv::Reader::from_path(edges_csv)?;
    for (i, row) in r.deserialize::<EdgeRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::Malformed { line, message: e.to_string() })?;
        segments.push(SegmentSpec {
            id: row.edge_id,
            from: row.from_node,
            to: row.to_node,
            polyline: parse_polyline(&row.polyline, line)?,
        });
    }
    RoadNetwork::build(nodes, segments)
}

/// Reads `nodes.csv` and `edges.csv` from a directory.
pub fn read_network_dir(dir: &Path) -> Result<RoadNetwork> {
    read_network(&dir.join("nodes.csv"), &dir.join("edges.csv"))
}
