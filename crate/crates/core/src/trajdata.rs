//! Trajectory datasets: CSV ingestion, synthetic generation, resampling to a
//! coarser interval, feature removal and chronological splitting.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geo::{LngLat, LocalFrame};
use crate::mapmatch::{MatchedPoint, MatchedTrajectory};
use crate::roadnet::{NodeId, RoadNetwork, SegmentId};
use crate::{Error, Result};

/// Trajectories shorter than this are discarded on ingestion.
pub const MIN_POINTS: usize = 6;
/// Times enter the model in minutes.
pub const DEFAULT_TIME_SCALE_S: f64 = 60.0;
const GAP_TOLERANCE_S: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub pos: LngLat,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub points: Vec<GpsPoint>,
}

impl Trajectory {
    pub fn departure(&self) -> f64 {
        self.points.first().map_or(f64::INFINITY, |p| p.t)
    }

    pub fn duration(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// The common gap between consecutive points, if there is one.
    pub fn constant_gap(&self) -> Option<f64> {
        let first = self.points.windows(2).next().map(|w| w[1].t - w[0].t)?;
        let ok = first > 0.0 && self.points.windows(2).all(|w| (w[1].t - w[0].t - first).abs() <= GAP_TOLERANCE_S);
        ok.then_some(first)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: LngLat,
    pub max: LngLat,
}

impl BBox {
    pub fn around<'a>(points: impl IntoIterator<Item = &'a LngLat>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = BBox { min: first, max: first };
        for p in it {
            b.min = LngLat::new(b.min.lng.min(p.lng), b.min.lat.min(p.lat));
            b.max = LngLat::new(b.max.lng.max(p.lng), b.max.lat.max(p.lat));
        }
        Some(b)
    }

    pub fn contains(&self, p: LngLat) -> bool {
        (self.min.lng..=self.max.lng).contains(&p.lng) && (self.min.lat..=self.max.lat).contains(&p.lat)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    /// Sampling interval η; 0 for an empty dataset.
    pub interval_s: f64,
    pub bbox: BBox,
    pub time_scale_s: f64,
}

impl Dataset {
    /// Validates that every trajectory has the constant gap `interval_s`.
    pub fn new(trajectories: Vec<Trajectory>, interval_s: f64) -> Result<Self> {
        for t in &trajectories {
            match t.constant_gap() {
                Some(g) if (g - interval_s).abs() <= GAP_TOLERANCE_S => {}
                _ => return Err(Error::Data(format!("trajectory {} is not sampled every {interval_s} s", t.id))),
            }
        }
        let bbox = BBox::around(trajectories.iter().flat_map(|t| t.points.iter().map(|p| &p.pos)))
            .unwrap_or(BBox { min: LngLat::new(0.0, 0.0), max: LngLat::new(0.0, 0.0) });
        Ok(Self { trajectories, interval_s, bbox, time_scale_s: DEFAULT_TIME_SCALE_S })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// A dataset over a subset of trajectories that keeps this one's
    /// interval, bounding box and time scale (so normalization is shared).
    pub fn subset(&self, trajectories: Vec<Trajectory>) -> Dataset {
        Dataset { trajectories, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset { trajectories: Vec::new(), interval_s: self.interval_s, bbox: self.bbox, time_scale_s: self.time_scale_s }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub dropped_short: usize,
    pub rejected_gap: usize,
}

#[derive(Serialize, Deserialize)]
struct PointRow {
    traj_id: u64,
    point_idx: usize,
    lng: f64,
    lat: f64,
    timestamp: f64,
}

/// Reads `traj_id,point_idx,lng,lat,timestamp` rows. Trajectories with too
/// few points are dropped and ones with irregular gaps rejected; both are
/// counted in the report.
pub fn ingest_csv(path: &Path) -> Result<(Dataset, IngestReport)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Data(format!("cannot read {}: {e}", path.display())),
        _ => Error::Csv(e),
    })?;
    let mut groups: BTreeMap<u64, Vec<(usize, GpsPoint)>> = BTreeMap::new();
    for (i, row) in reader.deserialize::<PointRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::Malformed { line, message: e.to_string() })?;
        let pos = LngLat::new(row.lng, row.lat);
        if !pos.is_valid() || !row.timestamp.is_finite() {
            return Err(Error::Malformed { line, message: "coordinate or timestamp out of range".into() });
        }
        groups.entry(row.traj_id).or_default().push((row.point_idx, GpsPoint { pos, t: row.timestamp }));
    }
    let mut report = IngestReport::default();
    let mut candidates = Vec::new();
    for (id, mut pts) in groups {
        pts.sort_by_key(|p| p.0);
        if pts.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Data(format!("trajectory {id} repeats a point_idx")));
        }
        let traj = Trajectory { id, points: pts.into_iter().map(|p| p.1).collect() };
        if traj.points.len() < MIN_POINTS {
            report.dropped_short += 1;
            continue;
        }
        match traj.constant_gap() {
            Some(g) => candidates.push((g, traj)),
            None => report.rejected_gap += 1,
        }
    }
    // The dataset interval is the most common per-trajectory gap.
    let mut votes: Vec<(f64, usize)> = Vec::new();
    for (g, _) in &candidates {
        match votes.iter_mut().find(|(v, _)| (v - g).abs() <= GAP_TOLERANCE_S) {
            Some(v) => v.1 += 1,
            None => votes.push((*g, 1)),
        }
    }
    let interval = votes
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.total_cmp(&a.0)))
        .map_or(0.0, |v| v.0);
    let mut kept = Vec::new();
    for (g, t) in candidates {
        if (g - interval).abs() <= GAP_TOLERANCE_S {
            kept.push(t);
        } else {
            report.rejected_gap += 1;
        }
    }
    if report.dropped_short + report.rejected_gap > 0 {
        log::warn!(
            "{}: dropped {} short and {} irregular trajectories",
            path.display(),
            report.dropped_short,
            report.rejected_gap
        );
    }
    Ok((Dataset::new(kept, interval)?, report))
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in &dataset.trajectories {
        for (i, p) in t.points.iter().enumerate() {
            w.serialize(PointRow { traj_id: t.id, point_idx: i, lng: p.pos.lng, lat: p.pos.lat, timestamp: p.t })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub min_speed_mps: f64,
    pub max_speed_mps: f64,
    pub interval_s: f64,
    pub noise_sigma_m: f64,
    pub seed: u64,
    /// Earliest departure; departures are whole seconds within one day of it.
    pub start_time_s: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 100,
            min_speed_mps: 8.0,
            max_speed_mps: 12.0,
            interval_s: 15.0,
            noise_sigma_m: 0.0,
            seed: 0,
            start_time_s: 1_700_000_000,
        }
    }
}

const MAX_DISCONNECTED_DRAWS: usize = 10;

/// Samples a route at `interval_s` given per-segment speeds, starting at
/// `departure`. Returns exact ground truth; the arrival point is kept only
/// when it falls on the sampling grid (the interval must stay constant).
pub fn simulate_route(
    net: &RoadNetwork,
    route: &[SegmentId],
    speeds_mps: &[f64],
    departure: f64,
    interval_s: f64,
) -> Result<Vec<MatchedPoint>> {
    if route.is_empty() || route.len() != speeds_mps.len() {
        return Err(Error::Data("route and speeds must be non-empty and equally long".into()));
    }
    if interval_s <= 0.0 {
        return Err(Error::Data(format!("interval must be positive, got {interval_s}")));
    }
    let mut bounds = Vec::with_capacity(route.len() + 1);
    bounds.push(0.0);
    for (&s, &v) in route.iter().zip(speeds_mps) {
        if v <= 0.0 {
            return Err(Error::Data(format!("speed must be positive, got {v}")));
        }
        bounds.push(bounds.last().copied().unwrap_or(0.0) + net.segment(s)?.length_m / v);
    }
    let total = *bounds.last().expect("non-empty");
    let mut out = Vec::new();
    let mut seg = 0;
    for k in 0.. {
        let tau = k as f64 * interval_s;
        if (tau - total).abs() <= 1e-6 {
            out.push(MatchedPoint { segment: route[route.len() - 1], fraction: 1.0, timestamp: departure + tau });
            break;
        }
        if tau > total {
            break;
        }
        while tau >= bounds[seg + 1] {
            seg += 1;
        }
        let fraction = ((tau - bounds[seg]) / (bounds[seg + 1] - bounds[seg])).clamp(0.0, 1.0);
        out.push(MatchedPoint { segment: route[seg], fraction, timestamp: departure + tau });
    }
    Ok(out)
}

/// Random trips between random node pairs, following shortest routes. Returns
/// the raw dataset (optionally with Gaussian position noise) and the exact
/// matched ground truth, aligned by index.
pub fn synth_trajectories(net: &RoadNetwork, cfg: &SynthConfig) -> Result<(Dataset, Vec<MatchedTrajectory>)> {
    if cfg.n == 0 {
        return Err(Error::Data("n must be at least 1".into()));
    }
    if !(cfg.min_speed_mps > 0.0 && cfg.max_speed_mps >= cfg.min_speed_mps) {
        return Err(Error::Data("speed range must satisfy 0 < min <= max".into()));
    }
    if cfg.noise_sigma_m < 0.0 {
        return Err(Error::Data("noise sigma must be non-negative".into()));
    }
    let nodes: Vec<NodeId> = net.nodes().iter().map(|n| n.id).collect();
    if nodes.len() < 2 {
        return Err(Error::Data("network needs at least two nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma_m.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut raw = Vec::with_capacity(cfg.n);
    let mut truth = Vec::with_capacity(cfg.n);
    let max_attempts = 1000 * cfg.n + 1000;
    let mut attempts = 0;
    let mut disconnected = 0;
    while raw.len() < cfg.n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Data(format!("could not generate {} trajectories with >= {MIN_POINTS} points", cfg.n)));
        }
        let o = nodes[rng.random_range(0..nodes.len())];
        let d = nodes[rng.random_range(0..nodes.len())];
        if o == d {
            continue;
        }
        let Some(route) = net.node_route(o, d)? else {
            disconnected += 1;
            if disconnected >= MAX_DISCONNECTED_DRAWS {
                return Err(Error::Data(format!(
                    "{MAX_DISCONNECTED_DRAWS} consecutive origin/destination draws were disconnected"
                )));
            }
            continue;
        };
        disconnected = 0;
        let speeds: Vec<f64> = route
            .segments
            .iter()
            .map(|_| rng.random_range(cfg.min_speed_mps..=cfg.max_speed_mps))
            .collect();
        let departure = (cfg.start_time_s + rng.random_range(0..86_400)) as f64;
        let points = simulate_route(net, &route.segments, &speeds, departure, cfg.interval_s)?;
        if points.len() < MIN_POINTS {
            continue;
        }
        let id = raw.len() as u64;
        let mut gps = Vec::with_capacity(points.len());
        for p in &points {
            let mut pos = net.locate(p.segment, p.fraction)?;
            if cfg.noise_sigma_m > 0.0 {
                let frame = LocalFrame::new(pos);
                pos = frame.to_lnglat(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            gps.push(GpsPoint { pos, t: p.timestamp });
        }
        raw.push(Trajectory { id, points: gps });
        truth.push(MatchedTrajectory { traj_id: id, points });
    }
    Ok((Dataset::new(raw, cfg.interval_s)?, truth))
}

/// One kept point of a resampled trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseEntry {
    /// Index into the dense trajectory (0-based).
    pub dense_index: usize,
    pub pos: Option<LngLat>,
    pub t: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseTrajectory {
    pub entries: Vec<SparseEntry>,
    pub interval_s: f64,
}

/// Integer ratio `coarse / fine`, or an error when not divisible.
pub fn interval_ratio(fine_s: f64, coarse_s: f64) -> Result<usize> {
    if fine_s <= 0.0 || coarse_s < fine_s {
        return Err(Error::Data(format!("resample interval {coarse_s} s must be >= sampling interval {fine_s} s")));
    }
    let ratio = coarse_s / fine_s;
    let r = ratio.round();
    if (ratio - r).abs() > 1e-9 {
        return Err(Error::Data(format!("{coarse_s} s is not divisible by {fine_s} s")));
    }
    Ok(r as usize)
}

/// Dense indices kept when resampling `len` points with stride `step`: every
/// `step`-th point from the first, plus the final point.
pub fn resample_indices(len: usize, step: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).step_by(step.max(1)).collect();
    if len > 0 && idx.last() != Some(&(len - 1)) {
        idx.push(len - 1);
    }
    idx
}

pub fn resample(traj: &Trajectory, interval_s: f64, coarse_s: f64) -> Result<SparseTrajectory> {
    let step = interval_ratio(interval_s, coarse_s)?;
    let entries = resample_indices(traj.points.len(), step)
        .into_iter()
        .map(|i| SparseEntry { dense_index: i, pos: Some(traj.points[i].pos), t: Some(traj.points[i].t) })
        .collect();
    Ok(SparseTrajectory { entries, interval_s: coarse_s })
}

/// With probability `phi` per entry, removes either the coordinate or the
/// timestamp (fair coin). The first entry keeps its timestamp as the time
/// origin, so only its coordinate can be removed.
pub fn drop_features(sparse: &SparseTrajectory, phi: f64, rng: &mut impl Rng) -> Result<SparseTrajectory> {
    if !(0.0..1.0).contains(&phi) {
        return Err(Error::Data(format!("removal probability must be in [0, 1), got {phi}")));
    }
    let mut out = sparse.clone();
    for (k, e) in out.entries.iter_mut().enumerate() {
        if rng.random::<f64>() < phi {
            let drop_coordinate = rng.random::<bool>();
            if drop_coordinate || k == 0 {
                e.pos = None;
            } else {
                e.t = None;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Sorts by departure time (then id) and splits 8:1:1.
pub fn chronological_split(dataset: &Dataset) -> Split {
    let mut sorted = dataset.trajectories.clone();
    sorted.sort_by(|a, b| a.departure().total_cmp(&b.departure()).then(a.id.cmp(&b.id)));
    let n = sorted.len();
    let tenth = (n as f64 * 0.1).round() as usize;
    let train_n = n - 2 * tenth;
    let test = sorted.split_off(train_n + tenth);
    let valid = sorted.split_off(train_n);
    Split { train: dataset.subset(sorted), valid: dataset.subset(valid), test: dataset.subset(test) }
}

/// Writes `train_ids.txt`, `valid_ids.txt` and `test_ids.txt` into `dir`.
pub fn write_split_manifests(split: &Split, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, part) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        let path = dir.join(format!("{name}_ids.txt"));
        let body: String = part.trajectories.iter().map(|t| format!("{}\n", t.id)).collect();
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
