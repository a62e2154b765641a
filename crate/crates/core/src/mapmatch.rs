//! Hidden-Markov-model map matching: Gaussian emission on the projection
//! offset, exponential transition penalty on the gap between route distance
//! and great-circle distance, Viterbi decoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geo::{haversine, LngLat};
use crate::roadnet::{RoadNetwork, RoadPos, SegmentId};
use crate::trajdata::{GpsPoint, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    pub candidate_radius_m: f64,
    pub emission_sigma_m: f64,
    pub transition_beta: f64,
    pub max_candidates: usize,
    /// A first point matched this close to the end of a segment the route
    /// then leaves is moved onto the start of the next route segment.
    pub departure_snap_m: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            candidate_radius_m: 50.0,
            emission_sigma_m: 10.0,
            transition_beta: 0.05,
            max_candidates: 8,
            departure_snap_m: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPoint {
    pub segment: SegmentId,
    pub fraction: f64,
    pub timestamp: f64,
}

impl MatchedPoint {
    pub fn road(&self) -> RoadPos {
        RoadPos::new(self.segment, self.fraction)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedTrajectory {
    pub traj_id: u64,
    pub points: Vec<MatchedPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub pos: RoadPos,
    pub offset_m: f64,
}

/// Candidates with their log emission and transition scores. A transition of
/// `-inf` marks an unreachable pair.
#[derive(Clone, Debug)]
pub struct MatchLattice {
    pub candidates: Vec<Vec<Candidate>>,
    pub emission: Vec<Vec<f64>>,
    /// `transition[i][a][b]`: from candidate `a` of point `i` to `b` of `i + 1`.
    pub transition: Vec<Vec<Vec<f64>>>,
}

const NODE_EPS_M: f64 = 1e-6;

/// A point sitting exactly on a node projects onto every incident segment.
/// Attribute it to the segment being entered (fraction 0), except for the
/// final point, which belongs to the segment being left (fraction 1).
fn drop_node_duplicates(net: &RoadNetwork, cands: &mut Vec<Candidate>, last: bool) {
    let at_start = |c: &Candidate| c.pos.fraction * net.segments()[c.pos.segment].length_m <= NODE_EPS_M;
    let at_end = |c: &Candidate| (1.0 - c.pos.fraction) * net.segments()[c.pos.segment].length_m <= NODE_EPS_M;
    let snapshot = cands.clone();
    cands.retain(|c| {
        let seg = &net.segments()[c.pos.segment];
        if !last && at_end(c) {
            // Drop if an out-segment of this segment's end node is a start candidate.
            !snapshot.iter().any(|o| at_start(o) && net.segments()[o.pos.segment].from == seg.to)
        } else if last && at_start(c) {
            !snapshot.iter().any(|o| at_end(o) && net.segments()[o.pos.segment].to == seg.from)
        } else {
            true
        }
    });
}

pub fn candidates(net: &RoadNetwork, p: LngLat, params: &MatchParams, last: bool) -> Vec<Candidate> {
    let mut cands: Vec<Candidate> = net
        .neighbors_with_distance(p, params.candidate_radius_m)
        .into_iter()
        .map(|(s, _)| {
            let proj = net.project_onto(s, p);
            Candidate { pos: RoadPos::new(s, proj.fraction), offset_m: proj.offset_m }
        })
        .collect();
    drop_node_duplicates(net, &mut cands, last);
    cands.truncate(params.max_candidates);
    cands
}

pub fn build_lattice(net: &RoadNetwork, points: &[GpsPoint], params: &MatchParams) -> Result<MatchLattice> {
    if points.len() < 2 {
        return Err(Error::Match(format!("need at least 2 points, got {}", points.len())));
    }
    let n = points.len();
    let mut cands = Vec::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        let c = candidates(net, p.pos, params, i + 1 == n);
        if c.is_empty() {
            return Err(Error::NoCandidates { index: i, radius_m: params.candidate_radius_m });
        }
        cands.push(c);
    }
    let sigma = params.emission_sigma_m;
    let emission = cands
        .iter()
        .map(|cs| cs.iter().map(|c| -0.5 * (c.offset_m / sigma).powi(2)).collect())
        .collect();
    let mut transition = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let straight = haversine(points[i].pos, points[i + 1].pos);
        let targets: Vec<RoadPos> = cands[i + 1].iter().map(|c| c.pos).collect();
        let rows = cands[i]
            .iter()
            .map(|a| {
                net.route_distances(a.pos, &targets)
                    .into_iter()
                    .map(|d| d.map_or(f64::NEG_INFINITY, |d| -params.transition_beta * (d - straight).abs()))
                    .collect()
            })
            .collect();
        transition.push(rows);
    }
    Ok(MatchLattice { candidates: cands, emission, transition })
}

impl MatchLattice {
    /// Log score of one candidate assignment.
    pub fn score(&self, path: &[usize]) -> f64 {
        let mut s = self.emission[0][path[0]];
        for i in 1..path.len() {
            s += self.transition[i - 1][path[i - 1]][path[i]] + self.emission[i][path[i]];
        }
        s
    }

    /// Maximum-score assignment; ties go to the lower candidate index.
    pub fn viterbi(&self) -> Result<Vec<usize>> {
        let n = self.candidates.len();
        let mut score = self.emission[0].clone();
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(n);
        back.push(vec![0; score.len()]);
        for i in 1..n {
            let mut next = vec![f64::NEG_INFINITY; self.candidates[i].len()];
            let mut arg = vec![0; next.len()];
            for (b, slot) in next.iter_mut().enumerate() {
                for (a, &prev) in score.iter().enumerate() {
                    let s = prev + self.transition[i - 1][a][b];
                    if s > *slot {
                        *slot = s;
                        arg[b] = a;
                    }
                }
                *slot += self.emission[i][b];
            }
            if next.iter().all(|s| *s == f64::NEG_INFINITY) {
                return Err(Error::Match(format!("no connected candidate path reaches point {i}")));
            }
            score = next;
            back.push(arg);
        }
        let mut best = 0;
        for (b, &s) in score.iter().enumerate() {
            if s > score[best] {
                best = b;
            }
        }
        let mut path = vec![best; n];
        for i in (1..n).rev() {
            path[i - 1] = back[i][path[i]];
        }
        Ok(path)
    }
}

pub fn hmm_match(net: &RoadNetwork, traj: &Trajectory, params: &MatchParams) -> Result<MatchedTrajectory> {
    let lattice = build_lattice(net, &traj.points, params)?;
    let path = lattice.viterbi()?;
    let points = path
        .iter()
        .zip(&lattice.candidates)
        .zip(&traj.points)
        .map(|((&k, cs), p)| MatchedPoint { segment: cs[k].pos.segment, fraction: cs[k].pos.fraction, timestamp: p.t })
        .collect();
    let mut matched = MatchedTrajectory { traj_id: traj.id, points };
    snap_departure(net, &mut matched, params.departure_snap_m)?;
    Ok(matched)
}

/// Within the noise scale of a node, a trip's first fix cannot tell the
/// segment it arrives by from the one it leaves by. Like a point exactly on
/// a node, it is given to the segment being entered.
fn snap_departure(net: &RoadNetwork, m: &mut MatchedTrajectory, snap_m: f64) -> Result<()> {
    let (first, second) = (m.points[0], m.points[1]);
    if first.segment == second.segment {
        return Ok(());
    }
    let remaining = (1.0 - first.fraction) * net.segment(first.segment)?.length_m;
    if remaining > snap_m {
        return Ok(());
    }
    if let Some(route) = net.shortest_path(first.road(), second.road())? {
        if let Some(&next) = route.segments.get(1) {
            m.points[0] = MatchedPoint { segment: next, fraction: 0.0, timestamp: first.timestamp };
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct MatchedRow {
    traj_id: u64,
    point_idx: usize,
    segment_id: SegmentId,
    fraction: f64,
    timestamp: f64,
}

pub fn write_matched_csv(matched: &[MatchedTrajectory], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in matched {
        for (i, p) in m.points.iter().enumerate() {
            w.serialize(MatchedRow {
                traj_id: m.traj_id,
                point_idx: i,
                segment_id: p.segment,
                fraction: p.fraction,
                timestamp: p.timestamp,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads matched rows grouped by trajectory id (ascending), points ordered by
/// `point_idx`.
pub fn read_matched_csv(path: &Path) -> Result<Vec<MatchedTrajectory>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut groups: std::collections::BTreeMap<u64, Vec<(usize, MatchedPoint)>> = Default::default();
    for (i, row) in r.deserialize::<MatchedRow>().enumerate() {
        let row: MatchedRow = row.map_err(|e| Error::Malformed { line: i as u64 + 2, message: e.to_string() })?;
        groups.entry(row.traj_id).or_default().push((
            row.point_idx,
            MatchedPoint { segment: row.segment_id, fraction: row.fraction, timestamp: row.timestamp },
        ));
    }
    Ok(groups
        .into_iter()
        .map(|(traj_id, mut pts)| {
            pts.sort_by_key(|p| p.0);
            MatchedTrajectory { traj_id, points: pts.into_iter().map(|p| p.1).collect() }
        })
        .collect())
}
