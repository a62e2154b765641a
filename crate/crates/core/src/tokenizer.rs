//! Tuples of maskable feature domains and the sequence plans built from them.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::geo::LngLat;
use crate::mapmatch::MatchedTrajectory;
use crate::roadnet::{RoadNetwork, RoadPos, SegmentId};
use crate::trajdata::{SparseTrajectory, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Mask,
    Start,
    End,
    Cls,
}

impl Token {
    pub const COUNT: usize = 4;

    /// Row in the token embedding table.
    pub fn index(self) -> usize {
        match self {
            Token::Mask => 0,
            Token::Start => 1,
            Token::End => 2,
            Token::Cls => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Slot<T> {
    Value(T),
    Token(Token),
}

impl<T> Slot<T> {
    pub fn value(&self) -> Option<&T> {
        match self {
            Slot::Value(v) => Some(v),
            Slot::Token(_) => None,
        }
    }

    pub fn token(&self) -> Option<Token> {
        match self {
            Slot::Value(_) => None,
            Slot::Token(t) => Some(*t),
        }
    }

    fn from_option(v: Option<T>) -> Self {
        v.map_or(Slot::Token(Token::Mask), Slot::Value)
    }
}

/// Coordinate plus the segments within δ of it.
#[derive(Clone, Debug, PartialEq)]
pub struct Spatial {
    pub pos: LngLat,
    pub omega: Vec<SegmentId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tuple {
    pub spatial: Slot<Spatial>,
    /// Seconds since the trajectory's first timestamp.
    pub temporal: Slot<f64>,
    pub road: Slot<RoadPos>,
}

impl Tuple {
    /// `g_[m]`, `g_[s]`, `g_[e]` or the class item: every slot is the token.
    pub fn special(t: Token) -> Self {
        Self { spatial: Slot::Token(t), temporal: Slot::Token(t), road: Slot::Token(t) }
    }

    /// The token when all three slots hold the same one.
    pub fn special_kind(&self) -> Option<Token> {
        match (self.spatial.token(), self.temporal.token(), self.road.token()) {
            (Some(a), Some(b), Some(c)) if a == b && b == c => Some(a),
            _ => None,
        }
    }

    pub fn is_end(&self) -> bool {
        self.special_kind() == Some(Token::End)
    }

    pub fn has_mask(&self) -> bool {
        [self.spatial.token(), self.temporal.token(), self.road.token()].contains(&Some(Token::Mask))
    }

    /// Copy with the chosen slots replaced by `[m]`.
    pub fn masked(&self, spatial: bool, temporal: bool, road: bool) -> Tuple {
        let mut t = self.clone();
        if spatial {
            t.spatial = Slot::Token(Token::Mask);
        }
        if temporal {
            t.temporal = Slot::Token(Token::Mask);
        }
        if road {
            t.road = Slot::Token(Token::Mask);
        }
        t
    }
}

/// Builds a tuple; absent features become `[m]`. `t_rel` is seconds since
/// the first timestamp of the trajectory.
pub fn make_tuple(
    net: &RoadNetwork,
    delta_m: f64,
    pos: Option<LngLat>,
    t_rel: Option<f64>,
    road: Option<RoadPos>,
) -> Result<Tuple> {
    if delta_m <= 0.0 || !delta_m.is_finite() {
        return Err(Error::Token(format!("neighborhood radius must be positive, got {delta_m}")));
    }
    if let Some(t) = t_rel {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::Token(format!("relative time must be non-negative, got {t}")));
        }
    }
    if let Some(r) = road {
        net.segment(r.segment)?;
        if !(0.0..=1.0).contains(&r.fraction) {
            return Err(Error::Token(format!("fraction {} outside [0, 1]", r.fraction)));
        }
    }
    let spatial = pos.map(|p| Spatial { pos: p, omega: net.neighbors_within(p, delta_m) });
    Ok(Tuple { spatial: Slot::from_option(spatial), temporal: Slot::from_option(t_rel), road: Slot::from_option(road) })
}

/// A fully observed, map-matched trajectory point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensePoint {
    pub pos: LngLat,
    pub t: f64,
    pub road: RoadPos,
}

/// Pairs raw points with their matched counterparts.
pub fn dense_points(raw: &Trajectory, matched: &MatchedTrajectory) -> Result<Vec<DensePoint>> {
    if raw.points.len() != matched.points.len() {
        return Err(Error::Token(format!(
            "trajectory {} has {} raw but {} matched points",
            raw.id,
            raw.points.len(),
            matched.points.len()
        )));
    }
    Ok(raw
        .points
        .iter()
        .zip(&matched.points)
        .map(|(p, m)| DensePoint { pos: p.pos, t: p.t, road: m.road() })
        .collect())
}

/// Fully observed tuples, times relative to the first point.
pub fn tokenize_dense(net: &RoadNetwork, delta_m: f64, dense: &[DensePoint]) -> Result<Vec<Tuple>> {
    let t0 = dense.first().map_or(0.0, |p| p.t);
    dense.iter().map(|p| make_tuple(net, delta_m, Some(p.pos), Some(p.t - t0), Some(p.road))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetBlock {
    /// Index into the plan's inputs (not counting the class item).
    pub anchor: usize,
    /// Ground-truth tuples ending with `g_[e]`; empty when only generating.
    pub targets: Vec<Tuple>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequencePlan {
    pub with_cls: bool,
    pub inputs: Vec<Tuple>,
    pub blocks: Vec<TargetBlock>,
    /// Permutation of block indices giving the generation order.
    pub block_order: Vec<usize>,
    /// Absolute time of relative time 0.
    pub t0: f64,
}

impl SequencePlan {
    /// A plan with inputs only, e.g. for embedding.
    pub fn inputs_only(inputs: Vec<Tuple>, with_cls: bool, t0: f64) -> Self {
        Self { with_cls, inputs, blocks: Vec::new(), block_order: Vec::new(), t0 }
    }

    pub fn validate(&self) -> Result<()> {
        let mut anchored = vec![false; self.inputs.len()];
        for (b, block) in self.blocks.iter().enumerate() {
            if block.anchor >= self.inputs.len() {
                return Err(Error::Token(format!("block {b} has no anchor (index {})", block.anchor)));
            }
            if std::mem::replace(&mut anchored[block.anchor], true) {
                return Err(Error::Token(format!("input {} anchors two blocks", block.anchor)));
            }
            if let Some((last, body)) = block.targets.split_last() {
                if !last.is_end() || body.iter().any(Tuple::is_end) {
                    return Err(Error::Token(format!("block {b} must end with exactly one end tuple")));
                }
            }
        }
        let mut seen = vec![false; self.blocks.len()];
        for &b in &self.block_order {
            if b >= seen.len() || std::mem::replace(&mut seen[b], true) {
                return Err(Error::Token("block order is not a permutation".into()));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Token("block order is not a permutation".into()));
        }
        Ok(())
    }
}

fn order(n: usize, shuffle: bool, rng: &mut impl Rng) -> Vec<usize> {
    let mut o: Vec<usize> = (0..n).collect();
    if shuffle {
        o.shuffle(rng);
    }
    o
}

/// Reconstruction plan: every kept point becomes an input with its road
/// domain masked (plus any dropped feature) and a single-tuple block; every
/// run of skipped points becomes a `g_[m]` input whose block is that run.
pub fn build_pretrain_plan(
    full: &[Tuple],
    sparse: &SparseTrajectory,
    t0: f64,
    shuffle: bool,
    rng: &mut impl Rng,
) -> Result<SequencePlan> {
    let entries = &sparse.entries;
    if entries.is_empty() {
        return Err(Error::Token("sparse trajectory is empty".into()));
    }
    for w in entries.windows(2) {
        if w[1].dense_index <= w[0].dense_index {
            return Err(Error::Token("sparse indices are not increasing".into()));
        }
    }
    if entries.last().is_some_and(|e| e.dense_index >= full.len()) {
        return Err(Error::Token(format!("sparse index beyond dense length {}", full.len())));
    }
    let end = Tuple::special(Token::End);
    let mut inputs = Vec::new();
    let mut blocks = Vec::new();
    for (k, e) in entries.iter().enumerate() {
        let truth = &full[e.dense_index];
        blocks.push(TargetBlock { anchor: inputs.len(), targets: vec![truth.clone(), end.clone()] });
        inputs.push(truth.masked(e.pos.is_none(), e.t.is_none(), true));
        if let Some(next) = entries.get(k + 1) {
            if next.dense_index > e.dense_index + 1 {
                let mut targets: Vec<Tuple> = full[e.dense_index + 1..next.dense_index].to_vec();
                targets.push(end.clone());
                blocks.push(TargetBlock { anchor: inputs.len(), targets });
                inputs.push(Tuple::special(Token::Mask));
            }
        }
    }
    let block_order = order(blocks.len(), shuffle, rng);
    let plan = SequencePlan { with_cls: false, inputs, blocks, block_order, t0 };
    plan.validate()?;
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionedItem {
    pub tuple: Tuple,
    pub p1: usize,
    pub p2: usize,
}

/// Inputs (and the class item) followed by the teacher-forcing stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionedSequence {
    pub items: Vec<PositionedItem>,
    /// Number of leading items in the input region.
    pub input_len: usize,
    /// Supervision target of each stream item.
    pub targets: Vec<Tuple>,
    /// Block index of each stream item.
    pub stream_block: Vec<usize>,
}

impl PositionedSequence {
    pub fn stream_len(&self) -> usize {
        self.items.len() - self.input_len
    }

    pub fn has_cls(&self) -> bool {
        self.items.first().is_some_and(|i| i.tuple.special_kind() == Some(Token::Cls))
    }
}

/// Input item `k` (0-based) gets first-layer position `k + 1`, the class item
/// 0; second-layer positions are 0 for inputs and `1..=N` inside a block.
pub fn input_items(plan: &SequencePlan) -> Vec<PositionedItem> {
    let mut items = Vec::with_capacity(plan.inputs.len() + 1);
    if plan.with_cls {
        items.push(PositionedItem { tuple: Tuple::special(Token::Cls), p1: 0, p2: 0 });
    }
    items.extend(plan.inputs.iter().enumerate().map(|(k, t)| PositionedItem { tuple: t.clone(), p1: k + 1, p2: 0 }));
    items
}

pub fn assign_positions(plan: &SequencePlan) -> Result<PositionedSequence> {
    plan.validate()?;
    let mut items = input_items(plan);
    let input_len = items.len();
    let mut targets = Vec::new();
    let mut stream_block = Vec::new();
    for &b in &plan.block_order {
        let block = &plan.blocks[b];
        if block.targets.is_empty() {
            return Err(Error::Token(format!("block {b} has no targets to teacher-force")));
        }
        let p1 = block.anchor + 1;
        items.push(PositionedItem { tuple: Tuple::special(Token::Start), p1, p2: 1 });
        for (k, t) in block.targets[..block.targets.len() - 1].iter().enumerate() {
            items.push(PositionedItem { tuple: t.clone(), p1, p2: k + 2 });
        }
        targets.extend(block.targets.iter().cloned());
        stream_block.extend(std::iter::repeat_n(b, block.targets.len()));
    }
    Ok(PositionedSequence { items, input_len, targets, stream_block })
}

/// Reassembles the dense trajectory from a plan: each input's block (when it
/// has one) replaces it, with `g_[m]` blocks expanding to their tuples. Every
/// resulting tuple must be fully observed.
pub fn detokenize(plan: &SequencePlan) -> Result<Vec<DensePoint>> {
    plan.validate()?;
    let mut by_anchor: Vec<Option<&TargetBlock>> = vec![None; plan.inputs.len()];
    for b in &plan.blocks {
        by_anchor[b.anchor] = Some(b);
    }
    let mut out = Vec::new();
    for (k, input) in plan.inputs.iter().enumerate() {
        let tuples: Vec<&Tuple> = match by_anchor[k] {
            Some(b) => b.targets.iter().filter(|t| !t.is_end()).collect(),
            None => vec![input],
        };
        for t in tuples {
            match (&t.spatial, &t.temporal, &t.road) {
                (Slot::Value(s), Slot::Value(dt), Slot::Value(r)) => {
                    out.push(DensePoint { pos: s.pos, t: plan.t0 + dt, road: *r })
                }
                _ => return Err(Error::Token(format!("tuple for input {k} is not fully observed"))),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::synth_grid_network;
    use crate::trajdata::SparseEntry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_tuples(n: usize) -> Vec<Tuple> {
        (0..n)
            .map(|i| Tuple {
                spatial: Slot::Value(Spatial { pos: LngLat::new(104.0 + i as f64 * 1e-4, 30.0), omega: vec![0] }),
                temporal: Slot::Value(15.0 * i as f64),
                road: Slot::Value(RoadPos::new(0, i as f64 / n as f64)),
            })
            .collect()
    }

    fn sparse(idx: &[usize], full: &[Tuple]) -> SparseTrajectory {
        let entries = idx
            .iter()
            .map(|&i| SparseEntry {
                dense_index: i,
                pos: full[i].spatial.value().map(|s| s.pos),
                t: full[i].temporal.value().copied(),
            })
            .collect();
        SparseTrajectory { entries, interval_s: 60.0 }
    }

    #[test]
    fn make_tuple_slots() {
        let net = synth_grid_network(2, 2, 100.0, 104.0, 30.0, 0).unwrap();
        let p = net.locate(3, 0.5).unwrap();
        let t = make_tuple(&net, 100.0, Some(p), Some(0.0), Some(RoadPos::new(3, 0.5))).unwrap();
        assert!(t.spatial.value().unwrap().omega.contains(&3));
        assert_eq!(t.temporal, Slot::Value(0.0));
        let t = make_tuple(&net, 100.0, Some(p), Some(10.0), None).unwrap();
        assert_eq!(t.road, Slot::Token(Token::Mask));
        assert!(make_tuple(&net, 0.0, Some(p), None, None).is_err());
    }

    #[test]
    fn pretrain_plan_layout() {
        let full = full_tuples(9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = build_pretrain_plan(&full, &sparse(&[0, 4, 8], &full), 0.0, false, &mut rng).unwrap();
        assert_eq!(plan.inputs.len(), 5);
        assert_eq!(plan.inputs[1], Tuple::special(Token::Mask));
        assert_eq!(plan.inputs[3], Tuple::special(Token::Mask));
        assert_eq!(plan.inputs[0].road, Slot::Token(Token::Mask));
        assert_eq!(plan.blocks.len(), 5);
        assert_eq!(plan.blocks[1].targets.len(), 4);
        assert_eq!(plan.block_order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn misaligned_sparse_is_rejected() {
        let full = full_tuples(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = sparse(&[0, 4], &full);
        s.entries[1].dense_index = 7;
        assert!(build_pretrain_plan(&full, &s, 0.0, false, &mut rng).is_err());
    }

    #[test]
    fn figure_positions() {
        // Inputs <g1, g_[m], g4>; the masked input's block holds two tuples.
        let full = full_tuples(4);
        let end = Tuple::special(Token::End);
        let plan = SequencePlan {
            with_cls: false,
            inputs: vec![full[0].clone(), Tuple::special(Token::Mask), full[3].clone()],
            blocks: vec![TargetBlock { anchor: 1, targets: vec![full[1].clone(), full[2].clone(), end] }],
            block_order: vec![0],
            t0: 0.0,
        };
        let seq = assign_positions(&plan).unwrap();
        assert!(seq.items[..3].iter().all(|i| i.p2 == 0));
        let stream: Vec<(usize, usize)> = seq.items[3..].iter().map(|i| (i.p1, i.p2)).collect();
        assert_eq!(stream, vec![(2, 1), (2, 2), (2, 3)]);
        assert_eq!(seq.items.len(), 3 + 3);
        assert_eq!(seq.items[3].tuple, Tuple::special(Token::Start));
    }

    #[test]
    fn dangling_block_is_rejected() {
        let plan = SequencePlan {
            with_cls: false,
            inputs: vec![Tuple::special(Token::Mask)],
            blocks: vec![TargetBlock { anchor: 3, targets: vec![Tuple::special(Token::End)] }],
            block_order: vec![0],
            t0: 0.0,
        };
        assert!(assign_positions(&plan).is_err());
    }
}
