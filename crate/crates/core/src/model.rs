//! The trajectory network: feature-domain embeddings, tuple- and
//! sequence-level attention, output heads, the tuple loss and greedy block
//! generation.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roadtraj_nn::{
    sinusoidal_position, AttentionMask, FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore,
    Real, Tensor, Var,
};
use serde::{Deserialize, Serialize};

use crate::geo::LngLat;
use crate::roadnet::{RoadNetwork, RoadPos, SegmentId};
use crate::tokenizer::{input_items, PositionedItem, PositionedSequence, SequencePlan, Slot, Spatial, Token, Tuple};
use crate::trajdata::{BBox, Dataset};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_segments: usize,
    pub delta_m: f64,
    pub ffn_mult: usize,
}

impl ModelConfig {
    pub fn new(num_segments: usize) -> Self {
        Self { dim: 128, heads: 8, layers: 2, num_segments, delta_m: 100.0, ffn_mult: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(Error::Model(format!("dimension must be even and positive, got {}", self.dim)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Model(format!("dimension {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.layers == 0 || self.num_segments == 0 || self.ffn_mult == 0 {
            return Err(Error::Model("layers, segment count and FFN multiplier must be positive".into()));
        }
        if !(self.delta_m > 0.0) {
            return Err(Error::Model(format!("neighborhood radius must be positive, got {}", self.delta_m)));
        }
        Ok(())
    }

    /// Index of the stop class in the segment head.
    pub fn end_class(&self) -> usize {
        self.num_segments
    }
}

/// Min-max coordinate scaling and time scaling shared by inputs, targets and
/// decoded outputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min_lng: f64,
    pub min_lat: f64,
    pub span_lng: f64,
    pub span_lat: f64,
    pub time_scale_s: f64,
}

impl Normalizer {
    pub fn new(bbox: BBox, time_scale_s: f64) -> Self {
        let span = |a: f64, b: f64| if b - a > 1e-12 { b - a } else { 1.0 };
        Self {
            min_lng: bbox.min.lng,
            min_lat: bbox.min.lat,
            span_lng: span(bbox.min.lng, bbox.max.lng),
            span_lat: span(bbox.min.lat, bbox.max.lat),
            time_scale_s,
        }
    }

    pub fn for_dataset(ds: &Dataset) -> Self {
        Self::new(ds.bbox, ds.time_scale_s)
    }

    pub fn coord(&self, p: LngLat) -> [f64; 2] {
        [(p.lng - self.min_lng) / self.span_lng, (p.lat - self.min_lat) / self.span_lat]
    }

    pub fn denorm_coord(&self, c: [f64; 2]) -> LngLat {
        LngLat::new(self.min_lng + c[0] * self.span_lng, self.min_lat + c[1] * self.span_lat)
    }

    pub fn time(&self, seconds: f64) -> f64 {
        seconds / self.time_scale_s
    }

    pub fn denorm_time(&self, scaled: f64) -> f64 {
        scaled * self.time_scale_s
    }
}

/// `Φ(x) = W · [cos(x v) ‖ sin(x v)]`.
#[derive(Clone, Copy, Debug)]
pub struct FourierEncoder {
    pub freq: ParamId,
    pub proj: ParamId,
}

impl FourierEncoder {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let half = dim / 2;
        // Geometric frequency ladder from 0.5 to 64 radians per unit.
        let freqs = (0..half)
            .map(|k| {
                let u = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
                T::of(0.5 * 128f64.powf(u))
            })
            .collect();
        let freq = store.add(format!("{prefix}.freq"), Tensor::matrix(1, half, freqs))?;
        let proj = store.add_glorot(format!("{prefix}.proj"), dim, dim, rng)?;
        Ok(Self { freq, proj })
    }

    /// Encodes a `[n, 1]` column of scalars into `[n, dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let f = g.param(self.freq);
        let a = g.matmul(x, f);
        let c = g.cos(a);
        let s = g.sin(a);
        let cat = g.concat_cols(&[c, s]);
        let w = g.param(self.proj);
        g.matmul_nt(cat, w)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub lng: FourierEncoder,
    pub lat: FourierEncoder,
    pub time: FourierEncoder,
    pub frac: FourierEncoder,
    pub segment_table: ParamId,
    pub omega_table: ParamId,
    pub token_table: ParamId,
    pub spatial_attn: MultiHeadAttention,
    pub tuple_attn: MultiHeadAttention,
    layers: Vec<EncoderLayer>,
    pub coord_head: Linear,
    pub time_head: Linear,
    pub segment_head: Linear,
    pub fraction_head: Linear,
}

/// Head outputs for a set of rows.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[s, 2]` normalized coordinates.
    pub coord: Var,
    /// `[s, 1]` scaled relative time.
    pub time: Var,
    /// `[s, |E| + 1]` segment logits, last column the stop class.
    pub logits: Var,
    /// `[s, 1]` fraction, unclamped.
    pub frac: Var,
}

/// Decoded head values of one row.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadValues {
    pub coord: [f64; 2],
    pub time: f64,
    pub probs: Vec<f64>,
    pub frac: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTuple {
    pub pos: LngLat,
    /// Seconds since the plan's time origin (clamped at 0).
    pub t_rel: f64,
    pub road: RoadPos,
    pub omega: Vec<SegmentId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedBlock {
    pub anchor: usize,
    pub tuples: Vec<GeneratedTuple>,
}

/// States and summed tuple loss of a teacher-forced sequence.
#[derive(Clone, Copy, Debug)]
pub struct TeacherForced {
    pub states: Var,
    pub loss_sum: Var,
    pub count: usize,
}

const PE_CACHE: usize = 256;

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    pub params: ParamStore<T>,
    layout: Layout,
    pe: Vec<f64>,
}

fn column<T: Real>(vals: &[f64]) -> Tensor<T> {
    Tensor::matrix(vals.len(), 1, vals.iter().map(|&v| T::of(v)).collect())
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, e) = (config.dim, config.num_segments);
        let lng = FourierEncoder::register(&mut s, "embed.lng", d, &mut rng)?;
        let lat = FourierEncoder::register(&mut s, "embed.lat", d, &mut rng)?;
        let time = FourierEncoder::register(&mut s, "embed.time", d, &mut rng)?;
        let frac = FourierEncoder::register(&mut s, "embed.frac", d, &mut rng)?;
        let segment_table = s.add_glorot("embed.segment", e, d, &mut rng)?;
        let omega_table = s.add_glorot("embed.omega", e, d, &mut rng)?;
        let token_table = s.add_glorot("embed.token", Token::COUNT, d, &mut rng)?;
        let spatial_attn = MultiHeadAttention::register(&mut s, "embed.spatial_attn", d, config.heads, &mut rng)?;
        let tuple_attn = MultiHeadAttention::register(&mut s, "encoder.tuple_attn", d, config.heads, &mut rng)?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("encoder.layer{l}");
            layers.push(EncoderLayer {
                attn: MultiHeadAttention::register(&mut s, &format!("{p}.attn"), d, config.heads, &mut rng)?,
                norm1: LayerNorm::register(&mut s, &format!("{p}.norm1"), d)?,
                ffn: FeedForward::register(&mut s, &format!("{p}.ffn"), d, config.ffn_mult * d, &mut rng)?,
                norm2: LayerNorm::register(&mut s, &format!("{p}.norm2"), d)?,
            });
        }
        let layout = Layout {
            lng,
            lat,
            time,
            frac,
            segment_table,
            omega_table,
            token_table,
            spatial_attn,
            tuple_attn,
            layers,
            coord_head: Linear::register(&mut s, "head.coord", d, 2, &mut rng)?,
            time_head: Linear::register(&mut s, "head.time", d, 1, &mut rng)?,
            segment_head: Linear::register(&mut s, "head.segment", d, e + 1, &mut rng)?,
            fraction_head: Linear::register(&mut s, "head.fraction", d, 1, &mut rng)?,
        };
        let pe = (0..PE_CACHE).flat_map(|p| sinusoidal_position(p, d)).collect();
        Ok(Self { config, normalizer, params: s, layout, pe })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            normalizer: self.normalizer,
            params: self.params.cast(),
            layout: self.layout.clone(),
            pe: self.pe.clone(),
        }
    }

    fn position(&self, p: usize, out: &mut [f64]) {
        let d = self.config.dim;
        if p < PE_CACHE {
            for (o, v) in out.iter_mut().zip(&self.pe[p * d..(p + 1) * d]) {
                *o += v;
            }
        } else {
            for (o, v) in out.iter_mut().zip(sinusoidal_position(p, d)) {
                *o += v;
            }
        }
    }

    fn check_segment(&self, s: SegmentId) -> Result<()> {
        if s >= self.config.num_segments {
            return Err(Error::Model(format!("segment id {s} >= |E| = {}", self.config.num_segments)));
        }
        Ok(())
    }

    /// Per-tuple embedding matrices stacked item-major: rows `3i`, `3i+1`,
    /// `3i+2` hold the spatial, temporal and road rows of item `i`.
    pub fn embed_tuples(&self, g: &mut Graph<'_, T>, tuples: &[&Tuple]) -> Result<Var> {
        let n = tuples.len();
        let rows = 3 * n;
        let norm = &self.normalizer;
        let (mut sp_rows, mut lngs, mut lats, mut omegas) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut te_rows, mut times) = (Vec::new(), Vec::new());
        let (mut rn_rows, mut segs, mut fracs) = (Vec::new(), Vec::new(), Vec::new());
        let (mut tok_rows, mut toks) = (Vec::new(), Vec::new());
        for (i, t) in tuples.iter().enumerate() {
            match &t.spatial {
                Slot::Value(s) => {
                    let [x, y] = norm.coord(s.pos);
                    sp_rows.push(3 * i);
                    lngs.push(x);
                    lats.push(y);
                    for &o in &s.omega {
                        self.check_segment(o)?;
                    }
                    omegas.push(s.omega.as_slice());
                }
                Slot::Token(k) => {
                    tok_rows.push(3 * i);
                    toks.push(k.index());
                }
            }
            match &t.temporal {
                Slot::Value(v) => {
                    te_rows.push(3 * i + 1);
                    times.push(norm.time(*v));
                }
                Slot::Token(k) => {
                    tok_rows.push(3 * i + 1);
                    toks.push(k.index());
                }
            }
            match &t.road {
                Slot::Value(r) => {
                    self.check_segment(r.segment)?;
                    rn_rows.push(3 * i + 2);
                    segs.push(r.segment);
                    fracs.push(r.fraction);
                }
                Slot::Token(k) => {
                    tok_rows.push(3 * i + 2);
                    toks.push(k.index());
                }
            }
        }
        let l = &self.layout;
        let mut parts = Vec::with_capacity(4);
        if !sp_rows.is_empty() {
            let x = g.input(column(&lngs));
            let y = g.input(column(&lats));
            let ex = l.lng.forward(g, x);
            let ey = l.lat.forward(g, y);
            let mut z = g.add(ex, ey);
            // Cross-attention from each coordinate to the segments near it.
            let with: Vec<usize> = (0..omegas.len()).filter(|&k| !omegas[k].is_empty()).collect();
            if !with.is_empty() {
                let mut keys = Vec::new();
                let mut owner = Vec::new();
                for (q, &k) in with.iter().enumerate() {
                    keys.extend_from_slice(omegas[k]);
                    owner.extend(std::iter::repeat_n(q, omegas[k].len()));
                }
                let queries = g.gather_rows(z, &with);
                let table = g.param(l.omega_table);
                let kv = g.gather_rows(table, &keys);
                let mask = Arc::new(AttentionMask::from_fn(with.len(), keys.len(), |i, j| owner[j] == i));
                let att = l.spatial_attn.forward(g, queries, kv, kv, Some(mask))?;
                let back = g.scatter_rows(att, &with, omegas.len());
                z = g.add(z, back);
            }
            parts.push(g.scatter_rows(z, &sp_rows, rows));
        }
        if !te_rows.is_empty() {
            let x = g.input(column(&times));
            let z = l.time.forward(g, x);
            parts.push(g.scatter_rows(z, &te_rows, rows));
        }
        if !rn_rows.is_empty() {
            let table = g.param(l.segment_table);
            let e = g.gather_rows(table, &segs);
            let x = g.input(column(&fracs));
            let f = l.frac.forward(g, x);
            let z = g.add(e, f);
            parts.push(g.scatter_rows(z, &rn_rows, rows));
        }
        if !tok_rows.is_empty() {
            let table = g.param(l.token_table);
            let z = g.gather_rows(table, &toks);
            parts.push(g.scatter_rows(z, &tok_rows, rows));
        }
        let mut z = parts[0];
        for &p in &parts[1..] {
            z = g.add(z, p);
        }
        Ok(z)
    }

    /// Final states `[n, d]` of a positioned item list whose first
    /// `input_len` items form the input region.
    pub fn encode_items(&self, g: &mut Graph<'_, T>, items: &[PositionedItem], input_len: usize) -> Result<Var> {
        let n = items.len();
        if n == 0 {
            return Err(Error::Model("cannot encode an empty sequence".into()));
        }
        let l = &self.layout;
        let tuples: Vec<&Tuple> = items.iter().map(|i| &i.tuple).collect();
        let z = self.embed_tuples(g, &tuples)?;
        let tuple_mask = Arc::new(AttentionMask::block_diagonal(3 * n, 3));
        let a = l.tuple_attn.forward(g, z, z, z, Some(tuple_mask))?;
        let pooled = g.mean_groups(a, 3);
        let d = self.config.dim;
        let mut pe = vec![0.0; n * d];
        for (i, it) in items.iter().enumerate() {
            self.position(it.p1, &mut pe[i * d..(i + 1) * d]);
            self.position(it.p2, &mut pe[i * d..(i + 1) * d]);
        }
        let pe = g.input(Tensor::matrix(n, d, pe.into_iter().map(T::of).collect()));
        let mut h = g.add(pooled, pe);
        let mask = Arc::new(AttentionMask::from_fn(n, n, |i, j| j < input_len || (i >= input_len && j <= i)));
        for layer in &l.layers {
            let a = layer.attn.forward(g, h, h, h, Some(mask.clone()))?;
            let r = g.add(a, h);
            let h1 = layer.norm1.forward(g, r);
            let f = layer.ffn.forward(g, h1);
            let r2 = g.add(f, h1);
            h = layer.norm2.forward(g, r2);
        }
        Ok(h)
    }

    pub fn encode(&self, g: &mut Graph<'_, T>, seq: &PositionedSequence) -> Result<Var> {
        self.encode_items(g, &seq.items, seq.input_len)
    }

    pub fn heads(&self, g: &mut Graph<'_, T>, states: Var, rows: &[usize]) -> HeadOutputs {
        let l = &self.layout;
        let x = g.gather_rows(states, rows);
        HeadOutputs {
            coord: l.coord_head.forward(g, x),
            time: l.time_head.forward(g, x),
            logits: l.segment_head.forward(g, x),
            frac: l.fraction_head.forward(g, x),
        }
    }

    /// Encodes a teacher-forcing sequence and sums the tuple loss over every
    /// stream position.
    pub fn teacher_forced(&self, g: &mut Graph<'_, T>, seq: &PositionedSequence) -> Result<TeacherForced> {
        if seq.targets.len() != seq.stream_len() || seq.targets.is_empty() {
            return Err(Error::Model("sequence has no supervised stream positions".into()));
        }
        let states = self.encode(g, seq)?;
        let rows: Vec<usize> = (seq.input_len..seq.items.len()).collect();
        let out = self.heads(g, states, &rows);
        let loss_sum = tuple_losses(g, &out, &seq.targets, &self.normalizer, self.config.num_segments)?;
        Ok(TeacherForced { states, loss_sum, count: rows.len() })
    }

    fn head_values(&self, g: &mut Graph<'_, T>, states: Var, row: usize) -> HeadValues {
        let out = self.heads(g, states, &[row]);
        let c = g.value(out.coord);
        let logits: Vec<f64> = g.value(out.logits).data().iter().map(|v| v.f64()).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        HeadValues {
            coord: [c.data()[0].f64(), c.data()[1].f64()],
            time: g.value(out.time).item().f64(),
            probs: exps.into_iter().map(|e| e / z).collect(),
            frac: g.value(out.frac).item().f64(),
        }
    }

    /// Greedy generation of every block of `plan`, in block order. Blocks
    /// anchored on a partially observed input produce exactly one tuple whose
    /// observed domains are copied from the anchor; `g_[m]` blocks run until
    /// the stop class or `max_block_len` tuples. The first tuple of a block
    /// never stops.
    pub fn generate_blocks(
        &self,
        net: &RoadNetwork,
        plan: &SequencePlan,
        max_block_len: usize,
    ) -> Result<Vec<GeneratedBlock>> {
        if max_block_len == 0 {
            return Err(Error::Model("max block length must be at least 1".into()));
        }
        plan.validate()?;
        let mut items = input_items(plan);
        let input_len = items.len();
        let end = self.config.end_class();
        let mut out = Vec::with_capacity(plan.blocks.len());
        for &b in &plan.block_order {
            let anchor = plan.blocks[b].anchor;
            let anchor_tuple = &plan.inputs[anchor];
            let single = anchor_tuple.special_kind() != Some(Token::Mask);
            let cap = if single { 1 } else { max_block_len };
            let p1 = anchor + 1;
            items.push(PositionedItem { tuple: Tuple::special(Token::Start), p1, p2: 1 });
            let mut tuples = Vec::new();
            while tuples.len() < cap {
                let mut g = Graph::new(&self.params);
                let states = self.encode_items(&mut g, &items, input_len)?;
                let v = self.head_values(&mut g, states, items.len() - 1);
                let allowed = if tuples.is_empty() { end } else { end + 1 };
                let mut class = argmax(&v.probs[..allowed]);
                if class == end {
                    break;
                }
                let frac = v.frac.clamp(0.0, 1.0);
                let mut t_rel = self.normalizer.denorm_time(v.time).max(0.0);
                let (pos, omega) = match (single, &anchor_tuple.spatial) {
                    (true, Slot::Value(s)) => {
                        // An observed point's road must be one of its geometric candidates.
                        if let Some(&best) = s.omega.iter().filter(|&&r| r < end).max_by(|&&a, &&b| {
                            v.probs[a].partial_cmp(&v.probs[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
                        }) {
                            class = best;
                        }
                        (s.pos, s.omega.clone())
                    }
                    _ => {
                        // Generated points sit on their predicted road.
                        let pos = net.locate(class, frac)?;
                        (pos, net.neighbors_within(pos, self.config.delta_m))
                    }
                };
                if single {
                    if let Slot::Value(t) = anchor_tuple.temporal {
                        t_rel = t;
                    }
                }
                let road = RoadPos::new(class, frac);
                let gen = GeneratedTuple { pos, t_rel, road, omega };
                items.push(PositionedItem { tuple: gen.to_tuple(), p1, p2: tuples.len() + 2 });
                tuples.push(gen);
            }
            out.push(GeneratedBlock { anchor, tuples });
        }
        Ok(out)
    }

    /// Output state of the class item prepended to `tuples`.
    pub fn embed_trajectory(&self, tuples: &[Tuple]) -> Result<Vec<f64>> {
        if tuples.is_empty() {
            return Err(Error::Model("cannot embed an empty trajectory".into()));
        }
        let plan = SequencePlan::inputs_only(tuples.to_vec(), true, 0.0);
        let items = input_items(&plan);
        let mut g = Graph::new(&self.params);
        let states = self.encode_items(&mut g, &items, items.len())?;
        Ok(g.value(states).row(0).iter().map(|v| v.f64()).collect())
    }
}

impl GeneratedTuple {
    pub fn to_tuple(&self) -> Tuple {
        Tuple {
            spatial: Slot::Value(Spatial { pos: self.pos, omega: self.omega.clone() }),
            temporal: Slot::Value(self.t_rel),
            road: Slot::Value(self.road),
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Sum over rows of `𝟙·(½‖l̂−l‖₂ + |t̂−t| + |r̂−r|) − log p(e)`. The indicator
/// is zero for stop targets; features absent from a target contribute no
/// regression term.
pub fn tuple_losses<T: Real>(
    g: &mut Graph<'_, T>,
    out: &HeadOutputs,
    targets: &[Tuple],
    norm: &Normalizer,
    num_segments: usize,
) -> Result<Var> {
    let mut classes = Vec::with_capacity(targets.len());
    let (mut c_rows, mut c_vals) = (Vec::new(), Vec::new());
    let (mut t_rows, mut t_vals) = (Vec::new(), Vec::new());
    let (mut r_rows, mut r_vals) = (Vec::new(), Vec::new());
    for (k, t) in targets.iter().enumerate() {
        if t.is_end() {
            classes.push(num_segments);
            continue;
        }
        match &t.road {
            Slot::Value(r) => {
                if r.segment >= num_segments {
                    return Err(Error::Model(format!("target segment {} >= |E| = {num_segments}", r.segment)));
                }
                classes.push(r.segment);
                r_rows.push(k);
                r_vals.push(r.fraction);
            }
            Slot::Token(_) => return Err(Error::Model(format!("target {k} has no road supervision"))),
        }
        if let Slot::Value(s) = &t.spatial {
            c_rows.push(k);
            c_vals.extend(norm.coord(s.pos));
        }
        if let Slot::Value(v) = t.temporal {
            t_rows.push(k);
            t_vals.push(norm.time(v));
        }
    }
    let logp = g.log_softmax(out.logits);
    let picked = g.pick(logp, &classes);
    let nll = g.sum_all(picked);
    let mut total = g.scale(nll, -T::one());
    if !c_rows.is_empty() {
        let p = g.gather_rows(out.coord, &c_rows);
        let target = g.input(Tensor::matrix(c_rows.len(), 2, c_vals.into_iter().map(T::of).collect()));
        let diff = g.sub(p, target);
        let sq = g.square(diff);
        let s = g.sum_cols(sq);
        let n = g.sqrt(s);
        let sum = g.sum_all(n);
        let half = g.scale(sum, T::of(0.5));
        total = g.add(total, half);
    }
    for (rows, vals, head) in [(t_rows, t_vals, out.time), (r_rows, r_vals, out.frac)] {
        if rows.is_empty() {
            continue;
        }
        let p = g.gather_rows(head, &rows);
        let target = g.input(column(&vals));
        let diff = g.sub(p, target);
        let a = g.abs(diff);
        let sum = g.sum_all(a);
        total = g.add(total, sum);
    }
    Ok(total)
}
