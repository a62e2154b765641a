//! Task adapters over one pre-trained model: origin-destination travel time,
//! trajectory recovery, destination prediction and similar-trajectory search.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geo::LngLat;
use crate::metrics::{
    haversine, mean_precision_recall, rank_metrics, recovery_errors, regression_metrics, seg_precision_recall,
    MetricReport, TimedPoint,
};
use crate::model::{GeneratedTuple, Model};
use crate::pretrain::{batch_gradients, example_rng, BatchItem, EpochStats, Executor, Prepared};
use crate::roadnet::{RoadNetwork, RoadPos, SegmentId};
use crate::tokenizer::{
    assign_positions, build_pretrain_plan, make_tuple, SequencePlan, Slot, TargetBlock, Token, Tuple,
};
use crate::trajdata::{resample, resample_indices, GpsPoint};
use crate::{Error, Result};
use roadtraj_nn::{adam_step, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Tte,
    Recover,
    Predict,
    Search,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Tte => "tte",
            TaskKind::Recover => "recover",
            TaskKind::Predict => "predict",
            TaskKind::Search => "search",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tte" => Ok(TaskKind::Tte),
            "recover" => Ok(TaskKind::Recover),
            "predict" => Ok(TaskKind::Predict),
            "search" => Ok(TaskKind::Search),
            other => Err(Error::Task(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Interval of the dense data and of recovered output.
    pub target_interval_s: f64,
    /// Interval of sparse inputs (recovery and search candidates).
    pub input_interval_s: f64,
    /// Fixed history length for prediction; `None` means all but the last point.
    pub history_len: Option<usize>,
    /// Cap on generated tuples per block.
    pub max_block_len: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { kind: TaskKind::Recover, target_interval_s: 15.0, input_interval_s: 60.0, history_len: None, max_block_len: 64 }
    }
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self, dataset_interval_s: f64) -> Result<()> {
        if (self.target_interval_s - dataset_interval_s).abs() > 1e-9 {
            return Err(Error::Task(format!(
                "target interval {} differs from the data interval {dataset_interval_s}",
                self.target_interval_s
            )));
        }
        crate::trajdata::interval_ratio(self.target_interval_s, self.input_interval_s)
            .map_err(|e| Error::Task(e.to_string()))?;
        if self.max_block_len == 0 || self.history_len == Some(0) {
            return Err(Error::Task("block cap and history length must be positive".into()));
        }
        Ok(())
    }
}

// ---- origin-destination travel time ----

/// `⟨(l_o, 0, [m]), (l_d, [m], [m])⟩`; one block, anchored on the destination.
pub fn od_tte_plan(net: &RoadNetwork, delta_m: f64, origin: LngLat, dest: LngLat, t0: f64) -> Result<SequencePlan> {
    let o = make_tuple(net, delta_m, Some(origin), Some(0.0), None)?;
    let d = make_tuple(net, delta_m, Some(dest), None, None)?;
    for (name, t) in [("origin", &o), ("destination", &d)] {
        if t.spatial.value().is_some_and(|s| s.omega.is_empty()) {
            return Err(Error::Task(format!("no road segment within {delta_m} m of the {name}")));
        }
    }
    Ok(SequencePlan {
        with_cls: false,
        inputs: vec![o, d],
        blocks: vec![TargetBlock { anchor: 1, targets: Vec::new() }],
        block_order: vec![0],
        t0,
    })
}

/// Estimated travel time in seconds, never negative.
pub fn od_tte(model: &Model<f32>, net: &RoadNetwork, origin: LngLat, dest: LngLat, t0: f64) -> Result<f64> {
    let plan = od_tte_plan(net, model.config.delta_m, origin, dest, t0)?;
    let blocks = model.generate_blocks(net, &plan, 1)?;
    Ok(blocks[0].tuples[0].t_rel.max(0.0))
}

fn tte_train_plan(ex: &Prepared) -> Result<SequencePlan> {
    let (first, last) = (&ex.full[0], &ex.full[ex.full.len() - 1]);
    Ok(SequencePlan {
        with_cls: false,
        inputs: vec![first.masked(false, false, true), last.masked(false, true, true)],
        blocks: vec![TargetBlock { anchor: 1, targets: vec![last.clone(), Tuple::special(Token::End)] }],
        block_order: vec![0],
        t0: ex.t0(),
    })
}

// ---- recovery ----

/// Known points with masked road domains, each completed by a one-tuple
/// block, with a `g_[m]` wherever the time gap exceeds `eta_s`. Blocks keep
/// temporal order.
pub fn recovery_plan(net: &RoadNetwork, delta_m: f64, points: &[GpsPoint], eta_s: f64) -> Result<SequencePlan> {
    let t0 = points.first().ok_or_else(|| Error::Task("empty sparse trajectory".into()))?.t;
    let mut inputs = Vec::new();
    let mut blocks = Vec::new();
    for (k, p) in points.iter().enumerate() {
        if k > 0 && !(p.t > points[k - 1].t) {
            return Err(Error::Task(format!("timestamps not increasing at point {k}")));
        }
        blocks.push(TargetBlock { anchor: inputs.len(), targets: Vec::new() });
        inputs.push(make_tuple(net, delta_m, Some(p.pos), Some(p.t - t0), None)?);
        if points.get(k + 1).is_some_and(|n| n.t - p.t > eta_s * (1.0 + 1e-9)) {
            blocks.push(TargetBlock { anchor: inputs.len(), targets: Vec::new() });
            inputs.push(Tuple::special(Token::Mask));
        }
    }
    let block_order = (0..blocks.len()).collect();
    Ok(SequencePlan { with_cls: false, inputs, blocks, block_order, t0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveredPoint {
    pub pos: LngLat,
    /// Absolute time.
    pub t: f64,
    pub road: RoadPos,
    /// False for completions of observed points.
    pub generated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recovery {
    pub points: Vec<RecoveredPoint>,
    /// Whether times came out non-decreasing; they are not re-sorted.
    pub monotonic: bool,
}

pub fn recover(model: &Model<f32>, net: &RoadNetwork, points: &[GpsPoint], eta_s: f64, max_block_len: usize) -> Result<Recovery> {
    let plan = recovery_plan(net, model.config.delta_m, points, eta_s)?;
    let blocks = model.generate_blocks(net, &plan, max_block_len)?;
    let mut by_anchor: Vec<&[GeneratedTuple]> = vec![&[]; plan.inputs.len()];
    for b in &blocks {
        by_anchor[b.anchor] = &b.tuples;
    }
    let mut out = Vec::new();
    for (k, input) in plan.inputs.iter().enumerate() {
        let generated = input.special_kind() == Some(Token::Mask);
        for g in by_anchor[k] {
            out.push(RecoveredPoint { pos: g.pos, t: plan.t0 + g.t_rel, road: g.road, generated });
        }
    }
    let monotonic = out.windows(2).all(|w| w[1].t >= w[0].t);
    Ok(Recovery { points: out, monotonic })
}

fn recovery_train_plan(ex: &Prepared, spec: &TaskSpec) -> Result<SequencePlan> {
    let sparse = resample(&ex.traj, spec.target_interval_s, spec.input_interval_s)?;
    // No shuffle, so the rng is never consulted.
    build_pretrain_plan(&ex.full, &sparse, ex.t0(), false, &mut example_rng(0, 0, 0))
}

// ---- prediction ----

/// `⟨g₁ … g_n, g_[m]⟩` with the future as the single block.
pub fn prediction_plan(history: &[Tuple], future: &[Tuple], t0: f64) -> Result<SequencePlan> {
    if history.is_empty() {
        return Err(Error::Task("prediction needs at least one history point".into()));
    }
    let mut inputs = history.to_vec();
    inputs.push(Tuple::special(Token::Mask));
    let mut targets = future.to_vec();
    if !targets.is_empty() {
        targets.push(Tuple::special(Token::End));
    }
    Ok(SequencePlan {
        with_cls: false,
        blocks: vec![TargetBlock { anchor: history.len(), targets }],
        block_order: vec![0],
        inputs,
        t0,
    })
}

/// Generates the future until the stop class or `max_block_len` tuples; the
/// last tuple is the predicted destination.
pub fn predict(model: &Model<f32>, net: &RoadNetwork, history: &[Tuple], t0: f64, max_block_len: usize) -> Result<Vec<GeneratedTuple>> {
    let plan = prediction_plan(history, &[], t0)?;
    Ok(model.generate_blocks(net, &plan, max_block_len)?.remove(0).tuples)
}

// ---- similar search ----

/// The sparse arrangement used for candidates: observed points with masked
/// road domains and `g_[m]` over gaps.
pub fn sparse_tuples(net: &RoadNetwork, delta_m: f64, points: &[GpsPoint], eta_s: f64) -> Result<Vec<Tuple>> {
    Ok(recovery_plan(net, delta_m, points, eta_s)?.inputs)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Task("zero-norm embedding".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Candidate ids by descending cosine similarity to `query`; ties keep the
/// lower id first.
pub fn rank_by_similarity(query: &[f64], candidates: &[(u64, Vec<f64>)]) -> Result<Vec<u64>> {
    let mut scored = candidates
        .iter()
        .map(|(id, e)| Ok((*id, cosine(query, e)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|s| s.0).collect())
}

/// Embeds the dense query and every sparse candidate, then ranks.
pub fn similar_search(
    model: &Model<f32>,
    net: &RoadNetwork,
    query: &[Tuple],
    candidates: &[(u64, Vec<GpsPoint>)],
    eta_s: f64,
) -> Result<Vec<u64>> {
    if candidates.is_empty() {
        return Err(Error::Task("no search candidates".into()));
    }
    let q = model.embed_trajectory(query)?;
    let embedded = candidates
        .iter()
        .map(|(id, pts)| Ok((*id, model.embed_trajectory(&sparse_tuples(net, model.config.delta_m, pts, eta_s)?)?)))
        .collect::<Result<Vec<_>>>()?;
    rank_by_similarity(&q, &embedded)
}

// ---- fine-tuning ----

/// Teacher-forcing plan for one training example; prediction draws the
/// history length from `rng`, the other tasks are deterministic.
pub fn task_train_plan(ex: &Prepared, spec: &TaskSpec, rng: &mut impl Rng) -> Result<SequencePlan> {
    let n = ex.full.len();
    match spec.kind {
        TaskKind::Tte => tte_train_plan(ex),
        TaskKind::Recover => recovery_train_plan(ex, spec),
        TaskKind::Predict => {
            if n < 3 {
                return Err(Error::Task(format!("trajectory {} is too short to predict", ex.traj.id)));
            }
            let h = rng.random_range(2..n);
            prediction_plan(&ex.full[..h], &ex.full[h..], ex.t0())
        }
        TaskKind::Search => Err(Error::Task("similar search is zero-shot only".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-3, batch_size: 128, patience: 5, seed: 0 }
    }
}

fn task_items(data: &[Prepared], order: &[usize], spec: &TaskSpec, seed: u64, epoch: u64) -> Result<Vec<BatchItem>> {
    order
        .iter()
        .map(|&i| {
            let plan = task_train_plan(&data[i], spec, &mut example_rng(seed, epoch, i as u64))?;
            Ok(BatchItem { seq: assign_positions(&plan)?, dense: None })
        })
        .collect()
}

/// Mean teacher-forced task loss over fixed validation plans.
pub fn task_loss(model: &Model<f32>, data: &[Prepared], spec: &TaskSpec, seed: u64, exec: &Executor) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Task("no validation trajectories".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let items = task_items(data, &order, spec, seed, u64::MAX)?;
    let (_, stats) = batch_gradients(model, &items, None, exec)?;
    Ok(stats.recon_sum / stats.examples as f64)
}

/// Optimizes the task's teacher-forced loss (no contrastive term), early
/// stopping on validation loss and restoring the best parameters.
pub fn finetune(
    model: &mut Model<f32>,
    train: &[Prepared],
    valid: &[Prepared],
    spec: &TaskSpec,
    cfg: &FinetuneConfig,
    exec: &Executor,
) -> Result<Vec<EpochStats>> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Task("fine-tuning needs data and a positive batch size".into()));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut history = Vec::new();
    let mut best: Option<(f64, roadtraj_nn::ParamStore<f32>)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let start = std::time::Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut example_rng(cfg.seed, epoch as u64, u64::MAX));
        let (mut loss, mut tuples) = (0.0, 0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items = task_items(train, chunk, spec, cfg.seed, epoch as u64)?;
            let (grads, stats) = batch_gradients(model, &items, None, exec)
                .map_err(|e| Error::Task(format!("epoch {epoch} batch {b}: {e}")))?;
            adam_step(&mut model.params, &grads, &adam)
                .map_err(|e| Error::Task(format!("epoch {epoch} batch {b}: {e}")))?;
            loss += stats.recon_sum;
            tuples += stats.tuples;
        }
        let mut stats = EpochStats {
            epoch,
            recon_loss: loss / train.len() as f64,
            cl_loss: 0.0,
            valid_recon_loss: None,
            tuples,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if !valid.is_empty() {
            let v = task_loss(model, valid, spec, cfg.seed, exec)?;
            stats.valid_recon_loss = Some(v);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log::info!("{} epoch {epoch}: loss {:.4} valid {:?}", spec.kind.name(), stats.recon_loss, stats.valid_recon_loss);
        history.push(stats);
        if !valid.is_empty() && stale >= cfg.patience {
            break;
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(history)
}

// ---- evaluation ----

/// Per-example outputs (one row per trajectory, first column its id) and
/// the metric summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub report: MetricReport,
}

fn sparse_points(ex: &Prepared, spec: &TaskSpec) -> Result<Vec<GpsPoint>> {
    let step = crate::trajdata::interval_ratio(spec.target_interval_s, spec.input_interval_s)?;
    Ok(resample_indices(ex.traj.points.len(), step).into_iter().map(|i| ex.traj.points[i]).collect())
}

fn truth_points(ex: &Prepared) -> Vec<TimedPoint> {
    ex.full
        .iter()
        .map(|t| match (&t.spatial, &t.temporal, &t.road) {
            (Slot::Value(s), Slot::Value(dt), Slot::Value(r)) => TimedPoint { t: ex.t0() + dt, pos: s.pos, road: *r },
            _ => unreachable!("prepared tuples are fully observed"),
        })
        .collect()
}

/// Runs the task over held-out trajectories and scores it against their
/// dense, map-matched ground truth.
pub fn evaluate(
    model: &Model<f32>,
    net: &RoadNetwork,
    data: &[Prepared],
    spec: &TaskSpec,
    exec: &Executor,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Task("no evaluation trajectories".into()));
    }
    let eta = spec.target_interval_s;
    let cols = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match spec.kind {
        TaskKind::Tte => {
            let rows = exec
                .map(data.len(), |i| -> Result<Vec<f64>> {
                    let ex = &data[i];
                    let (o, d) = (ex.traj.points[0], ex.traj.points[ex.traj.points.len() - 1]);
                    let pred = od_tte(model, net, o.pos, d.pos, o.t)?;
                    Ok(vec![ex.traj.id as f64, ex.traj.duration(), pred])
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let truth: Vec<f64> = rows.iter().map(|r| r[1]).collect();
            let pred: Vec<f64> = rows.iter().map(|r| r[2]).collect();
            let r = regression_metrics(&pred, &truth)?;
            let mut report = MetricReport::new("tte", rows.len()).with("mae", r.mae).with("rmse", r.rmse).with("mape_pct", r.mape_pct);
            report.excluded = r.mape_excluded;
            Ok(Evaluation { columns: cols(&["traj_id", "truth_s", "pred_s"]), rows, report })
        }
        TaskKind::Recover => {
            let results = exec.map(data.len(), |i| -> Result<_> {
                let ex = &data[i];
                let rec = recover(model, net, &sparse_points(ex, spec)?, eta, spec.max_block_len)?;
                let er: BTreeSet<SegmentId> = rec.points.iter().map(|p| p.road.segment).collect();
                let truth = truth_points(ex);
                let eg: BTreeSet<SegmentId> = truth.iter().map(|p| p.road.segment).collect();
                let got: Vec<TimedPoint> = rec.points.iter().map(|p| TimedPoint { t: p.t, pos: p.pos, road: p.road }).collect();
                let errs = recovery_errors(net, &got, &truth, eta / 2.0)?;
                Ok((ex.traj.id, er, eg, errs, rec.points.len()))
            });
            let mut rows = Vec::new();
            let mut sets = Vec::new();
            let (mut c, mut r, mut t, mut n) = (0.0, 0.0, 0.0, 0usize);
            for res in results {
                let (id, er, eg, e, len) = res?;
                let (p, rc) = seg_precision_recall(&er, &eg).unwrap_or((f64::NAN, f64::NAN));
                rows.push(vec![id as f64, len as f64, p, rc, e.mae_coor_m, e.mae_road_m, e.mae_time_s]);
                c += e.mae_coor_m * e.aligned as f64;
                r += e.mae_road_m * e.aligned as f64;
                t += e.mae_time_s * e.aligned as f64;
                n += e.aligned;
                sets.push((er, eg));
            }
            let pr = mean_precision_recall(&sets)?;
            let n = n.max(1) as f64;
            let mut report = MetricReport::new("recover", pr.samples)
                .with("precision", pr.precision)
                .with("recall", pr.recall)
                .with("mae_coor_m", c / n)
                .with("mae_road_m", r / n)
                .with("mae_time_s", t / n);
            report.excluded = pr.excluded;
            let columns = cols(&["traj_id", "points", "precision", "recall", "mae_coor_m", "mae_road_m", "mae_time_s"]);
            Ok(Evaluation { columns, rows, report })
        }
        TaskKind::Predict => {
            let rows = exec
                .map(data.len(), |i| -> Result<Vec<f64>> {
                    let ex = &data[i];
                    let n = ex.full.len();
                    let h = spec.history_len.unwrap_or(n - 1).min(n - 1);
                    let future = predict(model, net, &ex.full[..h], ex.t0(), spec.max_block_len)?;
                    let dest = future.last().ok_or_else(|| Error::Task("empty prediction".into()))?;
                    let truth = truth_points(ex)[n - 1];
                    Ok(vec![
                        ex.traj.id as f64,
                        future.len() as f64,
                        haversine(dest.pos, truth.pos),
                        net.road_distance(dest.road, truth.road)?,
                        (ex.t0() + dest.t_rel - truth.t).abs(),
                        f64::from(u8::from(dest.road.segment == truth.road.segment)),
                    ])
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
            let report = MetricReport::new("predict", rows.len())
                .with("mae_coor_m", mean(2))
                .with("mae_road_m", mean(3))
                .with("mae_time_s", mean(4))
                .with("top1_acc_pct", 100.0 * mean(5));
            let columns = cols(&["traj_id", "generated", "coor_err_m", "road_err_m", "time_err_s", "segment_hit"]);
            Ok(Evaluation { columns, rows, report })
        }
        TaskKind::Search => {
            let delta = model.config.delta_m;
            let candidates = exec
                .map(data.len(), |i| -> Result<(u64, Vec<f64>)> {
                    let pts = sparse_points(&data[i], spec)?;
                    Ok((data[i].traj.id, model.embed_trajectory(&sparse_tuples(net, delta, &pts, eta)?)?))
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let rankings = exec
                .map(data.len(), |i| -> Result<Vec<u64>> {
                    rank_by_similarity(&model.embed_trajectory(&data[i].full)?, &candidates)
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let truths: Vec<u64> = data.iter().map(|p| p.traj.id).collect();
            let (mean_rank, top1) = rank_metrics(&rankings, &truths)?;
            let rows = rankings
                .iter()
                .zip(&truths)
                .map(|(r, &id)| {
                    let rank = r.iter().position(|&x| x == id).map_or(f64::NAN, |p| (p + 1) as f64);
                    vec![id as f64, rank, r[0] as f64]
                })
                .collect();
            let report = MetricReport::new("search", truths.len()).with("mean_rank", mean_rank).with("top1_acc_pct", top1);
            Ok(Evaluation { columns: cols(&["traj_id", "rank", "top_id"]), rows, report })
        }
    }
}
