//! Pre-training: reconstruct dense, fully observed trajectories from sparse,
//! incomplete ones while aligning dense and sparse embeddings contrastively.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use roadtraj_nn::{adam_step, AdamConfig, Gradients, Graph, NnError, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::mapmatch::MatchedTrajectory;
use crate::model::Model;
use crate::roadnet::RoadNetwork;
use crate::tokenizer::{
    assign_positions, build_pretrain_plan, dense_points, input_items, tokenize_dense, PositionedItem,
    PositionedSequence, SequencePlan, Tuple,
};
use crate::trajdata::{drop_features, interval_ratio, resample, Dataset, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mu_choices_s: Vec<f64>,
    pub phi: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub contrastive: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mu_choices_s: vec![60.0, 120.0, 240.0],
            phi: 0.2,
            tau: 0.1,
            batch_size: 128,
            lr: 1e-3,
            epochs: 50,
            patience: 5,
            contrastive: true,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// The larger batch size used in the experiments' text.
    pub fn large_batch() -> Self {
        Self { batch_size: 256, ..Self::default() }
    }

    pub fn validate(&self, interval_s: f64) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Train(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.phi) {
            return Err(Error::Train(format!("removal probability must be in [0, 1), got {}", self.phi)));
        }
        if self.mu_choices_s.is_empty() || self.batch_size == 0 {
            return Err(Error::Train("need at least one resampling interval and a positive batch size".into()));
        }
        for &mu in &self.mu_choices_s {
            interval_ratio(interval_s, mu).map_err(|e| Error::Train(e.to_string()))?;
        }
        Ok(())
    }
}

/// A map-matched trajectory with its fully observed tuples precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub traj: Trajectory,
    pub full: Vec<Tuple>,
}

impl Prepared {
    pub fn t0(&self) -> f64 {
        self.traj.departure()
    }

    /// `⟨[cls], g₁ … g_N⟩` over the fully observed tuples.
    pub fn dense_items(&self) -> Vec<PositionedItem> {
        input_items(&SequencePlan::inputs_only(self.full.clone(), true, self.t0()))
    }
}

/// Pairs each trajectory with the matched trajectory of the same id.
pub fn prepare(
    net: &RoadNetwork,
    delta_m: f64,
    dataset: &Dataset,
    matched: &[MatchedTrajectory],
) -> Result<Vec<Prepared>> {
    let by_id: std::collections::HashMap<u64, &MatchedTrajectory> = matched.iter().map(|m| (m.traj_id, m)).collect();
    dataset
        .trajectories
        .iter()
        .map(|t| {
            let m = by_id.get(&t.id).ok_or_else(|| Error::Train(format!("trajectory {} has no matched counterpart", t.id)))?;
            let dense = dense_points(t, m)?;
            Ok(Prepared { traj: t.clone(), full: tokenize_dense(net, delta_m, &dense)? })
        })
        .collect()
}

/// Independent RNG stream for one example of one epoch.
pub fn example_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

/// Random resampling interval, feature removal and shuffled block order.
/// The plan carries a class item so the sparse embedding comes from the same
/// pass as the reconstruction.
pub fn make_pretrain_example(
    ex: &Prepared,
    interval_s: f64,
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<SequencePlan> {
    let mu = cfg.mu_choices_s[rng.random_range(0..cfg.mu_choices_s.len())];
    let sparse = resample(&ex.traj, interval_s, mu)?;
    let sparse = drop_features(&sparse, cfg.phi, rng)?;
    let mut plan = build_pretrain_plan(&ex.full, &sparse, ex.t0(), true, rng)?;
    plan.with_cls = true;
    Ok(plan)
}

/// Row-wise InfoNCE losses with cosine similarity, and the gradients of
/// their sum with respect to both embedding matrices.
#[derive(Clone, Debug)]
pub struct Contrastive {
    pub losses: Vec<f64>,
    pub grad_dense: Tensor<f64>,
    pub grad_sparse: Tensor<f64>,
}

pub fn contrastive(dense: &[Vec<f64>], sparse: &[Vec<f64>], tau: f64) -> Result<Contrastive> {
    let b = dense.len();
    if b == 0 || sparse.len() != b {
        return Err(Error::Train("contrastive batch needs equally many dense and sparse embeddings".into()));
    }
    let d = dense[0].len();
    for e in dense.iter().chain(sparse) {
        if e.len() != d {
            return Err(Error::Train("embeddings differ in width".into()));
        }
        if e.iter().map(|v| v * v).sum::<f64>() == 0.0 {
            return Err(Error::Train("zero-norm embedding".into()));
        }
    }
    let mut g = Graph::<f64>::detached();
    let dv = g.input(Tensor::matrix(b, d, dense.concat()));
    let sv = g.input(Tensor::matrix(b, d, sparse.concat()));
    let unit = |g: &mut Graph<'_, f64>, x: Var| {
        let sq = g.square(x);
        let s = g.sum_cols(sq);
        let n = g.sqrt(s);
        g.div_col(x, n)
    };
    let dn = unit(&mut g, dv);
    let sn = unit(&mut g, sv);
    let sim = g.matmul_nt(dn, sn);
    let logits = g.scale(sim, 1.0 / tau);
    let logp = g.log_softmax(logits);
    let diag: Vec<usize> = (0..b).collect();
    let picked = g.pick(logp, &diag);
    let losses: Vec<f64> = g.value(picked).data().iter().map(|v| -v).collect();
    let total = g.sum_all(picked);
    let total = g.scale(total, -1.0);
    let back = g.backward(total)?;
    let zero = || Tensor::zeros(b, d);
    Ok(Contrastive {
        losses,
        grad_dense: back.input_grad(dv).cloned().unwrap_or_else(zero),
        grad_sparse: back.input_grad(sv).cloned().unwrap_or_else(zero),
    })
}

/// Per-trajectory InfoNCE losses.
pub fn info_nce(dense: &[Vec<f64>], sparse: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    Ok(contrastive(dense, sparse, tau)?.losses)
}

/// Runs closures serially or on a dedicated thread pool; results keep input
/// order either way, so reductions stay deterministic.
pub struct Executor {
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Train(format!("cannot start {workers} workers: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { pool })
    }

    pub fn map<R: Send>(&self, n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
        match &self.pool {
            Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }
}

/// One training example: a teacher-forcing sequence, plus the dense item
/// list when the contrastive term is active.
pub struct BatchItem {
    pub seq: PositionedSequence,
    pub dense: Option<Vec<PositionedItem>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub recon_sum: f64,
    pub cl_sum: f64,
    pub examples: usize,
    pub tuples: usize,
}

struct Forward<'p> {
    graph: Graph<'p, f32>,
    recon: Var,
    recon_value: f64,
    count: usize,
    sparse: Option<Var>,
    dense: Option<Var>,
}

fn forward<'p>(model: &'p Model<f32>, item: &BatchItem) -> Result<Forward<'p>> {
    let mut g = Graph::new(&model.params);
    let tf = model.teacher_forced(&mut g, &item.seq)?;
    let recon = g.scale(tf.loss_sum, 1.0 / tf.count as f32);
    let recon_value = g.value(recon).item() as f64;
    let (sparse, dense) = match &item.dense {
        Some(items) => {
            if !item.seq.has_cls() {
                return Err(Error::Train("contrastive training needs a class item in the sparse sequence".into()));
            }
            let s = g.gather_rows(tf.states, &[0]);
            let states = model.encode_items(&mut g, items, items.len())?;
            let d = g.gather_rows(states, &[0]);
            (Some(s), Some(d))
        }
        None => (None, None),
    };
    Ok(Forward { graph: g, recon, recon_value, count: tf.count, sparse, dense })
}

fn row_f64(g: &Graph<'_, f32>, v: Var) -> Vec<f64> {
    g.value(v).data().iter().map(|&x| x as f64).collect()
}

/// Gradient of `Σ_T (mean tuple loss + InfoNCE)` over a batch.
pub fn batch_gradients(
    model: &Model<f32>,
    items: &[BatchItem],
    tau: Option<f64>,
    exec: &Executor,
) -> Result<(Gradients<f32>, BatchStats)> {
    let fwd: Vec<Forward<'_>> = exec.map(items.len(), |i| forward(model, &items[i])).into_iter().collect::<Result<_>>()?;
    let mut stats = BatchStats { examples: items.len(), ..Default::default() };
    for f in &fwd {
        if !f.recon_value.is_finite() {
            return Err(Error::Nn(NnError::NonFinite("reconstruction loss".into())));
        }
        stats.recon_sum += f.recon_value;
        stats.tuples += f.count;
    }
    let cl = match tau {
        Some(tau) if fwd.iter().all(|f| f.sparse.is_some()) => {
            let dense: Vec<Vec<f64>> = fwd.iter().map(|f| row_f64(&f.graph, f.dense.expect("checked"))).collect();
            let sparse: Vec<Vec<f64>> = fwd.iter().map(|f| row_f64(&f.graph, f.sparse.expect("checked"))).collect();
            let c = contrastive(&dense, &sparse, tau)?;
            stats.cl_sum = c.losses.iter().sum();
            Some(c)
        }
        Some(_) => return Err(Error::Train("contrastive term requested without dense sequences".into())),
        None => None,
    };
    let grads: Vec<Result<Gradients<f32>>> = exec.map(fwd.len(), |i| {
        let f = &fwd[i];
        let mut seeds = vec![(f.recon, Tensor::scalar(1.0f32))];
        if let Some(c) = &cl {
            let d = model.config.dim;
            let row = |t: &Tensor<f64>| Tensor::matrix(1, d, t.row(i).iter().map(|&v| v as f32).collect());
            seeds.push((f.sparse.expect("checked"), row(&c.grad_sparse)));
            seeds.push((f.dense.expect("checked"), row(&c.grad_dense)));
        }
        Ok(f.graph.backward_seeded(seeds)?.params)
    });
    let mut total = Gradients::empty(model.params.len());
    for g in grads {
        total.merge(&g?);
    }
    Ok((total, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over trajectories of the mean tuple loss.
    pub recon_loss: f64,
    /// Mean InfoNCE loss per trajectory.
    pub cl_loss: f64,
    pub valid_recon_loss: Option<f64>,
    pub tuples: usize,
    pub wall_seconds: f64,
}

fn pretrain_items(
    data: &[Prepared],
    order: &[usize],
    interval_s: f64,
    cfg: &PretrainConfig,
    epoch: u64,
) -> Result<Vec<BatchItem>> {
    order
        .iter()
        .map(|&i| {
            let mut rng = example_rng(cfg.seed, epoch, i as u64);
            let plan = make_pretrain_example(&data[i], interval_s, cfg, &mut rng)?;
            Ok(BatchItem {
                seq: assign_positions(&plan)?,
                dense: cfg.contrastive.then(|| data[i].dense_items()),
            })
        })
        .collect()
}

/// One pass over `data` in a seeded random order with one Adam step per batch.
pub fn pretrain_epoch(
    model: &mut Model<f32>,
    data: &[Prepared],
    interval_s: f64,
    cfg: &PretrainConfig,
    epoch: usize,
    exec: &Executor,
) -> Result<EpochStats> {
    cfg.validate(interval_s)?;
    if data.is_empty() {
        return Err(Error::Train("no training trajectories".into()));
    }
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut example_rng(cfg.seed, epoch as u64, u64::MAX));
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut totals = BatchStats::default();
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let items = pretrain_items(data, chunk, interval_s, cfg, epoch as u64)?;
        let tau = cfg.contrastive.then_some(cfg.tau);
        let (grads, stats) = batch_gradients(model, &items, tau, exec)
            .map_err(|e| Error::Train(format!("epoch {epoch} batch {b}: {e}")))?;
        adam_step(&mut model.params, &grads, &adam)
            .map_err(|e| Error::Train(format!("epoch {epoch} batch {b}: {e}")))?;
        totals.recon_sum += stats.recon_sum;
        totals.cl_sum += stats.cl_sum;
        totals.examples += stats.examples;
        totals.tuples += stats.tuples;
    }
    Ok(EpochStats {
        epoch,
        recon_loss: totals.recon_sum / totals.examples as f64,
        cl_loss: totals.cl_sum / totals.examples as f64,
        valid_recon_loss: None,
        tuples: totals.tuples,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean reconstruction loss on fixed (seeded) sparse versions of `data`.
pub fn evaluate_recon(
    model: &Model<f32>,
    data: &[Prepared],
    interval_s: f64,
    cfg: &PretrainConfig,
    exec: &Executor,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Train("no validation trajectories".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let no_cl = PretrainConfig { contrastive: false, ..cfg.clone() };
    let items = pretrain_items(data, &order, interval_s, &no_cl, u64::MAX)?;
    let losses = exec.map(items.len(), |i| -> Result<f64> {
        let mut g = Graph::new(&model.params);
        let tf = model.teacher_forced(&mut g, &items[i].seq)?;
        Ok(g.value(tf.loss_sum).item() as f64 / tf.count as f64)
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / data.len() as f64)
}

/// Trains for up to `cfg.epochs`, early-stopping on validation
/// reconstruction loss when `valid` is non-empty and restoring the best
/// parameters. Appends one CSV row per epoch to `log` when given.
pub fn pretrain(
    model: &mut Model<f32>,
    train: &[Prepared],
    valid: &[Prepared],
    interval_s: f64,
    cfg: &PretrainConfig,
    exec: &Executor,
    log: Option<&Path>,
) -> Result<Vec<EpochStats>> {
    let mut writer = match log {
        Some(p) => {
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "epoch,recon_loss,cl_loss,wall_seconds").map_err(|e| Error::io(p, e))?;
            Some((f, p))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut best: Option<(f64, roadtraj_nn::ParamStore<f32>)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let mut stats = pretrain_epoch(model, train, interval_s, cfg, epoch, exec)?;
        if !valid.is_empty() {
            let v = evaluate_recon(model, valid, interval_s, cfg, exec)?;
            stats.valid_recon_loss = Some(v);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log::info!(
            "epoch {epoch}: recon {:.4} cl {:.4} valid {:?} ({:.1}s)",
            stats.recon_loss,
            stats.cl_loss,
            stats.valid_recon_loss,
            stats.wall_seconds
        );
        if let Some((f, p)) = writer.as_mut() {
            writeln!(f, "{},{},{},{}", epoch, stats.recon_loss, stats.cl_loss, stats.wall_seconds)
                .map_err(|e| Error::io(*p, e))?;
        }
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_item_batch_has_zero_loss() {
        let l = info_nce(&[vec![1.0, 2.0]], &[vec![-3.0, 0.5]], 0.1).unwrap();
        assert!(l[0].abs() < 1e-12);
    }

    #[test]
    fn two_item_closed_form() {
        let dense = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let sparse = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = info_nce(&dense, &sparse, 0.1).unwrap();
        let expect = (1.0 + (-10f64).exp()).ln();
        assert!((l[0] - expect).abs() < 1e-12 && (l[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_is_rejected() {
        assert!(info_nce(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], 0.1).is_err());
    }

    #[test]
    fn config_checks_divisibility() {
        let cfg = PretrainConfig::default();
        assert!(cfg.validate(15.0).is_ok());
        assert!(cfg.validate(45.0).is_err());
        assert!(PretrainConfig { tau: 0.0, ..cfg }.validate(15.0).is_err());
    }
}
