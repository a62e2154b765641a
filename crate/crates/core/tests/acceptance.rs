//! Acceptance checks, one PASS/FAIL line each. Runs as a plain binary so the
//! lines always reach the terminal; exits non-zero if any check fails.
//!
//! Checks 6–10 share one pre-trained model (2,000 trajectories, d = 64),
//! which dominates the run time.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadtraj::checkpoint::{load_checkpoint, save_checkpoint};
use roadtraj::mapmatch::{hmm_match, Candidate, MatchLattice, MatchParams};
use roadtraj::metrics::mean_precision_recall;
use roadtraj::model::{tuple_losses, HeadOutputs, Model, ModelConfig, Normalizer};
use roadtraj::pretrain::{
    info_nce, make_pretrain_example, prepare, pretrain_epoch, Executor, Prepared, PretrainConfig,
};
use roadtraj::roadnet::{synth_grid_network, RoadNetwork, RoadPos};
use roadtraj::tasks::{
    evaluate, finetune, rank_by_similarity, recover, sparse_tuples, FinetuneConfig, TaskKind, TaskSpec,
};
use roadtraj::tokenizer::{
    assign_positions, build_pretrain_plan, dense_points, detokenize, make_tuple, tokenize_dense, PositionedSequence,
    Slot, Token, Tuple,
};
use roadtraj::trajdata::{resample, resample_indices, synth_trajectories, Dataset, SynthConfig};
use roadtraj_nn::{grad_check, GradCheckConfig, Graph, ParamStore, Tensor, Var};

use common::*;

type Outcome = (bool, String);

// ---- 1 ----

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let w = world(4, 21);
    let m = model::<f64>(&w, 16, 2, 2, 3);
    let seq = assign_positions(&three_point_plan(&w.prepared[0])).unwrap();
    let report = grad_check(
        &m.params,
        |g: &mut Graph<'_, f64>| -> Result<Var, roadtraj::Error> { Ok(m.teacher_forced(g, &seq)?.loss_sum) },
        &GradCheckConfig { step: 1e-5, max_coords: 600, seed: 1 },
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    (
        report.max_rel_error <= 1e-4 && secs < 60.0,
        format!("max relative error {:.2e} over {} coordinates, {secs:.1} s", report.max_rel_error, report.coords.len()),
    )
}

// ---- 2 ----

fn reference_tuple_loss(
    coord: &[f64],
    time: &[f64],
    logits: &[f64],
    frac: &[f64],
    targets: &[Tuple],
    norm: &Normalizer,
    e: usize,
) -> f64 {
    let classes = e + 1;
    let mut total = 0.0;
    for (k, t) in targets.iter().enumerate() {
        let row = &logits[k * classes..(k + 1) * classes];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        if t.is_end() {
            total += lse - row[e];
            continue;
        }
        let Slot::Value(r) = t.road else { panic!("unsupervised road") };
        total += lse - row[r.segment] + (frac[k] - r.fraction).abs();
        if let Slot::Value(s) = &t.spatial {
            let [x, y] = norm.coord(s.pos);
            total += 0.5 * ((coord[2 * k] - x).powi(2) + (coord[2 * k + 1] - y).powi(2)).sqrt();
        }
        if let Slot::Value(v) = t.temporal {
            total += (time[k] - norm.time(v)).abs();
        }
    }
    total
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Log-sum-exp form.
fn straight_info_nce(dense: &[Vec<f64>], sparse: &[Vec<f64>], tau: f64) -> Vec<f64> {
    (0..dense.len())
        .map(|i| {
            let s: Vec<f64> = sparse.iter().map(|y| cos(&dense[i], y) / tau).collect();
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            mx + s.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - s[i]
        })
        .collect()
}

/// Ratio-of-exponentials form, for small batches.
fn brute_info_nce(dense: &[Vec<f64>], sparse: &[Vec<f64>], tau: f64) -> Vec<f64> {
    (0..dense.len())
        .map(|i| {
            let num = (cos(&dense[i], &sparse[i]) / tau).exp();
            let den: f64 = sparse.iter().map(|s| (cos(&dense[i], s) / tau).exp()).sum();
            -(num / den).ln()
        })
        .collect()
}

fn formula_oracles() -> Outcome {
    let w = world(20, 6);
    let norm = Normalizer::for_dataset(&w.data);
    let e = w.net.num_segments();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_loss: f64 = 0.0;
    for case in 0..100 {
        let ex = &w.prepared[case % w.prepared.len()];
        let n = rng.random_range(1..=ex.full.len());
        let mut targets: Vec<Tuple> =
            ex.full[..n].iter().map(|t| t.masked(rng.random_bool(0.3), rng.random_bool(0.3), false)).collect();
        targets.push(Tuple::special(Token::End));
        let k = targets.len();
        let mut r = |len: usize, s: f64| -> Vec<f64> { (0..len).map(|_| rng.random_range(-s..s)).collect() };
        let (coord, time, logits, frac) = (r(2 * k, 2.0), r(k, 3.0), r(k * (e + 1), 4.0), r(k, 1.5));
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let out = HeadOutputs {
            coord: g.input(Tensor::matrix(k, 2, coord.clone())),
            time: g.input(Tensor::matrix(k, 1, time.clone())),
            logits: g.input(Tensor::matrix(k, e + 1, logits.clone())),
            frac: g.input(Tensor::matrix(k, 1, frac.clone())),
        };
        let loss = tuple_losses(&mut g, &out, &targets, &norm, e).unwrap();
        let expect = reference_tuple_loss(&coord, &time, &logits, &frac, &targets, &norm, e);
        worst_loss = worst_loss.max((g.value(loss).item() - expect).abs() / expect.abs().max(1.0));
    }
    let batch = |rng: &mut ChaCha8Rng, b: usize, d: usize| -> Vec<Vec<f64>> {
        (0..b).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let (mut worst_nce, mut worst_brute): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let b = rng.random_range(1..=32);
        let d = rng.random_range(2..=32);
        let tau = rng.random_range(0.05..1.0);
        let (x, y) = (batch(&mut rng, b, d), batch(&mut rng, b, d));
        for (g, e) in info_nce(&x, &y, tau).unwrap().iter().zip(straight_info_nce(&x, &y, tau)) {
            worst_nce = worst_nce.max((g - e).abs());
        }
    }
    for _ in 0..100 {
        let b = rng.random_range(1..=4);
        let (x, y) = (batch(&mut rng, b, 8), batch(&mut rng, b, 8));
        for (g, e) in info_nce(&x, &y, 0.1).unwrap().iter().zip(brute_info_nce(&x, &y, 0.1)) {
            worst_brute = worst_brute.max((g - e).abs());
        }
    }
    (
        worst_loss <= 1e-6 && worst_nce <= 1e-6 && worst_brute <= 1e-12,
        format!("tuple loss {worst_loss:.1e}, InfoNCE {worst_nce:.1e}, batch<=4 brute force {worst_brute:.1e}"),
    )
}

// ---- 3 ----

fn mask_integrity() -> Outcome {
    let w = world(30, 4);
    let m = model::<f32>(&w, 16, 4, 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cfg = PretrainConfig::default();
    let states = |s: &PositionedSequence| {
        let mut g = Graph::new(&m.params);
        let v = m.encode(&mut g, s).unwrap();
        g.value(v).clone()
    };
    let mut leaks = 0;
    for trial in 0..100 {
        let ex = &w.prepared[trial % w.prepared.len()];
        let seq = assign_positions(&make_pretrain_example(ex, ETA, &cfg, &mut rng).unwrap()).unwrap();
        let keep = rng.random_range(seq.input_len - 1..seq.items.len() - 1);
        let mut other = seq.clone();
        for item in &mut other.items[keep + 1..] {
            let s = rng.random_range(0..w.net.num_segments());
            let frac = rng.random_range(0.0..1.0);
            let pos = w.net.locate(s, frac).unwrap();
            item.tuple =
                make_tuple(&w.net, DELTA, Some(pos), Some(rng.random_range(0.0..900.0)), Some(RoadPos::new(s, frac)))
                    .unwrap();
        }
        let (a, b) = (states(&seq), states(&other));
        let bits = |t: &Tensor<f32>, r: usize| t.row(r).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if (0..=keep).any(|r| bits(&a, r) != bits(&b, r)) {
            leaks += 1;
        }
    }
    (leaks == 0, format!("{leaks} of 100 perturbation trials leaked"))
}

// ---- 4 ----

fn tokenizer_oracle() -> Outcome {
    let mut enumerator_ok = true;
    for len in 1..80 {
        for step in 1..20 {
            let brute: Vec<usize> = (0..len).filter(|&i| i % step == 0 || i + 1 == len).collect();
            enumerator_ok &= resample_indices(len, step) == brute;
        }
    }
    let net = synth_grid_network(6, 6, 500.0, 104.0, 30.6, 9).unwrap();
    let (ds, matched) = synth_trajectories(&net, &SynthConfig { n: 1000, seed: 9, ..Default::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut failures = 0;
    for (t, m) in ds.trajectories.iter().zip(&matched) {
        let dense = dense_points(t, m).unwrap();
        let full = tokenize_dense(&net, DELTA, &dense).unwrap();
        for mu in [60.0, 120.0, 240.0] {
            let sparse = resample(t, ETA, mu).unwrap();
            let kept: Vec<usize> = sparse.entries.iter().map(|e| e.dense_index).collect();
            enumerator_ok &= kept == resample_indices(t.points.len(), (mu / ETA) as usize);
            let plan = build_pretrain_plan(&full, &sparse, t.departure(), true, &mut rng).unwrap();
            if detokenize(&plan).unwrap() != dense {
                failures += 1;
            }
        }
    }
    (
        failures == 0 && enumerator_ok,
        format!("{failures} of 3000 round trips differ; index pattern matches enumeration: {enumerator_ok}"),
    )
}

// ---- 5 ----

fn random_lattice(rng: &mut ChaCha8Rng, points: usize, max_cands: usize) -> MatchLattice {
    let sizes: Vec<usize> = (0..points).map(|_| rng.random_range(1..=max_cands)).collect();
    let candidates =
        sizes.iter().map(|&k| (0..k).map(|i| Candidate { pos: RoadPos::new(i, 0.5), offset_m: 0.0 }).collect()).collect();
    let score = |rng: &mut ChaCha8Rng| rng.random_range(-4..=0) as f64 * 0.5;
    let emission = sizes.iter().map(|&k| (0..k).map(|_| score(rng)).collect()).collect();
    let transition = sizes
        .windows(2)
        .map(|w| {
            (0..w[0])
                .map(|_| (0..w[1]).map(|_| if rng.random_bool(0.15) { f64::NEG_INFINITY } else { score(rng) }).collect())
                .collect()
        })
        .collect();
    MatchLattice { candidates, emission, transition }
}

fn best_exhaustive(lattice: &MatchLattice) -> f64 {
    let mut paths = vec![vec![]];
    for c in &lattice.candidates {
        paths = paths.into_iter().flat_map(|p: Vec<usize>| (0..c.len()).map(move |k| [p.clone(), vec![k]].concat())).collect();
    }
    paths.iter().map(|p| lattice.score(p)).fold(f64::NEG_INFINITY, f64::max)
}

fn segment_accuracy(net: &RoadNetwork, ds: &Dataset, truth: &[roadtraj::mapmatch::MatchedTrajectory]) -> (usize, usize) {
    let (mut ok, mut n) = (0, 0);
    for (t, m) in ds.trajectories.iter().zip(truth) {
        let got = hmm_match(net, t, &MatchParams::default()).unwrap();
        for (a, b) in got.points.iter().zip(&m.points) {
            ok += usize::from(a.segment == b.segment);
            n += 1;
        }
    }
    (ok, n)
}

fn matcher_oracle() -> Outcome {
    let net = synth_grid_network(6, 6, 500.0, 104.0, 30.6, 4).unwrap();
    let (ds, truth) = synth_trajectories(&net, &SynthConfig { n: 200, seed: 4, ..Default::default() }).unwrap();
    let (exact_ok, exact_n) = segment_accuracy(&net, &ds, &truth);

    let net = synth_grid_network(6, 6, 100.0, 104.0, 30.6, 5).unwrap();
    let cfg = SynthConfig { n: 500, seed: 5, noise_sigma_m: 10.0, ..Default::default() };
    let (ds, truth) = synth_trajectories(&net, &cfg).unwrap();
    let (noisy_ok, noisy_n) = segment_accuracy(&net, &ds, &truth);
    let accuracy = noisy_ok as f64 / noisy_n as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..3000 {
        let n = rng.random_range(1..=6);
        let lattice = random_lattice(&mut rng, n, 4);
        let best = best_exhaustive(&lattice);
        match lattice.viterbi() {
            Ok(path) => mismatches += usize::from(lattice.score(&path) != best),
            Err(_) => mismatches += usize::from(best != f64::NEG_INFINITY),
        }
    }
    (
        exact_ok == exact_n && accuracy >= 0.9 && mismatches == 0,
        format!(
            "zero noise {exact_ok}/{exact_n} exact; sigma 10 m accuracy {accuracy:.3}; Viterbi vs exhaustive: {mismatches} of 3000 differ"
        ),
    )
}

// ---- 6–10: shared pre-trained model ----

const TRAIN: usize = 2000;
const HELD_OUT: usize = 200;
const EPOCHS: usize = 30;

struct Trained {
    net: RoadNetwork,
    model: Model<f32>,
    train: Vec<Prepared>,
    test: Vec<Prepared>,
    seconds: f64,
}

fn pretrain_model() -> Trained {
    let start = Instant::now();
    let net = synth_grid_network(6, 6, 500.0, 104.0, 30.6, 1).unwrap();
    let (ds, matched) = synth_trajectories(&net, &SynthConfig { n: TRAIN + HELD_OUT, seed: 3, ..Default::default() }).unwrap();
    let cfg = ModelConfig { dim: 64, ..ModelConfig::new(net.num_segments()) };
    let mut model = Model::<f32>::new(cfg, Normalizer::for_dataset(&ds), 0).unwrap();
    let mut prepared = prepare(&net, DELTA, &ds, &matched).unwrap();
    let test = prepared.split_off(TRAIN);
    let pc = PretrainConfig { epochs: EPOCHS, seed: 1, batch_size: 64, ..Default::default() };
    let exec = Executor::new(1).unwrap();
    for e in 0..EPOCHS {
        let s = pretrain_epoch(&mut model, &prepared, ETA, &pc, e, &exec).unwrap();
        eprintln!("  pre-training epoch {e}: recon {:.4} contrastive {:.4}", s.recon_loss, s.cl_loss);
    }
    Trained { net, model, train: prepared, test, seconds: start.elapsed().as_secs_f64() }
}

fn sparse_points(ex: &Prepared, mu: f64) -> Vec<roadtraj::trajdata::GpsPoint> {
    resample_indices(ex.traj.points.len(), (mu / ETA) as usize).into_iter().map(|i| ex.traj.points[i]).collect()
}

fn recovery_zero_shot(t: &Trained) -> Outcome {
    let start = Instant::now();
    let mut results = Vec::new();
    for mu in [60.0, 120.0, 240.0] {
        let samples: Vec<_> = t
            .test
            .iter()
            .map(|ex| {
                let r = recover(&t.model, &t.net, &sparse_points(ex, mu), ETA, 64).unwrap();
                let er: BTreeSet<usize> = r.points.iter().map(|p| p.road.segment).collect();
                let eg: BTreeSet<usize> = ex.full.iter().filter_map(|x| x.road.value().map(|r| r.segment)).collect();
                (er, eg)
            })
            .collect();
        results.push(mean_precision_recall(&samples).unwrap());
    }
    let secs = t.seconds + start.elapsed().as_secs_f64();
    let p: Vec<f64> = results.iter().map(|r| r.precision).collect();
    (
        p[0] >= 0.95 && results[0].recall >= 0.90 && p[0] > p[1] && p[1] > p[2] && secs <= 1800.0,
        format!(
            "mu 60: P {:.3} R {:.3}; mu 120: P {:.3}; mu 240: P {:.3}; {secs:.0} s including pre-training",
            p[0], results[0].recall, p[1], p[2]
        ),
    )
}

fn search_zero_shot(t: &Trained) -> Outcome {
    let candidates: Vec<(u64, Vec<f64>)> = t
        .test
        .iter()
        .map(|ex| {
            let tuples = sparse_tuples(&t.net, DELTA, &sparse_points(ex, 60.0), ETA).unwrap();
            (ex.traj.id, t.model.embed_trajectory(&tuples).unwrap())
        })
        .collect();
    let mut ranks = Vec::new();
    for ex in &t.test {
        let q = t.model.embed_trajectory(&ex.full).unwrap();
        let order = rank_by_similarity(&q, &candidates).unwrap();
        ranks.push(order.iter().position(|&id| id == ex.traj.id).unwrap() + 1);
    }
    let mean_rank = ranks.iter().sum::<usize>() as f64 / ranks.len() as f64;
    let top1 = 100.0 * ranks.iter().filter(|&&r| r == 1).count() as f64 / ranks.len() as f64;
    (mean_rank <= 2.0 && top1 >= 90.0, format!("mean rank {mean_rank:.3}, top-1 {top1:.1}% over {} queries", ranks.len()))
}

fn pretraining_benefit(t: &Trained) -> Outcome {
    let spec = TaskSpec::new(TaskKind::Recover);
    let (train, valid) = (&t.train[..300], &t.test[..100]);
    let exec = Executor::new(1).unwrap();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let cfg = FinetuneConfig { epochs: 3, batch_size: 64, patience: usize::MAX, seed, ..Default::default() };
        let valid_after = |mut m: Model<f32>| {
            let h = finetune(&mut m, train, valid, &spec, &cfg, &exec).unwrap();
            h.last().and_then(|s| s.valid_recon_loss).unwrap()
        };
        let pre = valid_after(t.model.clone());
        let scratch = valid_after(Model::new(t.model.config, t.model.normalizer, 100 + seed).unwrap());
        wins += usize::from(pre < scratch);
        detail.push(format!("seed {seed}: {pre:.3} vs {scratch:.3}"));
    }
    (wins == 3, format!("pre-trained vs scratch validation loss after 3 epochs: {}", detail.join("; ")))
}

fn od_tte(t: &Trained) -> Outcome {
    let spec = TaskSpec::new(TaskKind::Tte);
    let exec = Executor::new(1).unwrap();
    let mut m = t.model.clone();
    let cfg = FinetuneConfig { epochs: 10, batch_size: 64, seed: 0, ..Default::default() };
    finetune(&mut m, &t.train, &t.test[..100], &spec, &cfg, &exec).unwrap();
    let report = evaluate(&m, &t.net, &t.test[100..], &spec, &exec).unwrap().report;
    let mape = report.get("mape_pct").unwrap();
    (mape <= 20.0, format!("MAPE {mape:.2}% (MAE {:.1} s) on {} held-out OD pairs", report.get("mae").unwrap(), report.samples))
}

fn checkpoint_determinism(t: &Trained) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let activation = |m: &Model<f32>| -> Vec<u8> {
        m.embed_trajectory(&t.test[0].full).unwrap().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
    };
    let stored = dir.path().join("activation.bin");
    std::fs::write(&stored, activation(&t.model)).unwrap();
    save_checkpoint(&t.model, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    let same_params = std::fs::read(a.join("params.bin")).unwrap() == std::fs::read(b.join("params.bin")).unwrap();
    let same_manifest = std::fs::read(a.join("manifest.json")).unwrap() == std::fs::read(b.join("manifest.json")).unwrap();
    let same_activation = activation(&loaded) == std::fs::read(&stored).unwrap();
    (
        same_params && same_manifest && same_activation,
        format!("parameters {same_params}, manifest {same_manifest}, stored activation reproduced {same_activation}"),
    )
}

fn run(n: usize, failed: &mut Vec<usize>, f: impl FnOnce() -> Outcome) {
    let (ok, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        (false, format!("panicked: {}", msg.unwrap_or_default()))
    });
    if !ok {
        failed.push(n);
    }
    println!("criterion {n}: {} — {detail}", if ok { "PASS" } else { "FAIL" });
}

fn main() {
    let mut failed = Vec::new();
    run(1, &mut failed, gradient_fidelity);
    run(2, &mut failed, formula_oracles);
    run(3, &mut failed, mask_integrity);
    run(4, &mut failed, tokenizer_oracle);
    run(5, &mut failed, matcher_oracle);
    match catch_unwind(pretrain_model) {
        Ok(t) => {
            run(6, &mut failed, || recovery_zero_shot(&t));
            run(7, &mut failed, || search_zero_shot(&t));
            run(8, &mut failed, || pretraining_benefit(&t));
            run(9, &mut failed, || od_tte(&t));
            run(10, &mut failed, || checkpoint_determinism(&t));
        }
        Err(_) => {
            for n in 6..=10 {
                failed.push(n);
                println!("criterion {n}: FAIL — pre-training panicked");
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
