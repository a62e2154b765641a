mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadtraj::checkpoint::{load_checkpoint, save_checkpoint};
use roadtraj::pretrain::{
    batch_gradients, contrastive, info_nce, make_pretrain_example, pretrain,
    BatchItem, Executor, PretrainConfig,
};
use roadtraj::tokenizer::{assign_positions, Token};
use roadtraj_nn::Graph;

use common::*;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn brute_info_nce(dense: &[Vec<f64>], sparse: &[Vec<f64>], tau: f64) -> Vec<f64> {
    (0..dense.len())
        .map(|i| {
            let num = (cos(&dense[i], &sparse[i]) / tau).exp();
            let den: f64 = sparse.iter().map(|s| (cos(&dense[i], s) / tau).exp()).sum();
            -(num / den).ln()
        })
        .collect()
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn info_nce_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let b = rng.random_range(1..=4);
        let d = rng.random_range(2..=16);
        let (x, y) = (random_batch(&mut rng, b, d), random_batch(&mut rng, b, d));
        let got = info_nce(&x, &y, 0.1).unwrap();
        for (g, e) in got.iter().zip(brute_info_nce(&x, &y, 0.1)) {
            assert!((g - e).abs() <= 1e-6, "{g} vs {e}");
            assert!(*g >= 0.0);
        }
    }
}

#[test]
fn info_nce_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, y) = (random_batch(&mut rng, 3, 8), random_batch(&mut rng, 3, 8));
    let mut y2 = y.clone();
    y2[1].iter_mut().for_each(|v| *v *= 7.5);
    let (a, b) = (info_nce(&x, &y, 0.1).unwrap(), info_nce(&x, &y2, 0.1).unwrap());
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() < 1e-9);
    }
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = (random_batch(&mut rng, 4, 6), random_batch(&mut rng, 4, 6));
    let c = contrastive(&x, &y, 0.1).unwrap();
    let total = |x: &[Vec<f64>], y: &[Vec<f64>]| info_nce(x, y, 0.1).unwrap().iter().sum::<f64>();
    let h = 1e-6;
    for i in 0..4 {
        for j in 0..6 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i][j] += h;
            xm[i][j] -= h;
            let num = (total(&xp, &y) - total(&xm, &y)) / (2.0 * h);
            assert!((num - c.grad_dense.get(i, j)).abs() < 1e-5);
            let (mut yp, mut ym) = (y.clone(), y.clone());
            yp[i][j] += h;
            ym[i][j] -= h;
            let num = (total(&x, &yp) - total(&x, &ym)) / (2.0 * h);
            assert!((num - c.grad_sparse.get(i, j)).abs() < 1e-5);
        }
    }
}

#[test]
fn seventeen_points_at_four_times_the_interval_alternate_masks() {
    let w = world(200, 2);
    let ex = w.prepared.iter().find(|p| p.full.len() == 17).expect("a 17-point trajectory");
    let cfg = PretrainConfig { mu_choices_s: vec![60.0], phi: 0.0, ..Default::default() };
    let plan = make_pretrain_example(ex, ETA, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let masks: Vec<bool> = plan.inputs.iter().map(|t| t.special_kind() == Some(Token::Mask)).collect();
    assert_eq!(masks, [false, true, false, true, false, true, false, true, false]);
    for t in plan.inputs.iter().filter(|t| t.special_kind().is_none()) {
        assert!(t.spatial.value().is_some() && t.temporal.value().is_some());
        assert_eq!(t.road.token(), Some(Token::Mask));
    }
}

#[test]
fn dense_sampling_without_removal_has_no_gap_blocks() {
    let w = world(20, 2);
    let cfg = PretrainConfig { mu_choices_s: vec![ETA], phi: 0.0, ..Default::default() };
    for ex in &w.prepared {
        let plan = make_pretrain_example(ex, ETA, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(plan.blocks.iter().all(|b| b.targets.len() == 2));
        assert_eq!(plan.inputs.len(), ex.full.len());
    }
}

#[test]
fn batch_loss_without_contrast_is_mean_tuple_loss() {
    let w = world(6, 8);
    let m = model::<f32>(&w, 16, 2, 1, 1);
    let cfg = PretrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let items: Vec<BatchItem> = w
        .prepared
        .iter()
        .map(|ex| BatchItem { seq: assign_positions(&make_pretrain_example(ex, ETA, &cfg, &mut rng).unwrap()).unwrap(), dense: None })
        .collect();
    let (_, stats) = batch_gradients(&m, &items, None, &Executor::new(1).unwrap()).unwrap();
    let mut expect = 0.0;
    for it in &items {
        let mut g = Graph::new(&m.params);
        let tf = m.teacher_forced(&mut g, &it.seq).unwrap();
        expect += g.value(tf.loss_sum).item() as f64 / tf.count as f64;
    }
    // Per-example means are formed in f32.
    assert!((stats.recon_sum - expect).abs() <= 1e-6 * expect.abs(), "{} vs {expect}", stats.recon_sum);
    assert_eq!(stats.cl_sum, 0.0);
}

fn short_run(workers: usize) -> Vec<(f64, f64)> {
    let w = world(24, 5);
    let mut m = model::<f32>(&w, 16, 2, 1, 1);
    let cfg = PretrainConfig { epochs: 3, batch_size: 8, seed: 11, ..Default::default() };
    let exec = Executor::new(workers).unwrap();
    pretrain(&mut m, &w.prepared, &[], ETA, &cfg, &exec, None)
        .unwrap()
        .iter()
        .map(|s| (s.recon_loss, s.cl_loss))
        .collect()
}

#[test]
fn training_is_deterministic_across_runs_and_workers() {
    let a = short_run(1);
    assert_eq!(a, short_run(1));
    assert_eq!(a, short_run(2));
}

#[test]
fn loaded_checkpoint_reproduces_forward_output() {
    let w = world(4, 9);
    let m = model::<f32>(&w, 16, 2, 2, 4);
    let seq = assign_positions(&three_point_plan(&w.prepared[0])).unwrap();
    let forward = |m: &roadtraj::model::Model<f32>| {
        let mut g = Graph::new(&m.params);
        let v = m.encode(&mut g, &seq).unwrap();
        g.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, dir.path()).unwrap();
    assert_eq!(forward(&load_checkpoint(dir.path()).unwrap()), forward(&m));
}
