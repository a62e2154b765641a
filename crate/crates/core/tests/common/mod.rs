#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roadtraj::mapmatch::MatchedTrajectory;
use roadtraj::model::{Model, ModelConfig, Normalizer};
use roadtraj::pretrain::{prepare, Prepared};
use roadtraj::roadnet::{synth_grid_network, RoadNetwork};
use roadtraj::tokenizer::{build_pretrain_plan, SequencePlan};
use roadtraj::trajdata::{resample, synth_trajectories, Dataset, SynthConfig, Trajectory};

pub const ETA: f64 = 15.0;
pub const DELTA: f64 = 100.0;

pub struct World {
    pub net: RoadNetwork,
    pub data: Dataset,
    pub matched: Vec<MatchedTrajectory>,
    pub prepared: Vec<Prepared>,
}

/// 6×6 grid, 500 m blocks, 8–12 m/s, noise-free 15 s sampling.
pub fn world(n: usize, seed: u64) -> World {
    let net = synth_grid_network(6, 6, 500.0, 104.0, 30.6, seed).unwrap();
    let (data, matched) = synth_trajectories(&net, &SynthConfig { n, seed, ..Default::default() }).unwrap();
    let prepared = prepare(&net, DELTA, &data, &matched).unwrap();
    World { net, data, matched, prepared }
}

pub fn model_config(net: &RoadNetwork, dim: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig { dim, heads, layers, num_segments: net.num_segments(), delta_m: DELTA, ffn_mult: 4 }
}

pub fn model<T: roadtraj_nn::Real>(w: &World, dim: usize, heads: usize, layers: usize, seed: u64) -> Model<T> {
    Model::new(model_config(&w.net, dim, heads, layers), Normalizer::for_dataset(&w.data), seed).unwrap()
}

/// Three dense points; the ends are kept and the middle one is masked.
pub fn three_point_plan(ex: &Prepared) -> SequencePlan {
    let traj = Trajectory { id: ex.traj.id, points: ex.traj.points[..3].to_vec() };
    let sparse = resample(&traj, ETA, 2.0 * ETA).unwrap();
    let mut plan = build_pretrain_plan(&ex.full[..3], &sparse, traj.departure(), true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    plan.with_cls = true;
    plan
}
