use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roadtraj::model::{Model, ModelConfig, Normalizer};
use roadtraj::pretrain::prepare;
use roadtraj::roadnet::synth_grid_network;
use roadtraj::tokenizer::{assign_positions, build_pretrain_plan};
use roadtraj::trajdata::{resample, synth_trajectories, SynthConfig, Trajectory};
use roadtraj_nn::{grad_check, GradCheckConfig, GradCheckReport, Graph, Var};

use crate::config::GradcheckArgs;

/// Full-model check in 64-bit on a three-point plan: both ends observed,
/// the middle point generated from a mask.
pub fn check(a: &GradcheckArgs, seed: u64) -> roadtraj::Result<GradCheckReport> {
    let net = synth_grid_network(4, 4, 300.0, 104.0, 30.6, seed)?;
    let (data, matched) = synth_trajectories(&net, &SynthConfig { n: 1, seed, ..SynthConfig::default() })?;
    let ex = prepare(&net, 100.0, &data, &matched)?.remove(0);
    let traj = Trajectory { id: ex.traj.id, points: ex.traj.points[..3].to_vec() };
    let sparse = resample(&traj, data.interval_s, 2.0 * data.interval_s)?;
    let mut plan = build_pretrain_plan(&ex.full[..3], &sparse, traj.departure(), true, &mut ChaCha8Rng::seed_from_u64(seed))?;
    plan.with_cls = true;
    let seq = assign_positions(&plan)?;
    let cfg = ModelConfig { dim: a.dim, heads: a.heads, layers: a.layers, num_segments: net.num_segments(), delta_m: 100.0, ffn_mult: 4 };
    let model = Model::<f64>::new(cfg, Normalizer::for_dataset(&data), seed)?;
    grad_check(
        &model.params,
        |g: &mut Graph<'_, f64>| -> roadtraj::Result<Var> { Ok(model.teacher_forced(g, &seq)?.loss_sum) },
        &GradCheckConfig { step: 1e-5, max_coords: 600, seed },
    )
}
