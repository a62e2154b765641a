use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roadtraj::roadnet::synth_grid_network;
use roadtraj::tokenizer::{
    assign_positions, build_pretrain_plan, dense_points, detokenize, tokenize_dense, Token,
};
use roadtraj::trajdata::{drop_features, resample, resample_indices, synth_trajectories, SynthConfig};

fn brute_indices(len: usize, step: usize) -> Vec<usize> {
    (0..len).filter(|&i| i % step == 0 || i + 1 == len).collect()
}

#[test]
fn index_pattern_matches_enumeration() {
    for len in 1..80 {
        for step in 1..12 {
            assert_eq!(resample_indices(len, step), brute_indices(len, step), "len {len} step {step}");
        }
    }
}

#[test]
fn plans_detokenize_to_the_dense_trajectory() {
    let net = synth_grid_network(4, 4, 300.0, 104.0, 30.6, 2).unwrap();
    let (ds, matched) = synth_trajectories(&net, &SynthConfig { n: 60, seed: 5, ..Default::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (t, m) in ds.trajectories.iter().zip(&matched) {
        let dense = dense_points(t, m).unwrap();
        let full = tokenize_dense(&net, 100.0, &dense).unwrap();
        for mu in [15.0, 60.0, 120.0, 240.0] {
            let sparse = drop_features(&resample(t, 15.0, mu).unwrap(), 0.3, &mut rng).unwrap();
            let plan = build_pretrain_plan(&full, &sparse, t.departure(), true, &mut rng).unwrap();
            assert_eq!(detokenize(&plan).unwrap(), dense);
            let seq = assign_positions(&plan).unwrap();
            // one start item per block, one target per block item plus its end
            assert_eq!(seq.stream_len(), seq.targets.len());
            assert_eq!(seq.targets.iter().filter(|t| t.is_end()).count(), plan.blocks.len());
            if mu == 15.0 {
                assert!(plan.inputs.iter().all(|i| i.special_kind() != Some(Token::Mask)));
            }
        }
    }
}

#[test]
fn plan_construction_is_seed_deterministic() {
    let net = synth_grid_network(4, 4, 300.0, 104.0, 30.6, 2).unwrap();
    let (ds, matched) = synth_trajectories(&net, &SynthConfig { n: 3, seed: 5, ..Default::default() }).unwrap();
    let t = &ds.trajectories[0];
    let full = tokenize_dense(&net, 100.0, &dense_points(t, &matched[0]).unwrap()).unwrap();
    let make = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sparse = drop_features(&resample(t, 15.0, 60.0).unwrap(), 0.2, &mut rng).unwrap();
        build_pretrain_plan(&full, &sparse, t.departure(), true, &mut rng).unwrap()
    };
    assert_eq!(make(4), make(4));
}
