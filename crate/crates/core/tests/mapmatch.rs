use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadtraj::mapmatch::{hmm_match, read_matched_csv, write_matched_csv, Candidate, MatchLattice, MatchParams};
use roadtraj::geo::LngLat;
use roadtraj::roadnet::{synth_grid_network, RoadPos};
use roadtraj::trajdata::{synth_trajectories, SynthConfig};

fn random_lattice(rng: &mut ChaCha8Rng, points: usize, max_cands: usize) -> MatchLattice {
    let sizes: Vec<usize> = (0..points).map(|_| rng.random_range(1..=max_cands)).collect();
    let candidates = sizes
        .iter()
        .map(|&k| (0..k).map(|i| Candidate { pos: RoadPos::new(i, 0.5), offset_m: 0.0 }).collect())
        .collect();
    // Coarse values make exact ties common.
    let score = |rng: &mut ChaCha8Rng| (rng.random_range(-4..=0) as f64) * 0.5;
    let emission = sizes.iter().map(|&k| (0..k).map(|_| score(rng)).collect()).collect();
    let transition = sizes
        .windows(2)
        .map(|w| {
            (0..w[0])
                .map(|_| {
                    (0..w[1])
                        .map(|_| if rng.random_bool(0.15) { f64::NEG_INFINITY } else { score(rng) })
                        .collect()
                })
                .collect()
        })
        .collect();
    MatchLattice { candidates, emission, transition }
}

fn all_paths(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &k in sizes {
        out = out.into_iter().flat_map(|p| (0..k).map(move |c| [p.clone(), vec![c]].concat())).collect();
    }
    out
}

#[test]
fn viterbi_equals_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for _ in 0..3000 {
        let n = rng.random_range(2..=6);
        let lattice = random_lattice(&mut rng, n, 4);
        let sizes: Vec<usize> = lattice.candidates.iter().map(Vec::len).collect();
        // Lexicographic enumeration keeps the first maximum; that is not the
        // decoder's tie rule, so compare scores and check the path is optimal.
        let best = all_paths(&sizes).into_iter().map(|p| lattice.score(&p)).fold(f64::NEG_INFINITY, f64::max);
        match lattice.viterbi() {
            Ok(path) => {
                assert_eq!(lattice.score(&path), best);
                checked += 1;
            }
            Err(_) => assert_eq!(best, f64::NEG_INFINITY),
        }
    }
    assert!(checked > 1000);
}

#[test]
fn zero_noise_trajectories_are_recovered_exactly() {
    let net = synth_grid_network(6, 6, 100.0, 104.0, 30.6, 4).unwrap();
    let (ds, truth) = synth_trajectories(&net, &SynthConfig { n: 100, seed: 9, ..Default::default() }).unwrap();
    for (t, m) in ds.trajectories.iter().zip(&truth) {
        let got = hmm_match(&net, t, &MatchParams::default()).unwrap();
        for (a, b) in got.points.iter().zip(&m.points) {
            assert_eq!(a.segment, b.segment, "trajectory {}", t.id);
            assert!((a.fraction - b.fraction).abs() < 1e-6);
        }
    }
}

/// Moves the first fix a few meters behind its origin node, onto the
/// extension of a segment arriving there.
#[test]
fn departure_just_behind_the_origin_node_keeps_the_first_segment() {
    let net = synth_grid_network(6, 6, 100.0, 104.0, 30.6, 4).unwrap();
    let (ds, truth) = synth_trajectories(&net, &SynthConfig { n: 60, seed: 9, ..Default::default() }).unwrap();
    let mut checked = 0;
    for (t, m) in ds.trajectories.iter().zip(&truth) {
        let first = m.points[0].segment;
        let seg = &net.segments()[first];
        // Only origins with a straight-through arrival behind them.
        let (a, b) = (net.locate(first, 0.0).unwrap(), net.locate(first, 0.05).unwrap());
        let behind = LngLat::new(a.lng - (b.lng - a.lng), a.lat - (b.lat - a.lat));
        if net.neighbors_within(behind, 1.0).is_empty() || seg.length_m * 0.05 > 10.0 {
            continue;
        }
        let mut moved = t.clone();
        moved.points[0].pos = behind;
        let got = hmm_match(&net, &moved, &MatchParams::default()).unwrap();
        assert_eq!(got.points[0].segment, first, "trajectory {}", t.id);
        assert_eq!(got.points[0].fraction, 0.0);
        let plain = hmm_match(&net, &moved, &MatchParams { departure_snap_m: 0.0, ..Default::default() }).unwrap();
        assert_ne!(plain.points[0].segment, first);
        checked += 1;
    }
    assert!(checked > 5, "{checked}");
}

#[test]
fn matched_csv_round_trips() {
    let net = synth_grid_network(3, 3, 500.0, 104.0, 30.6, 4).unwrap();
    let (_, truth) = synth_trajectories(&net, &SynthConfig { n: 5, seed: 1, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("matched.csv");
    write_matched_csv(&truth, &p).unwrap();
    assert_eq!(read_matched_csv(&p).unwrap(), truth);
}
