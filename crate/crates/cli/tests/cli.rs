use std::path::Path;
use std::process::{Command, Output};

fn roadtraj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadtraj"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = roadtraj(&["synth", "--rows", "6", "--cols", "6", "--n", "500", "--seed", "7", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trajectories.csv", "matched_truth.csv", "network/nodes.csv", "network/edges.csv", "test_ids.txt"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty() && x == y, "{f} differs");
    }
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 7);
    assert_eq!(run["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_without_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = roadtraj(&["eval", "--task", "tte", "--checkpoint", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nowhere"), "{err}");
    assert!(err.contains("cli:"), "{err}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = roadtraj(&["synth", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = roadtraj(&["eval", "--task", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_a_fresh_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = roadtraj(&["gradcheck", "--out", p(dir.path())]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout.contains("max relative error"));
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let ok = |o: Output| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    ok(roadtraj(&["synth", "--rows", "4", "--cols", "4", "--n", "60", "--out", p(&d("synth"))]));
    let net = d("synth/network");
    let data = d("synth/trajectories.csv");
    ok(roadtraj(&["match", "--network", p(&net), "--data", p(&data), "--out", p(&d("match"))]));
    let matched = d("match/matched.csv");
    let common = ["--network", p(&net), "--data", p(&data), "--matched", p(&matched)];
    let pre = d("pre");
    let mut args = vec!["pretrain", "--epochs", "1", "--dim", "16", "--batch-size", "16", "--out", p(&pre)];
    args.extend(common);
    ok(roadtraj(&args));
    assert!(d("pre/checkpoint/params.bin").exists());
    let log = std::fs::read_to_string(d("pre/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,recon_loss,cl_loss,wall_seconds"));

    let ckpt = d("pre/checkpoint");
    let ft = d("ft");
    let mut args = vec!["finetune", "--task", "tte", "--epochs", "1", "--checkpoint", p(&ckpt), "--out", p(&ft)];
    args.extend(common);
    ok(roadtraj(&args));
    for (task, keys) in [
        ("tte", &["mae", "rmse", "mape_pct"][..]),
        ("recover", &["precision", "recall", "mae_coor_m", "mae_road_m", "mae_time_s"][..]),
        ("predict", &["mae_coor_m", "mae_road_m", "mae_time_s"][..]),
        ("search", &["mean_rank", "top1_acc_pct"][..]),
    ] {
        let out = d(&format!("eval-{task}"));
        let mut args = vec!["eval", "--task", task, "--checkpoint", p(&ckpt), "--out", p(&out)];
        args.extend(common);
        ok(roadtraj(&args));
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
        for k in keys {
            assert!(m["metrics"][k].is_number(), "{task}: {k} missing");
        }
        assert!(out.join("results.csv").exists());
    }
    let emb = d("emb");
    let mut args = vec!["embed", "--checkpoint", p(&ckpt), "--out", p(&emb)];
    args.extend(common);
    ok(roadtraj(&args));
    let search = d("search");
    let mut args = vec!["search", "--checkpoint", p(&ckpt), "--top", "3", "--out", p(&search)];
    args.extend(common);
    ok(roadtraj(&args));
}
