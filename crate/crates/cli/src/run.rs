use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use roadtraj::checkpoint::{load_checkpoint, save_checkpoint};
use roadtraj::mapmatch::{hmm_match, read_matched_csv, write_matched_csv, MatchedTrajectory};
use roadtraj::model::{Model, ModelConfig, Normalizer};
use roadtraj::pretrain::{pretrain, prepare, Executor, Prepared};
use roadtraj::roadnet::{read_network_dir, synth_grid_network, write_network, RoadNetwork};
use roadtraj::tasks::{evaluate, finetune, rank_by_similarity, sparse_tuples, TaskKind};
use roadtraj::trajdata::{
    chronological_split, ingest_csv, resample_indices, synth_trajectories, write_csv, write_split_manifests, Dataset,
    Split, SynthConfig, Trajectory,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Cli, Command, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cli: missing input {0}: {1}")]
    Missing(PathBuf, String),
    #[error("cli: no {0} given (flag or config)")]
    Unset(&'static str),
    #[error("cli: config {0}")]
    Config(String),
    #[error("cli: cannot write {0}: {1}")]
    Write(PathBuf, String),
    #[error("{0}")]
    Core(#[from] roadtraj::Error),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: Vec<String>,
    config_sha256: String,
    seed: u64,
    workers: usize,
    versions: Versions,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct Versions {
    roadtraj: &'static str,
    checkpoint_format: u32,
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Write(path.to_path_buf(), e.to_string())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_vec_pretty(value).map_err(|e| write_err(path, e))?;
    std::fs::write(path, text).map_err(|e| write_err(path, e))
}

fn write_run_record(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let canonical = serde_json::to_vec(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let record = RunRecord {
        command,
        argv: std::env::args().collect(),
        config_sha256: hex::encode(Sha256::digest(&canonical)),
        seed: cfg.seed,
        workers: cfg.workers,
        versions: Versions { roadtraj: env!("CARGO_PKG_VERSION"), checkpoint_format: 1 },
        config: cfg,
    };
    write_json(&out.join("run.json"), &record)
}

fn require(slot: &Option<PathBuf>, what: &'static str) -> Result<PathBuf> {
    let p = slot.clone().ok_or(CliError::Unset(what))?;
    if !p.exists() {
        return Err(CliError::Missing(p, "no such file or directory".into()));
    }
    Ok(p)
}

struct Inputs {
    net: RoadNetwork,
    data: Dataset,
    split: Split,
}

impl Inputs {
    fn prepared(&self, cfg: &RunConfig, part: &Dataset, matched: &[MatchedTrajectory]) -> Result<Vec<Prepared>> {
        Ok(prepare(&self.net, cfg.model.delta_m, part, matched)?)
    }
}

/// Network, trajectories restricted to those with a match, their split, and
/// the matched points.
fn load_inputs(cfg: &RunConfig) -> Result<(Inputs, Vec<MatchedTrajectory>)> {
    let (net_dir, data_csv, matched_csv) =
        (require(&cfg.network, "network")?, require(&cfg.data, "data")?, require(&cfg.matched, "matched")?);
    let net = read_network_dir(&net_dir)?;
    let (data, report) = ingest_csv(&data_csv)?;
    if report.dropped_short + report.rejected_gap > 0 {
        log::warn!("dropped {} short and {} irregular trajectories", report.dropped_short, report.rejected_gap);
    }
    let matched = read_matched_csv(&matched_csv)?;
    let ids: HashSet<u64> = matched.iter().map(|m| m.traj_id).collect();
    let kept: Vec<Trajectory> = data.trajectories.iter().filter(|t| ids.contains(&t.id)).cloned().collect();
    let data = data.subset(kept);
    let split = chronological_split(&data);
    Ok((Inputs { net, data, split }, matched))
}

fn checkpoint_path(flag: &Option<PathBuf>, cfg: &mut RunConfig) -> Result<PathBuf> {
    if flag.is_some() {
        cfg.checkpoint = flag.clone();
    }
    let p = cfg.checkpoint.clone().ok_or(CliError::Unset("checkpoint"))?;
    if !p.join("manifest.json").exists() {
        return Err(CliError::Missing(p.join("manifest.json"), "checkpoint not found".into()));
    }
    Ok(p)
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| write_err(path, e))?;
    w.write_record(header).map_err(|e| write_err(path, e))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_globals(&cli);
    let out = cli.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| write_err(&out, e))?;
    let exec = Executor::new(cfg.workers)?;
    match &cli.command {
        Command::Synth(a) => {
            cfg.apply_synth(a);
            write_run_record(&out, "synth", &cfg)?;
            let s = &cfg.synth;
            let net = synth_grid_network(s.rows, s.cols, s.spacing_m, s.origin_lng, s.origin_lat, cfg.seed)?;
            let synth = SynthConfig {
                n: s.n,
                min_speed_mps: s.min_speed_mps,
                max_speed_mps: s.max_speed_mps,
                interval_s: s.interval_s,
                noise_sigma_m: s.noise_sigma_m,
                seed: cfg.seed,
                ..SynthConfig::default()
            };
            let (data, truth) = synth_trajectories(&net, &synth)?;
            write_network(&net, &out.join("network"))?;
            write_csv(&data, &out.join("trajectories.csv"))?;
            write_matched_csv(&truth, &out.join("matched_truth.csv"))?;
            write_split_manifests(&chronological_split(&data), &out)?;
            println!("wrote {} trajectories on {} segments to {}", data.len(), net.num_segments(), out.display());
        }
        Command::Match(a) => {
            cfg.apply_data(a);
            write_run_record(&out, "match", &cfg)?;
            let net = read_network_dir(&require(&cfg.network, "network")?)?;
            let (data, _) = ingest_csv(&require(&cfg.data, "data")?)?;
            let results = exec.map(data.len(), |i| hmm_match(&net, &data.trajectories[i], &cfg.matching));
            let mut matched = Vec::new();
            let mut failed = Vec::new();
            for (t, r) in data.trajectories.iter().zip(results) {
                match r {
                    Ok(m) => matched.push(m),
                    Err(e) => {
                        log::warn!("trajectory {}: {e}", t.id);
                        failed.push(t.id);
                    }
                }
            }
            write_matched_csv(&matched, &out.join("matched.csv"))?;
            write_json(&out.join("match_report.json"), &serde_json::json!({ "matched": matched.len(), "failed": failed }))?;
            println!("matched {} of {} trajectories", matched.len(), data.len());
        }
        Command::Pretrain(a) => {
            cfg.apply_train(a);
            write_run_record(&out, "pretrain", &cfg)?;
            let (inputs, matched) = load_inputs(&cfg)?;
            let train = inputs.prepared(&cfg, &inputs.split.train, &matched)?;
            let valid = inputs.prepared(&cfg, &inputs.split.valid, &matched)?;
            let m = &cfg.model;
            let mc = ModelConfig {
                dim: m.dim,
                heads: m.heads,
                layers: m.layers,
                num_segments: inputs.net.num_segments(),
                delta_m: m.delta_m,
                ffn_mult: m.ffn_mult,
            };
            let mut model = Model::<f32>::new(mc, Normalizer::for_dataset(&inputs.data), cfg.seed)?;
            let history = pretrain(
                &mut model,
                &train,
                &valid,
                inputs.data.interval_s,
                &cfg.pretrain,
                &exec,
                Some(&out.join("train_log.csv")),
            )?;
            save_checkpoint(&model, &out.join("checkpoint"))?;
            write_json(&out.join("history.json"), &history)?;
            println!("pre-trained {} epochs; checkpoint at {}", history.len(), out.join("checkpoint").display());
        }
        Command::Finetune(a) => {
            cfg.apply_matched(&a.inputs);
            cfg.task.kind = a.task.into();
            if let Some(e) = a.epochs {
                cfg.finetune.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.finetune.lr = lr;
            }
            let ckpt = checkpoint_path(&a.checkpoint, &mut cfg)?;
            write_run_record(&out, "finetune", &cfg)?;
            let (inputs, matched) = load_inputs(&cfg)?;
            cfg.task.validate(inputs.data.interval_s)?;
            let mut model = load_checkpoint(&ckpt)?;
            let train = inputs.prepared(&cfg, &inputs.split.train, &matched)?;
            let valid = inputs.prepared(&cfg, &inputs.split.valid, &matched)?;
            let history = finetune(&mut model, &train, &valid, &cfg.task, &cfg.finetune, &exec)?;
            save_checkpoint(&model, &out.join("checkpoint"))?;
            write_json(&out.join("history.json"), &history)?;
            println!("fine-tuned {} epochs for {}", history.len(), cfg.task.kind.name());
        }
        Command::Eval(a) => {
            cfg.apply_matched(&a.inputs);
            cfg.task.kind = a.task.into();
            if let Some(mu) = a.mu {
                cfg.task.input_interval_s = mu;
            }
            let ckpt = checkpoint_path(&a.checkpoint, &mut cfg)?;
            write_run_record(&out, "eval", &cfg)?;
            let (inputs, matched) = load_inputs(&cfg)?;
            cfg.task.validate(inputs.data.interval_s)?;
            let model = load_checkpoint(&ckpt)?;
            let test = inputs.prepared(&cfg, &inputs.split.test, &matched)?;
            let ev = evaluate(&model, &inputs.net, &test, &cfg.task, &exec)?;
            ev.report.validate()?;
            write_rows(&out.join("results.csv"), &ev.columns, &ev.rows)?;
            write_json(&out.join("metrics.json"), &ev.report)?;
            println!("{}", serde_json::to_string(&ev.report.metrics).unwrap_or_default());
        }
        Command::Search(a) => {
            cfg.apply_matched(&a.inputs);
            cfg.task.kind = TaskKind::Search;
            if let Some(mu) = a.mu {
                cfg.task.input_interval_s = mu;
            }
            let ckpt = checkpoint_path(&a.checkpoint, &mut cfg)?;
            write_run_record(&out, "search", &cfg)?;
            let (inputs, matched) = load_inputs(&cfg)?;
            cfg.task.validate(inputs.data.interval_s)?;
            let model = load_checkpoint(&ckpt)?;
            let test = inputs.prepared(&cfg, &inputs.split.test, &matched)?;
            let step = roadtraj::trajdata::interval_ratio(cfg.task.target_interval_s, cfg.task.input_interval_s)?;
            let delta = model.config.delta_m;
            let candidates = exec
                .map(test.len(), |i| -> roadtraj::Result<(u64, Vec<f64>)> {
                    let pts: Vec<_> = resample_indices(test[i].traj.points.len(), step)
                        .into_iter()
                        .map(|k| test[i].traj.points[k])
                        .collect();
                    let tuples = sparse_tuples(&inputs.net, delta, &pts, cfg.task.target_interval_s)?;
                    Ok((test[i].traj.id, model.embed_trajectory(&tuples)?))
                })
                .into_iter()
                .collect::<roadtraj::Result<Vec<_>>>()?;
            let queries: Vec<&Prepared> = if a.queries.is_empty() {
                test.iter().collect()
            } else {
                a.queries
                    .iter()
                    .map(|q| {
                        test.iter()
                            .find(|p| p.traj.id == *q)
                            .ok_or_else(|| CliError::Config(format!("query {q} is not in the test split")))
                    })
                    .collect::<Result<_>>()?
            };
            let path = out.join("search.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| write_err(&path, e))?;
            w.write_record(["query_id", "rank", "candidate_id"]).map_err(|e| write_err(&path, e))?;
            for q in queries {
                let ranking = rank_by_similarity(&model.embed_trajectory(&q.full)?, &candidates)?;
                for (r, id) in ranking.iter().take(a.top).enumerate() {
                    w.write_record([q.traj.id.to_string(), (r + 1).to_string(), id.to_string()])
                        .map_err(|e| write_err(&path, e))?;
                }
            }
            w.flush().map_err(|e| write_err(&path, e))?;
            println!("rankings written to {}", path.display());
        }
        Command::Embed(a) => {
            cfg.apply_matched(&a.inputs);
            let ckpt = checkpoint_path(&a.checkpoint, &mut cfg)?;
            write_run_record(&out, "embed", &cfg)?;
            let (inputs, matched) = load_inputs(&cfg)?;
            let model = load_checkpoint(&ckpt)?;
            let all = inputs.prepared(&cfg, &inputs.data, &matched)?;
            let emb = exec.map(all.len(), |i| model.embed_trajectory(&all[i].full));
            let path = out.join("embeddings.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| write_err(&path, e))?);
            for (p, e) in all.iter().zip(emb) {
                let e = e?;
                let row: Vec<String> = std::iter::once(p.traj.id.to_string()).chain(e.iter().map(|v| v.to_string())).collect();
                writeln!(f, "{}", row.join(",")).map_err(|e| write_err(&path, e))?;
            }
            f.flush().map_err(|e| write_err(&path, e))?;
            println!("{} embeddings written to {}", all.len(), path.display());
        }
        Command::Gradcheck(a) => {
            write_run_record(&out, "gradcheck", &cfg)?;
            let report = crate::gradcheck::check(a, cfg.seed)?;
            println!("max relative error: {:.3e} over {} coordinates", report.max_rel_error, report.coords.len());
            write_json(&out.join("gradcheck.json"), &serde_json::json!({
                "max_rel_error": report.max_rel_error,
                "coords": report.coords.len(),
                "tolerance": a.tolerance,
            }))?;
            if !(report.max_rel_error <= a.tolerance) {
                if let Some(w) = report.worst() {
                    eprintln!("worst: {} [{}] analytic {} numeric {}", w.param, w.index, w.analytic, w.numeric);
                }
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
