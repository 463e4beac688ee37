use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use quadlab::env::{Controller, Env, ExpertController, PolicyController};
use quadlab::eval::{evaluate, finite_mean};
use quadlab::imitation::{self, Dagger};
use quadlab::metrics::{format_table, heading_velocity, knee_joint, read_reports, EvalReport, SolveTimeStats};
use quadlab::mpc::{MpcExpert, DIAGNOSTICS_HEADER};
use quadlab::policy::{
    gradient_gate, load_checkpoint, save_checkpoint, Checkpoint, GaussianPolicy, Workspace, ACTOR_OBS_DIM,
};
use quadlab::rl::{self, Ppo};
use quadlab::sim::NUM_JOINTS;
use quadlab::trajectory::{self, TrajectoryRow};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{LabConfig, Preset};
use crate::manifest::{code_version, RunDir, RunManifest, Timings, MANIFEST_VERSION};
use crate::CliError;

pub const POLICY_FILE: &str = "policy.lfnn";
pub const GRADIENT_GATE_INSTANCES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    ExpertRollout,
    Imitate,
    Finetune,
    Evaluate,
    Bench,
    ExportPlots,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ExpertRollout => "expert-rollout",
            Stage::Imitate => "imitate",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Bench => "bench",
            Stage::ExportPlots => "export-plots",
        }
    }
}

/// What a stage produced, relative to its run directory.
#[derive(Debug, Default)]
struct Produced {
    inputs: Vec<PathBuf>,
    checkpoints: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

/// Run one stage into the fresh directory `out` and write its manifest.
pub fn run_stage(stage: Stage, cfg: &LabConfig, out: &Path) -> Result<RunManifest, CliError> {
    let dir = RunDir::create(out)?;
    let result = execute(stage, cfg, &dir);
    if result.is_err() {
        // A failed stage leaves no half-written run behind.
        let _ = std::fs::remove_dir_all(&dir.root);
    }
    result
}

fn execute(stage: Stage, cfg: &LabConfig, dir: &RunDir) -> Result<RunManifest, CliError> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let clock = Instant::now();
    let produced = match stage {
        Stage::ExpertRollout => expert_rollout(cfg, dir)?,
        Stage::Imitate => imitate(cfg, dir)?,
        Stage::Finetune => finetune(cfg, dir)?,
        Stage::Evaluate => run_evaluate(cfg, dir)?,
        Stage::Bench => bench(cfg, dir)?,
        Stage::ExportPlots => export_plots(cfg, dir)?,
    };
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        run_id: dir.id(),
        stage: stage.as_str().into(),
        code_version: code_version(),
        seed: cfg.seed,
        input_checkpoints: produced.inputs,
        output_checkpoints: produced.checkpoints,
        artifacts: produced.artifacts,
        timings: Timings {
            started_unix_s: started,
            wall_seconds: clock.elapsed().as_secs_f64(),
        },
        config: cfg.clone(),
    };
    manifest.write(&dir.root)?;
    Ok(manifest)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    Ok(csv::Writer::from_path(path)?)
}

fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(EvalReport::HEADER)?;
    for r in reports {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

fn run_gradient_gate() -> Result<(), CliError> {
    let worst = gradient_gate(GRADIENT_GATE_INSTANCES).map_err(|e| CliError::Runtime(e.to_string()))?;
    eprintln!("gradient gate passed: {GRADIENT_GATE_INSTANCES} instances, worst relative error {worst:.2e}");
    Ok(())
}

fn load_policy(cfg: &LabConfig) -> Result<(Checkpoint, PathBuf), CliError> {
    let path = cfg
        .inputs
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Missing("no input checkpoint given (inputs.checkpoint or --checkpoint)".into()))?;
    if !path.is_file() {
        return Err(CliError::Missing(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = load_checkpoint(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok((ckpt, path))
}

fn expert(cfg: &LabConfig) -> Result<MpcExpert, CliError> {
    Ok(MpcExpert::new(cfg.model.clone(), cfg.rollout.sim.gains, cfg.expert)?)
}

fn expert_rollout(cfg: &LabConfig, dir: &RunDir) -> Result<Produced, CliError> {
    let terrain = Arc::new(cfg.terrain.generate(cfg.rollout_terrain, cfg.rollout_terrain_factor, cfg.seed)?);
    let mut env = Env::new(cfg.model.clone(), cfg.rollout.clone(), Arc::clone(&terrain), cfg.seed)?;
    let mut ctl = ExpertController::new(expert(cfg)?);
    ctl.reset();
    let mut rows = vec![env.row()];
    let mut diag = csv_writer(&dir.logs().join("solver.csv"))?;
    diag.write_record(DIAGNOSTICS_HEADER)?;
    loop {
        let outcome = match ctl.act(&mut env) {
            Ok((targets, action)) => {
                diag.write_record(ctl.expert.last.record())?;
                env.step(&targets, &action)
            }
            Err(e) => {
                eprintln!("expert solve failed at t = {:.2} s: {e}", env.time());
                quadlab::env::Outcome::Fault
            }
        };
        rows.push(env.row());
        if outcome.done() {
            eprintln!("episode ended: {outcome:?} at t = {:.2} s", env.time());
            break;
        }
    }
    diag.flush()?;
    trajectory::write_file(&dir.logs().join("trajectory.csv"), &rows)?;
    let report = EvalReport::from_log(
        "expert",
        cfg.seed,
        &rows,
        &cfg.model,
        cfg.rollout.sim.gravity,
        &terrain,
        None,
        cfg.rollout.gait.period(),
        cfg.rollout.episode_seconds,
        &SolveTimeStats {
            mean_us: f64::NAN,
            p99_us: f64::NAN,
        },
    );
    write_reports(&dir.eval().join("report.csv"), std::slice::from_ref(&report))?;
    print!("{}", format_table(std::slice::from_ref(&report)));
    println!("degraded solves: {}", ctl.degraded_count);
    Ok(Produced {
        artifacts: vec!["logs/trajectory.csv".into(), "logs/solver.csv".into(), "eval/report.csv".into()],
        ..Produced::default()
    })
}

fn imitate(cfg: &LabConfig, dir: &RunDir) -> Result<Produced, CliError> {
    run_gradient_gate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let policy = GaussianPolicy::random(1.0, &mut rng);
    let mut dagger = Dagger::new(cfg.dagger.clone(), cfg.model.clone(), cfg.expert, policy, cfg.seed)?;
    dagger.run(|s| {
        eprintln!(
            "dagger iter {:>3}: samples {:>6} train {:.5} holdout {:.5} length {:.2} s",
            s.iteration, s.dataset_size, s.train_mse, s.holdout_mse, s.mean_episode_length
        )
    })?;
    imitation::write_stats_csv(&dagger.stats, std::fs::File::create(dir.logs().join("dagger.csv"))?)?;
    let ckpt_path = dir.checkpoints().join(POLICY_FILE);
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            policy: dagger.policy.clone(),
            critic: None,
        },
    )?;
    if let Some(r) = dagger.holdout_ratio() {
        println!("held-out MSE ratio (last / first): {r:.4}");
    }
    Ok(Produced {
        checkpoints: vec![ckpt_path],
        artifacts: vec!["logs/dagger.csv".into()],
        ..Produced::default()
    })
}

fn finetune(cfg: &LabConfig, dir: &RunDir) -> Result<Produced, CliError> {
    run_gradient_gate()?;
    let mut inputs = Vec::new();
    let policy = if cfg.from_scratch {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5c2a7c);
        GaussianPolicy::random(cfg.ppo.init_std, &mut rng)
    } else {
        let (ckpt, path) = load_policy(cfg)?;
        inputs.push(path);
        ckpt.policy
    };
    let mut ppo = Ppo::new(cfg.ppo.clone(), cfg.model.clone(), policy, cfg.seed)?;
    ppo.run(|s| {
        eprintln!(
            "ppo iter {:>4}: reward {:.4} factor {:.3} length {:.2} kl {:.2e} clip {:.3} std {:.3}",
            s.iteration, s.mean_reward, s.terrain_factor, s.episode_length, s.kl, s.clip_fraction, s.std_mean
        )
    })?;
    rl::write_stats_csv(&ppo.stats, std::fs::File::create(dir.logs().join("finetune.csv"))?)?;
    let mut w = csv_writer(&dir.logs().join("episodes.csv"))?;
    for rec in &ppo.episode_log {
        w.serialize(rec)?;
    }
    w.flush()?;
    let ckpt_path = dir.checkpoints().join(POLICY_FILE);
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            policy: ppo.policy.clone(),
            critic: Some(ppo.critic.clone()),
        },
    )?;
    Ok(Produced {
        inputs,
        checkpoints: vec![ckpt_path],
        artifacts: vec!["logs/finetune.csv".into(), "logs/episodes.csv".into()],
    })
}

fn run_evaluate(cfg: &LabConfig, dir: &RunDir) -> Result<Produced, CliError> {
    let mut inputs = Vec::new();
    let (name, mut ctl): (String, Box<dyn Controller>) = if cfg.preset == Preset::Expert {
        ("expert".into(), Box::new(ExpertController::new(expert(cfg)?)))
    } else {
        let (ckpt, path) = load_policy(cfg)?;
        inputs.push(path);
        (cfg.preset.as_str().into(), Box::new(PolicyController::new(ckpt.policy)))
    };
    let results = evaluate(&name, ctl.as_mut(), &cfg.model, &cfg.terrain, &cfg.eval)?;
    let mut artifacts: Vec<PathBuf> = vec!["eval/report.csv".into()];
    for (i, r) in results.iter().enumerate() {
        let rel = PathBuf::from(format!("eval/trajectory_{i:03}.csv"));
        trajectory::write_file(&dir.root.join(&rel), &r.rows)?;
        artifacts.push(rel);
    }
    let reports: Vec<EvalReport> = results.into_iter().map(|r| r.report).collect();
    write_reports(&dir.eval().join("report.csv"), &reports)?;
    print!("{}", format_table(&reports));
    println!(
        "mean survival {:.2} s, success {:.2}, cot {:.3}, ppi {:.3}",
        finite_mean(reports.iter().map(|r| r.survival_time)),
        reports.iter().filter(|r| r.success).count() as f64 / reports.len() as f64,
        finite_mean(reports.iter().map(|r| r.cot)),
        finite_mean(reports.iter().map(|r| r.ppi)),
    );
    Ok(Produced {
        inputs,
        artifacts,
        ..Produced::default()
    })
}

/// Wall-clock comparison of one MPC solve against one policy forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub expert: SolveTimeStats,
    pub policy: SolveTimeStats,
}

impl BenchResult {
    pub fn speedup(&self) -> f64 {
        self.expert.mean_us / self.policy.mean_us
    }
}

/// Times `calls` expert solves on states of a walking episode and `calls`
/// policy forward passes on the observations of those same states.
pub fn measure(cfg: &LabConfig, policy: &GaussianPolicy) -> Result<BenchResult, CliError> {
    let terrain = Arc::new(cfg.terrain.generate(quadlab::terrain::TerrainKind::Flat, 0.0, cfg.seed)?);
    let mut env_cfg = cfg.rollout.clone();
    env_cfg.episode_seconds = f64::INFINITY;
    let mut env = Env::new(cfg.model.clone(), env_cfg, terrain, cfg.seed)?;
    let mut ctl = ExpertController::new(expert(cfg)?);
    ctl.reset();
    let warmup = (cfg.bench.warmup_seconds / cfg.rollout.control_dt).round() as usize;
    let mut expert_us = Vec::with_capacity(cfg.bench.calls);
    let mut observations = Vec::with_capacity(cfg.bench.calls * ACTOR_OBS_DIM);
    let mut obs = Vec::with_capacity(ACTOR_OBS_DIM);
    for tick in 0..warmup + cfg.bench.calls {
        env.actor_observation(&mut obs);
        let t0 = Instant::now();
        let (targets, action) = ctl.act(&mut env)?;
        let us = t0.elapsed().as_secs_f64() * 1e6;
        if tick >= warmup {
            expert_us.push(us);
            observations.extend_from_slice(&obs);
        }
        if env.step(&targets, &action).done() {
            env.reset(None, cfg.seed.wrapping_add(tick as u64))?;
            ctl.reset();
        }
    }
    let mut ws = Workspace::default();
    let mut policy_us = Vec::with_capacity(cfg.bench.calls);
    let mut sink = 0.0f32;
    for x in observations.chunks(ACTOR_OBS_DIM) {
        let t0 = Instant::now();
        let y = policy.actor.forward_batch(x, 1, &mut ws);
        sink += y[0];
        policy_us.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    std::hint::black_box(sink);
    Ok(BenchResult {
        expert: SolveTimeStats::from_samples(&expert_us),
        policy: SolveTimeStats::from_samples(&policy_us),
    })
}

fn bench(cfg: &LabConfig, dir: &RunDir) -> Result<Produced, CliError> {
    let mut inputs = Vec::new();
    let policy = match &cfg.inputs.checkpoint {
        Some(_) => {
            let (ckpt, path) = load_policy(cfg)?;
            inputs.push(path);
            ckpt.policy
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            GaussianPolicy::random(1.0, &mut rng)
        }
    };
    let r = measure(cfg, &policy)?;
    let mut w = csv_writer(&dir.eval().join("bench.csv"))?;
    w.write_record(["controller", "calls", "mean_us", "p99_us"])?;
    for (name, s) in [("mpc", r.expert), ("policy", r.policy)] {
        w.write_record([name.to_string(), cfg.bench.calls.to_string(), s.mean_us.to_string(), s.p99_us.to_string()])?;
    }
    w.flush()?;
    println!(
        "mpc solve {:.1} us (p99 {:.1}), policy forward {:.1} us (p99 {:.1}), speedup {:.1}x",
        r.expert.mean_us,
        r.expert.p99_us,
        r.policy.mean_us,
        r.policy.p99_us,
        r.speedup()
    );
    Ok(Produced {
        inputs,
        artifacts: vec!["eval/bench.csv".into()],
        ..Produced::default()
    })
}

fn read_table(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    let header = r.headers()?.clone();
    let rows = r.records().collect::<Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

fn column(header: &csv::StringRecord, name: &str, path: &Path) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Runtime(format!("{}: missing column `{name}`", path.display())))
}

/// Collects plot-ready tables from earlier runs: learning curves, DAgger
/// curves, robustness summaries, knee phase portraits and tracking traces.
fn export_plots(cfg: &LabConfig, dir: &RunDir) -> Result<Produced, CliError> {
    if cfg.inputs.runs.is_empty() {
        return Err(CliError::Config("export-plots needs input runs (inputs.runs or --run)".into()));
    }
    let mut curves = csv_writer(&dir.eval().join("learning_curves.csv"))?;
    curves.write_record(["run", "preset", "seed", "iter", "mean_reward", "terrain_factor", "episode_length"])?;
    let mut dagger = csv_writer(&dir.eval().join("dagger_curves.csv"))?;
    dagger.write_record(["run", "seed", "iter", "dataset_size", "train_mse", "holdout_mse"])?;
    let mut robust = csv_writer(&dir.eval().join("robustness.csv"))?;
    robust.write_record(["run", "controller", "terrain", "terrain_factor", "episodes", "mean_survival", "success_rate", "mean_cot", "mean_ppi"])?;
    let mut portrait = csv_writer(&dir.eval().join("phase_portrait.csv"))?;
    portrait.write_record(["run", "controller", "time", "leg", "knee_angle", "knee_velocity"])?;
    let mut tracking = csv_writer(&dir.eval().join("tracking.csv"))?;
    tracking.write_record(["run", "controller", "time", "cmd_vx", "vx", "cmd_vy", "vy", "cmd_wz", "wz"])?;

    for run in &cfg.inputs.runs {
        let m = RunManifest::read(run)?;
        let seed = m.seed.to_string();
        match m.stage.as_str() {
            "finetune" => {
                let path = run.join("logs/finetune.csv");
                let (h, rows) = read_table(&path)?;
                let cols = ["iter", "mean_reward", "terrain_factor", "episode_length"]
                    .map(|c| column(&h, c, &path))
                    .into_iter()
                    .collect::<Result<Vec<_>, _>>()?;
                for row in rows {
                    let mut rec = vec![m.run_id.clone(), m.config.preset.as_str().to_string(), seed.clone()];
                    rec.extend(cols.iter().map(|&c| row[c].to_string()));
                    curves.write_record(rec)?;
                }
            }
            "imitate" => {
                let path = run.join("logs/dagger.csv");
                let (h, rows) = read_table(&path)?;
                let cols = ["iter", "dataset_size", "train_mse", "holdout_mse"]
                    .map(|c| column(&h, c, &path))
                    .into_iter()
                    .collect::<Result<Vec<_>, _>>()?;
                for row in rows {
                    let mut rec = vec![m.run_id.clone(), seed.clone()];
                    rec.extend(cols.iter().map(|&c| row[c].to_string()));
                    dagger.write_record(rec)?;
                }
            }
            "evaluate" => {
                let path = run.join("eval/report.csv");
                let file = std::fs::File::open(&path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
                let reports = read_reports(file).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
                let Some(first) = reports.first() else { continue };
                robust.write_record([
                    m.run_id.clone(),
                    first.controller.clone(),
                    first.terrain.clone(),
                    first.terrain_factor.to_string(),
                    reports.len().to_string(),
                    finite_mean(reports.iter().map(|r| r.survival_time)).to_string(),
                    (reports.iter().filter(|r| r.success).count() as f64 / reports.len() as f64).to_string(),
                    finite_mean(reports.iter().map(|r| r.cot)).to_string(),
                    finite_mean(reports.iter().map(|r| r.ppi)).to_string(),
                ])?;
                let traj = run.join("eval/trajectory_000.csv");
                let rows: Vec<TrajectoryRow> = trajectory::read_file(&traj)
                    .map_err(|e| CliError::Missing(format!("{}: {e}", traj.display())))?;
                for row in &rows {
                    for leg in 0..quadlab::sim::NUM_LEGS {
                        let j = knee_joint(leg);
                        debug_assert!(j < NUM_JOINTS);
                        portrait.write_record([
                            m.run_id.clone(),
                            first.controller.clone(),
                            row.time.to_string(),
                            quadlab::sim::LEG_NAMES[leg].to_string(),
                            row.joint_angles[j].to_string(),
                            row.joint_velocities[j].to_string(),
                        ])?;
                    }
                    let v = heading_velocity(row);
                    tracking.write_record([
                        m.run_id.clone(),
                        first.controller.clone(),
                        row.time.to_string(),
                        row.command[0].to_string(),
                        v[0].to_string(),
                        row.command[1].to_string(),
                        v[1].to_string(),
                        row.command[2].to_string(),
                        v[2].to_string(),
                    ])?;
                }
            }
            _ => {}
        }
    }
    for w in [&mut curves, &mut dagger, &mut robust, &mut portrait, &mut tracking] {
        w.flush()?;
    }
    Ok(Produced {
        artifacts: [
            "learning_curves",
            "dagger_curves",
            "robustness",
            "phase_portrait",
            "tracking",
        ]
        .iter()
        .map(|n| PathBuf::from(format!("eval/{n}.csv")))
        .collect(),
        ..Produced::default()
    })
}
