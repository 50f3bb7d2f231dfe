use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tdk_core::config::{builtin_run_config, parse_run_config, RunConfig};
use tdk_core::env::{Axis, HandEnv, RotationTarget};
use tdk_core::handmodel::{builtin_proto0, load_hand_model, HandModel};
use tdk_core::motorlog::{estimate_motor_log, read_motor_log, write_estimate_csv};
use tdk_core::rl::train::write_train_log;
use tdk_core::rl::{load_policy, rollout as run_rollout, save_policy, ActionSource, PolicyMetadata, Trainer};
use tdk_core::runtime::{
    run_control_loop, serve_bridge as serve, write_telemetry_csv, BridgeDriver, ControlLoopConfig, LoopbackDriver,
    MotorDriver, Policy,
};
use tdk_core::stats::{in_reward_band, rotation_stats, to_hand_frame, Distribution, RotationStats};
use tdk_core::tendon::calibrate;
use tdk_core::trajectory::{read_trajectory_csv, write_trajectory_csv};

use crate::TargetArgs;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, unreadable or invalid input files.
    #[error("{0}")]
    Usage(String),
    /// Failure while the command was doing its work.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Root for default output paths: `$TDK_LOG_DIR`, else `./runs`.
fn log_root() -> PathBuf {
    std::env::var_os("TDK_LOG_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<fs::File, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::File::create(path).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    use std::io::Write;
    create(path)?
        .write_all(text.as_bytes())
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Hand description referenced from a config file, relative to that file.
fn load_hand(hand: Option<&str>, base: Option<&Path>) -> Result<HandModel, CliError> {
    match hand {
        None => Ok(builtin_proto0()),
        Some(p) => {
            let path = base.and_then(Path::parent).map_or_else(|| PathBuf::from(p), |d| d.join(p));
            load_hand_model(&read_text(&path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
        }
    }
}

/// A run config file path or built-in name.
fn load_run_config(spec: &str) -> Result<(RunConfig, HandModel), CliError> {
    let (text, base) = match builtin_run_config(spec) {
        Some(t) => (t.to_string(), None),
        None => (read_text(Path::new(spec))?, Some(Path::new(spec))),
    };
    let cfg = parse_run_config(&text).map_err(|e| usage(format!("{spec}: {e}")))?;
    let model = load_hand(cfg.hand.as_deref(), base)?;
    Ok((cfg, model))
}

/// Control loop config file: an optional `hand` path and a `[loop]` table.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LoopFile {
    hand: Option<String>,
    #[serde(rename = "loop")]
    control: ControlLoopConfig,
}

fn load_loop_config(path: Option<&Path>) -> Result<(ControlLoopConfig, HandModel), CliError> {
    let Some(path) = path else {
        return Ok((ControlLoopConfig::default(), builtin_proto0()));
    };
    let file: LoopFile = toml::from_str(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let model = load_hand(file.hand.as_deref(), Some(path))?;
    file.control.validate(&model).map_err(usage)?;
    Ok((file.control, model))
}

fn apply_target(target: &mut RotationTarget, args: &TargetArgs) {
    if let Some(a) = args.axis() {
        target.axis = a;
    }
    if let Some(d) = args.direction() {
        target.direction = d;
    }
}

pub fn train(
    config: &str,
    seed: Option<u64>,
    iterations: Option<u64>,
    target: &TargetArgs,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut cfg, model) = load_run_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    apply_target(&mut cfg.env.target, target);
    let out = out.unwrap_or_else(|| log_root().join(format!("train-{}", cfg.train.seed)));
    let env = HandEnv::new(model, cfg.env.clone()).map_err(usage)?;
    let mut trainer = Trainer::new(env.clone(), cfg.train.clone()).map_err(usage)?;
    write_text(&out.join("config.toml"), &toml::to_string(&cfg).map_err(runtime)?)?;

    let md = PolicyMetadata::from_env(&env);
    let mut log = Vec::new();
    for _ in 0..cfg.train.iterations {
        let (row, _) = trainer.iterate().map_err(runtime)?;
        eprintln!(
            "iter {:>4}  reward {:+.5}  omega {:+.4}  clip {:.3}",
            row.iter, row.mean_reward, row.mean_omega_target, row.clip_frac
        );
        log.push(row);
        let every = cfg.train.checkpoint_every;
        if every > 0 && trainer.iter % every == 0 {
            let doc = save_policy(&trainer.model.actor, &trainer.model.head, &md).map_err(runtime)?;
            write_text(&out.join("checkpoints").join(format!("policy_{:05}.json", trainer.iter)), &doc)?;
        }
    }
    let doc = save_policy(&trainer.model.actor, &trainer.model.head, &md).map_err(runtime)?;
    write_text(&out.join("policy.json"), &doc)?;
    write_train_log(create(&out.join("train.csv"))?, &log).map_err(runtime)?;
    println!("{}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn rollout(
    policy: &Path,
    steps: usize,
    envs: usize,
    config: &str,
    seed: u64,
    sample: bool,
    target: &TargetArgs,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    if envs == 0 {
        return Err(usage("--envs must be at least 1"));
    }
    let (actor, head, md) = load_policy(&read_text(policy)?).map_err(|e| usage(format!("{}: {e}", policy.display())))?;
    let (mut cfg, model) = load_run_config(config)?;
    cfg.env.target = md.target;
    apply_target(&mut cfg.env.target, target);
    let env = HandEnv::new(model, cfg.env).map_err(usage)?;
    if actor.input_dim() != env.actor_dim() || actor.output_dim() != env.n_joints() {
        return Err(usage(format!(
            "policy maps {} inputs to {} actions; this hand needs {} to {}",
            actor.input_dim(),
            actor.output_dim(),
            env.actor_dim(),
            env.n_joints()
        )));
    }
    let source = if sample {
        ActionSource::Sample(&actor, &head)
    } else {
        ActionSource::Mean(&actor)
    };
    let res = run_rollout(&env, source, envs, steps, seed).map_err(runtime)?;
    let out = out.unwrap_or_else(|| log_root().join("rollout.csv"));
    write_trajectory_csv(create(&out)?, &res.rows, env.n_joints()).map_err(runtime)?;
    eprintln!(
        "{} rows, mean reward {:+.5}, mean target rate {:+.4} rad/s",
        res.rows.len(),
        res.mean_reward,
        res.mean_omega_target
    );
    println!("{}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    input: String,
    #[serde(flatten)]
    stats: &'a RotationStats,
    /// Raw distributions about every axis, banded for the same direction.
    per_axis: BTreeMap<String, Distribution>,
}

pub fn eval(input: &Path, target: &TargetArgs, alpha: f64, out: Option<PathBuf>) -> Result<(), CliError> {
    let rows = read_trajectory_csv(fs::File::open(input).map_err(|e| usage(format!("{}: {e}", input.display())))?)
        .map_err(|e| usage(format!("{}: {e}", input.display())))?;
    let mut tgt = RotationTarget::default();
    apply_target(&mut tgt, target);
    let stats = rotation_stats(&rows, tgt, alpha).map_err(usage)?;
    let per_axis = [Axis::X, Axis::Y, Axis::Z]
        .into_iter()
        .map(|axis| {
            let t = RotationTarget { axis, ..tgt };
            let samples: Vec<f64> = rows.iter().map(|r| axis.component(to_hand_frame(r.omega))).collect();
            (axis.to_string(), Distribution::of(&samples, t))
        })
        .collect();
    let report = EvalReport {
        input: input.display().to_string(),
        stats: &stats,
        per_axis,
    };
    let out = out.unwrap_or_else(|| log_root().join("eval"));
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    write_text(&out.join("stats.json"), &(json + "\n"))?;

    let mut series = String::from("row,step,env,omega_x,omega_y,omega_z,omega_axis,smoothed,in_band\n");
    for (i, r) in rows.iter().enumerate() {
        let w = stats.samples[i];
        series.push_str(&format!(
            "{i},{},{},{},{},{},{w},{},{}\n",
            r.step,
            r.env,
            r.omega[0],
            r.omega[1],
            r.omega[2],
            stats.smoothed_series[i],
            u8::from(in_reward_band(w, tgt)),
        ));
    }
    write_text(&out.join("series.csv"), &series)?;
    println!(
        "mean omega_{} {:+.4} rad/s, in-band fraction {:.4} ({} samples)",
        tgt.axis, stats.raw.mean, stats.raw.in_band_fraction, stats.count
    );
    Ok(())
}

pub fn estimate(input: &Path, config: Option<&Path>, out: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, model) = load_loop_config(config)?;
    let log = read_motor_log(fs::File::open(input).map_err(|e| usage(format!("{}: {e}", input.display())))?)
        .map_err(|e| usage(format!("{}: {e}", input.display())))?;
    if log.iter().any(|r| r.theta.len() != model.n_motors()) {
        return Err(usage(format!("motor log needs {} angle columns", model.n_motors())));
    }
    let (_, rows) = estimate_motor_log(
        &model,
        &log,
        &cfg.calibration_pose(&model),
        &cfg.noise,
        cfg.p0,
        cfg.period(),
    )
    .map_err(runtime)?;
    let out = out.unwrap_or_else(|| log_root().join("estimate.csv"));
    write_estimate_csv(create(&out)?, &rows).map_err(runtime)?;
    println!("{}", out.display());
    Ok(())
}

pub fn calibrate_sim(config: Option<&Path>, out: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, model) = load_loop_config(config)?;
    let pose = cfg.calibration_pose(&model);
    let mut driver = LoopbackDriver::at_pose(&model, &pose, 1.0, cfg.period()).map_err(usage)?;
    let boot = driver.read_motor_state().map_err(runtime)?;
    let cal = calibrate(&model, &boot.theta, &pose).map_err(runtime)?;
    let out = out.unwrap_or_else(|| log_root().join("calibration.json"));
    write_text(&out, &(serde_json::to_string_pretty(&cal).map_err(runtime)? + "\n"))?;
    println!("{}", out.display());
    Ok(())
}

pub fn serve_bridge(addr: &str, alpha: f64, duration: Option<f64>) -> Result<(), CliError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(usage("--alpha must be in (0, 1]"));
    }
    let model = builtin_proto0();
    let driver = LoopbackDriver::at_pose(&model, &vec![0.0; model.n_actuated()], alpha, 0.05).map_err(runtime)?;
    let listener = TcpListener::bind(addr).map_err(|e| usage(format!("cannot bind {addr}: {e}")))?;
    eprintln!("serving simulated motors on {}", listener.local_addr().map_err(runtime)?);
    let stop = Arc::new(AtomicBool::new(false));
    if let Some(secs) = duration {
        let flag = Arc::clone(&stop);
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_secs_f64(secs.max(0.0)));
            flag.store(true, Ordering::Relaxed);
        });
    }
    serve(listener, Arc::new(Mutex::new(driver)), model.n_motors(), stop).map_err(runtime)
}

pub fn run_loop(
    policy: &Path,
    config: Option<&Path>,
    connect: Option<&str>,
    steps: u64,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut cfg, model) = load_loop_config(config)?;
    let (actor, _, md) = load_policy(&read_text(policy)?).map_err(|e| usage(format!("{}: {e}", policy.display())))?;
    if md.joint_ranges.len() != model.n_actuated() || actor.output_dim() != model.n_actuated() {
        return Err(usage("policy does not match the hand model"));
    }
    if (md.policy_rate_hz - cfg.rate_hz).abs() > 1e-9 {
        eprintln!(
            "warning: policy was trained at {} Hz, loop runs at {} Hz",
            md.policy_rate_hz, cfg.rate_hz
        );
    }
    cfg.v_max = md.v_max;
    let policy = Policy::from_document(actor, &md);
    let mut driver: Box<dyn MotorDriver> = match connect {
        Some(addr) => Box::new(
            BridgeDriver::connect(addr, model.n_motors(), Duration::from_secs_f64(cfg.watchdog_timeout_s))
                .map_err(runtime)?,
        ),
        None => Box::new(
            LoopbackDriver::at_pose(&model, &cfg.calibration_pose(&model), 0.5, cfg.period()).map_err(runtime)?,
        ),
    };
    let stop = AtomicBool::new(false);
    let log = run_control_loop(&cfg, &model, &policy, driver.as_mut(), Some(steps), &stop, |_| {}).map_err(runtime)?;
    let out = out.unwrap_or_else(|| log_root().join("telemetry.csv"));
    write_telemetry_csv(create(&out)?, &log.records, model.n_motors(), model.n_actuated()).map_err(runtime)?;
    println!("{}", out.display());
    match log.fault {
        Some(f) => Err(runtime(f)),
        None => Ok(()),
    }
}
