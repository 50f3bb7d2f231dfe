//! 20 Hz closed-loop policy runner.
//!
//! One tick: read motors, convert to tendon lengths, EKF, scaled joint
//! history, actor mean, command integration, motor targets, write.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{actor_observation, apply_action, HISTORY_DEPTH};
use crate::estimator::{ekf_init, ekf_step, EkfState, EstimatorError, NoiseConfig};
use crate::handmodel::HandModel;
use crate::rl::{Mlp, PolicyMetadata, RlError};
use crate::tendon::{calibrate, joints_to_motor_angles, motor_angles_to_tendon_lengths, Calibration, TendonError};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("driver did not answer in time")]
    Timeout,
    #[error("driver disconnected: {0}")]
    Disconnected(String),
    #[error("driver protocol error: {0}")]
    Protocol(String),
    #[error("expected {expected} motor values, got {actual}")]
    Dimension { expected: usize, actual: usize },
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Tendon(#[from] TendonError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Policy(#[from] RlError),
    #[error("invalid control loop config: {0}")]
    Config(String),
    #[error("safe-stop after {missed} missed ticks")]
    SafeStop { missed: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotorState {
    pub theta: Vec<f64>,
    pub theta_dot: Vec<f64>,
    pub timestamp: f64,
}

pub trait MotorDriver {
    fn read_motor_state(&mut self) -> Result<MotorState, DriverError>;
    fn write_motor_targets(&mut self, theta_des: &[f64]) -> Result<(), DriverError>;
}

/// Simulated motors: each read moves the angles a fraction `alpha` of the way
/// to the last target and advances a simulated clock by `dt`.
#[derive(Debug, Clone)]
pub struct LoopbackDriver {
    pub theta: Vec<f64>,
    pub theta_dot: Vec<f64>,
    pub target: Vec<f64>,
    pub alpha: f64,
    pub dt: f64,
    pub time: f64,
    pub reads: u64,
    /// Stop answering after this many reads.
    pub silent_after: Option<u64>,
}

impl LoopbackDriver {
    pub fn new(theta0: Vec<f64>, alpha: f64, dt: f64) -> Self {
        let n = theta0.len();
        Self {
            target: theta0.clone(),
            theta: theta0,
            theta_dot: vec![0.0; n],
            alpha,
            dt,
            time: 0.0,
            reads: 0,
            silent_after: None,
        }
    }

    /// Motors at the encoder angles seen with the hand at `q`, with an
    /// arbitrary per-motor zero offset.
    pub fn at_pose(model: &HandModel, q: &[f64], alpha: f64, dt: f64) -> Result<Self, TendonError> {
        let n = model.n_motors();
        let zero = Calibration {
            theta_cal: (0..n).map(|k| 0.1 * k as f64 - 0.5).collect(),
            q_cal: vec![0.0; model.n_actuated()],
            l_cal: crate::tendon::tendon_lengths(model, &vec![0.0; model.n_actuated()])?.l,
        };
        Ok(Self::new(joints_to_motor_angles(model, &zero, q)?, alpha, dt))
    }
}

impl MotorDriver for LoopbackDriver {
    fn read_motor_state(&mut self) -> Result<MotorState, DriverError> {
        if self.silent_after.is_some_and(|n| self.reads >= n) {
            return Err(DriverError::Timeout);
        }
        self.reads += 1;
        if self.reads > 1 {
            self.time += self.dt;
            for k in 0..self.theta.len() {
                let step = self.alpha * (self.target[k] - self.theta[k]);
                self.theta[k] += step;
                self.theta_dot[k] = step / self.dt;
            }
        }
        Ok(MotorState {
            theta: self.theta.clone(),
            theta_dot: self.theta_dot.clone(),
            timestamp: self.time,
        })
    }

    fn write_motor_targets(&mut self, theta_des: &[f64]) -> Result<(), DriverError> {
        if theta_des.len() != self.target.len() {
            return Err(DriverError::Dimension {
                expected: self.target.len(),
                actual: theta_des.len(),
            });
        }
        self.target.copy_from_slice(theta_des);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlLoopConfig {
    pub rate_hz: f64,
    pub obs_scale: f64,
    /// Known joint pose at boot, used for calibration. Empty = all zeros.
    pub calibration_pose: Vec<f64>,
    pub watchdog_timeout_s: f64,
    pub max_missed_ticks: u32,
    pub v_max: f64,
    pub p0: f64,
    pub noise: NoiseConfig,
    /// Sleep to each tick deadline; off for fast offline replays.
    pub realtime: bool,
}

impl Default for ControlLoopConfig {
    fn default() -> Self {
        Self {
            rate_hz: 20.0,
            obs_scale: 0.5,
            calibration_pose: Vec::new(),
            watchdog_timeout_s: 0.2,
            max_missed_ticks: 3,
            v_max: 5.0,
            p0: 1e-4,
            noise: NoiseConfig::default(),
            realtime: true,
        }
    }
}

impl ControlLoopConfig {
    pub fn validate(&self, model: &HandModel) -> Result<(), RuntimeError> {
        if !(self.rate_hz > 0.0) {
            return Err(RuntimeError::Config("rate must be positive".into()));
        }
        if !(self.obs_scale > 0.0 && self.obs_scale <= 1.0) {
            return Err(RuntimeError::Config("obs scale must be in (0, 1]".into()));
        }
        if !self.calibration_pose.is_empty() && self.calibration_pose.len() != model.n_actuated() {
            return Err(RuntimeError::Config(format!(
                "calibration pose needs {} values",
                model.n_actuated()
            )));
        }
        Ok(())
    }

    pub fn calibration_pose(&self, model: &HandModel) -> Vec<f64> {
        if self.calibration_pose.is_empty() {
            vec![0.0; model.n_actuated()]
        } else {
            self.calibration_pose.clone()
        }
    }

    pub fn period(&self) -> f64 {
        1.0 / self.rate_hz
    }
}

/// Deployable actor: network plus the joint ranges it was trained with.
#[derive(Debug, Clone)]
pub struct Policy {
    pub actor: Mlp,
    pub ranges: Vec<(f64, f64)>,
}

impl Policy {
    pub fn from_document(actor: Mlp, md: &PolicyMetadata) -> Self {
        Self {
            actor,
            ranges: md.joint_ranges.iter().map(|r| (r[0], r[1])).collect(),
        }
    }

    /// Always outputs zero actions.
    pub fn zero(model: &HandModel) -> Self {
        let n = model.n_actuated();
        Self {
            actor: Mlp::zeros(&[n * (2 + HISTORY_DEPTH), n]),
            ranges: model.actuated_ranges(),
        }
    }
}

/// Everything produced in one tick. Stage times are seconds since the
/// session started.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRecord {
    pub tick: u64,
    pub t_read: f64,
    pub t_estimate: f64,
    pub t_act: f64,
    pub t_write: f64,
    pub theta: Vec<f64>,
    pub l: Vec<f64>,
    pub qhat: Vec<f64>,
    /// Actor input for this tick.
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub qbar: Vec<f64>,
    pub theta_des: Vec<f64>,
    pub fault: bool,
}

pub fn telemetry_header(n_motors: usize, n_joints: usize) -> Vec<String> {
    let mut h = vec!["tick".to_string(), "t_wall".to_string()];
    for (prefix, n) in [
        ("theta", n_motors),
        ("l", n_motors),
        ("qhat", n_joints),
        ("a", n_joints),
        ("qbar", n_joints),
        ("theta_des", n_motors),
    ] {
        h.extend((0..n).map(|i| format!("{prefix}{i}")));
    }
    h.push("fault".to_string());
    h
}

pub fn write_telemetry_csv<W: Write>(
    out: W,
    records: &[TelemetryRecord],
    n_motors: usize,
    n_joints: usize,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(telemetry_header(n_motors, n_joints))?;
    for r in records {
        let mut rec = vec![r.tick.to_string(), r.t_read.to_string()];
        for v in [&r.theta, &r.l, &r.qhat, &r.action, &r.qbar, &r.theta_des] {
            rec.extend(v.iter().map(f64::to_string));
        }
        rec.push(u8::from(r.fault).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads telemetry written by [`write_telemetry_csv`]. Only `t_wall` is
/// stored, so all four stage times come back equal to it and `obs` is empty.
pub fn read_telemetry_csv<R: Read>(input: R, n_motors: usize, n_joints: usize) -> Result<Vec<TelemetryRecord>, csv::Error> {
    let header = telemetry_header(n_motors, n_joints);
    let mut rd = csv::Reader::from_reader(input);
    if rd.headers()?.iter().ne(header.iter().map(String::as_str)) {
        return Err(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "telemetry header does not match the hand layout",
        )));
    }
    let bad = |what: &str| {
        csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("bad telemetry value in `{what}`"),
        ))
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .zip(&header)
            .map(|(v, h)| v.trim().parse::<f64>().map_err(|_| bad(h)))
            .collect::<Result<_, _>>()?;
        let mut at = 2;
        let mut take = |n: usize| {
            let v = vals[at..at + n].to_vec();
            at += n;
            v
        };
        let (theta, l, qhat) = (take(n_motors), take(n_motors), take(n_joints));
        let (action, qbar, theta_des) = (take(n_joints), take(n_joints), take(n_motors));
        out.push(TelemetryRecord {
            tick: vals[0] as u64,
            t_read: vals[1],
            t_estimate: vals[1],
            t_act: vals[1],
            t_write: vals[1],
            theta,
            l,
            qhat,
            obs: Vec::new(),
            action,
            qbar,
            theta_des,
            fault: vals[vals.len() - 1] != 0.0,
        });
    }
    Ok(out)
}

/// Mutable state of a running loop.
#[derive(Debug, Clone)]
pub struct ControlState {
    pub ekf: EkfState,
    pub history: Vec<Vec<f64>>,
    pub qbar: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub last_theta_des: Option<Vec<f64>>,
    pub missed: u32,
    pub tick: u64,
}

impl ControlState {
    pub fn new(model: &HandModel, cfg: &ControlLoopConfig, q0: &[f64]) -> Result<Self, RuntimeError> {
        let n = model.n_actuated();
        Ok(Self {
            ekf: ekf_init(model, q0, cfg.p0, &cfg.noise, cfg.period())?,
            history: vec![q0.to_vec(); HISTORY_DEPTH],
            qbar: q0.to_vec(),
            prev_action: vec![0.0; n],
            last_theta_des: None,
            missed: 0,
            tick: 0,
        })
    }
}

/// Runs one tick. A driver timeout holds the last command and counts a
/// missed tick; too many in a row is a safe-stop error.
#[allow(clippy::too_many_arguments)]
pub fn control_step<D: MotorDriver + ?Sized>(
    driver: &mut D,
    model: &HandModel,
    cal: &Calibration,
    policy: &Policy,
    cfg: &ControlLoopConfig,
    state: &mut ControlState,
    clock: &Instant,
) -> Result<TelemetryRecord, RuntimeError> {
    let now = || clock.elapsed().as_secs_f64();
    let tick = state.tick;
    state.tick += 1;
    let t_read = now();
    let ms = match driver.read_motor_state() {
        Ok(ms) => ms,
        Err(DriverError::Timeout) | Err(DriverError::Disconnected(_)) => {
            state.missed += 1;
            if state.missed > cfg.max_missed_ticks {
                return Err(RuntimeError::SafeStop { missed: state.missed });
            }
            if let Some(last) = &state.last_theta_des {
                let _ = driver.write_motor_targets(last);
            }
            let t = now();
            return Ok(TelemetryRecord {
                tick,
                t_read,
                t_estimate: t,
                t_act: t,
                t_write: t,
                theta: vec![f64::NAN; model.n_motors()],
                l: vec![f64::NAN; model.n_motors()],
                qhat: state.ekf.q().to_vec(),
                obs: Vec::new(),
                action: vec![0.0; model.n_actuated()],
                qbar: state.qbar.clone(),
                theta_des: state.last_theta_des.clone().unwrap_or_else(|| vec![f64::NAN; model.n_motors()]),
                fault: true,
            });
        }
        Err(e) => return Err(e.into()),
    };
    state.missed = 0;
    let lengths = motor_angles_to_tendon_lengths(model, cal, &ms.theta, Some(&ms.theta_dot))?;
    state.ekf = ekf_step(&state.ekf, &lengths, model)?;
    let qhat = state.ekf.q().to_vec();
    state.history.remove(0);
    state.history.push(qhat.clone());
    let t_estimate = now();

    let obs = actor_observation(&state.qbar, &state.history, &state.prev_action, &policy.ranges, cfg.obs_scale);
    let action: Vec<f64> = policy.actor.forward(&obs)?.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
    apply_action(&mut state.qbar, &action, &policy.ranges, cfg.v_max, cfg.period());
    state.prev_action.clone_from(&action);
    let theta_des = joints_to_motor_angles(model, cal, &state.qbar)?;
    let t_act = now();

    driver.write_motor_targets(&theta_des)?;
    let t_write = now();
    state.last_theta_des = Some(theta_des.clone());
    Ok(TelemetryRecord {
        tick,
        t_read,
        t_estimate,
        t_act,
        t_write,
        theta: ms.theta,
        l: lengths.l,
        qhat,
        obs,
        action,
        qbar: state.qbar.clone(),
        theta_des,
        fault: false,
    })
}

#[derive(Debug, Clone)]
pub struct SessionLog {
    pub calibration: Calibration,
    /// Seconds since session start when calibration finished.
    pub calibrated_at: f64,
    pub records: Vec<TelemetryRecord>,
    /// Set when the loop ended in a safe-stop.
    pub fault: Option<String>,
}

/// Calibrates at boot, then ticks until `max_ticks`, the stop flag, or a
/// safe-stop. Each record also goes to `sink` as it is produced.
pub fn run_control_loop<D: MotorDriver + ?Sized>(
    cfg: &ControlLoopConfig,
    model: &HandModel,
    policy: &Policy,
    driver: &mut D,
    max_ticks: Option<u64>,
    stop: &AtomicBool,
    mut sink: impl FnMut(&TelemetryRecord),
) -> Result<SessionLog, RuntimeError> {
    cfg.validate(model)?;
    if policy.ranges.len() != model.n_actuated() || policy.actor.output_dim() != model.n_actuated() {
        return Err(RuntimeError::Config("policy does not match the hand model".into()));
    }
    let clock = Instant::now();
    let q_cal = cfg.calibration_pose(model);
    let mut boot = None;
    for _ in 0..=cfg.max_missed_ticks {
        match driver.read_motor_state() {
            Ok(ms) => {
                boot = Some(ms);
                break;
            }
            Err(DriverError::Timeout) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let boot = boot.ok_or(RuntimeError::SafeStop {
        missed: cfg.max_missed_ticks + 1,
    })?;
    let calibration = calibrate(model, &boot.theta, &q_cal)?;
    let calibrated_at = clock.elapsed().as_secs_f64();
    let mut state = ControlState::new(model, cfg, &q_cal)?;

    let period = Duration::from_secs_f64(cfg.period());
    let start = Instant::now();
    let mut records = Vec::new();
    let mut fault = None;
    let mut k: u32 = 0;
    while max_ticks.is_none_or(|m| (records.len() as u64) < m) && !stop.load(Ordering::Relaxed) {
        if cfg.realtime {
            let deadline = start + period * k;
            let now = Instant::now();
            if deadline > now {
                thread::sleep(deadline - now);
            }
        }
        k += 1;
        match control_step(driver, model, &calibration, policy, cfg, &mut state, &clock) {
            Ok(rec) => {
                sink(&rec);
                records.push(rec);
            }
            Err(RuntimeError::SafeStop { missed }) => {
                fault = Some(format!("safe-stop after {missed} missed ticks"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SessionLog {
        calibration,
        calibrated_at,
        records,
        fault,
    })
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

/// Answers one protocol line against a driver.
pub fn handle_bridge_line<D: MotorDriver + ?Sized>(driver: &mut D, line: &str, n_motors: usize) -> String {
    let mut parts = line.split_whitespace();
    match parts.next() {
        Some("READ") if parts.next().is_none() => match driver.read_motor_state() {
            Ok(ms) => format!("STATE {} {} {}", ms.timestamp, fmt_list(&ms.theta), fmt_list(&ms.theta_dot)),
            Err(_) => "ERR timeout".to_string(),
        },
        Some("WRITE") => {
            let vals: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            match vals {
                Ok(v) if v.len() == n_motors && v.iter().all(|x| x.is_finite()) => {
                    match driver.write_motor_targets(&v) {
                        Ok(()) => "OK".to_string(),
                        Err(_) => "ERR write".to_string(),
                    }
                }
                _ => "ERR parse".to_string(),
            }
        }
        _ => "ERR parse".to_string(),
    }
}

fn serve_connection<D: MotorDriver + Send + 'static>(
    stream: TcpStream,
    driver: Arc<Mutex<D>>,
    n_motors: usize,
) -> std::io::Result<()> {
    let mut out = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        let reply = {
            let mut d = driver.lock().expect("driver lock poisoned");
            handle_bridge_line(&mut *d, line.trim(), n_motors)
        };
        out.write_all(reply.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Serves the line protocol on `listener`, one thread per connection, until
/// `stop` is set (checked between accepts).
pub fn serve_bridge<D: MotorDriver + Send + 'static>(
    listener: TcpListener,
    driver: Arc<Mutex<D>>,
    n_motors: usize,
    stop: Arc<AtomicBool>,
) -> std::io::Result<()> {
    listener.set_nonblocking(true)?;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let d = Arc::clone(&driver);
                thread::spawn(move || {
                    let _ = serve_connection(stream, d, n_motors);
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Client side of the bridge; socket timeouts surface as driver timeouts.
pub struct BridgeDriver {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    n_motors: usize,
}

impl BridgeDriver {
    pub fn connect<A: ToSocketAddrs>(addr: A, n_motors: usize, timeout: Duration) -> Result<Self, DriverError> {
        let stream = TcpStream::connect(addr).map_err(|e| DriverError::Disconnected(e.to_string()))?;
        stream
            .set_read_timeout(Some(timeout))
            .map_err(|e| DriverError::Disconnected(e.to_string()))?;
        let writer = stream.try_clone().map_err(|e| DriverError::Disconnected(e.to_string()))?;
        Ok(Self {
            reader: BufReader::new(stream),
            writer,
            n_motors,
        })
    }

    /// Sends one line and returns the reply line.
    pub fn request(&mut self, line: &str) -> Result<String, DriverError> {
        let io = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => DriverError::Timeout,
            _ => DriverError::Disconnected(e.to_string()),
        };
        self.writer.write_all(format!("{line}\n").as_bytes()).map_err(io)?;
        let mut reply = String::new();
        let n = self.reader.by_ref().read_line(&mut reply).map_err(io)?;
        if n == 0 {
            return Err(DriverError::Disconnected("connection closed".into()));
        }
        Ok(reply.trim_end().to_string())
    }
}

/// Parses a `STATE <t> <θ…> <θ̇…>` reply.
pub fn parse_state_line(line: &str, n_motors: usize) -> Result<MotorState, DriverError> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("STATE") {
        return Err(DriverError::Protocol(format!("unexpected reply `{line}`")));
    }
    let vals: Vec<f64> = parts
        .map(str::parse::<f64>)
        .collect::<Result<_, _>>()
        .map_err(|e| DriverError::Protocol(e.to_string()))?;
    if vals.len() != 1 + 2 * n_motors {
        return Err(DriverError::Dimension {
            expected: 1 + 2 * n_motors,
            actual: vals.len(),
        });
    }
    Ok(MotorState {
        timestamp: vals[0],
        theta: vals[1..1 + n_motors].to_vec(),
        theta_dot: vals[1 + n_motors..].to_vec(),
    })
}

impl MotorDriver for BridgeDriver {
    fn read_motor_state(&mut self) -> Result<MotorState, DriverError> {
        let reply = self.request("READ")?;
        if reply == "ERR timeout" {
            return Err(DriverError::Timeout);
        }
        parse_state_line(&reply, self.n_motors)
    }

    fn write_motor_targets(&mut self, theta_des: &[f64]) -> Result<(), DriverError> {
        if theta_des.len() != self.n_motors {
            return Err(DriverError::Dimension {
                expected: self.n_motors,
                actual: theta_des.len(),
            });
        }
        match self.request(&format!("WRITE {}", fmt_list(theta_des)))?.as_str() {
            "OK" => Ok(()),
            other => Err(DriverError::Protocol(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handmodel::builtin_proto0;

    fn fast_cfg() -> ControlLoopConfig {
        ControlLoopConfig {
            realtime: false,
            ..ControlLoopConfig::default()
        }
    }

    #[test]
    fn zero_policy_holds_command() {
        let m = builtin_proto0();
        let mut d = LoopbackDriver::at_pose(&m, &[0.0; 11], 1.0, 0.05).unwrap();
        let stop = AtomicBool::new(false);
        let log = run_control_loop(&fast_cfg(), &m, &Policy::zero(&m), &mut d, Some(10), &stop, |_| {}).unwrap();
        assert_eq!(log.records.len(), 10);
        let first = &log.records[0].theta_des;
        assert!(log.records.iter().all(|r| &r.theta_des == first));
    }

    #[test]
    fn written_targets_follow_command() {
        let m = builtin_proto0();
        let mut d = LoopbackDriver::at_pose(&m, &[0.0; 11], 0.5, 0.05).unwrap();
        let mut policy = Policy::zero(&m);
        policy.actor.layers[0].bias = (0..11).map(|i| 0.3 - 0.05 * i as f64).collect();
        let stop = AtomicBool::new(false);
        let log = run_control_loop(&fast_cfg(), &m, &policy, &mut d, Some(20), &stop, |_| {}).unwrap();
        for r in &log.records {
            assert_eq!(r.theta_des, joints_to_motor_angles(&m, &log.calibration, &r.qbar).unwrap());
            assert!(r.t_read <= r.t_estimate && r.t_estimate <= r.t_act && r.t_act <= r.t_write);
        }
        assert!(log.calibrated_at <= log.records[0].t_read);
    }

    #[test]
    fn silence_triggers_safe_stop() {
        let m = builtin_proto0();
        let mut d = LoopbackDriver::at_pose(&m, &[0.0; 11], 1.0, 0.05).unwrap();
        d.silent_after = Some(6);
        let stop = AtomicBool::new(false);
        let log = run_control_loop(&fast_cfg(), &m, &Policy::zero(&m), &mut d, Some(50), &stop, |_| {}).unwrap();
        assert!(log.fault.is_some());
        // 5 good ticks after the boot read, then 3 held ticks.
        assert_eq!(log.records.len(), 8);
        assert!(log.records[5..].iter().all(|r| r.fault));
    }

    #[test]
    fn protocol_lines() {
        let mut d = LoopbackDriver::new(vec![0.5; 16], 1.0, 0.05);
        assert!(handle_bridge_line(&mut d, "READ", 16).starts_with("STATE 0 0.5"));
        assert_eq!(handle_bridge_line(&mut d, "hello", 16), "ERR parse");
        assert_eq!(handle_bridge_line(&mut d, "WRITE 1 2", 16), "ERR parse");
        let w = format!("WRITE {}", vec!["0.25"; 16].join(" "));
        assert_eq!(handle_bridge_line(&mut d, &w, 16), "OK");
        let st = parse_state_line(&handle_bridge_line(&mut d, "READ", 16), 16).unwrap();
        assert_eq!(st.theta, vec![0.25; 16]);
        assert_eq!(st.timestamp, 0.05);
    }

    #[test]
    fn telemetry_header_layout() {
        let h = telemetry_header(16, 11);
        assert_eq!(h.len(), 2 + 16 * 3 + 11 * 3 + 1);
        assert_eq!(h[2], "theta0");
        assert_eq!(h[18], "l0");
        assert_eq!(h.last().unwrap(), "fault");
    }

    #[test]
    fn telemetry_round_trip() {
        let m = builtin_proto0();
        let mut d = LoopbackDriver::at_pose(&m, &[0.0; 11], 1.0, 0.05).unwrap();
        let stop = AtomicBool::new(false);
        let log = run_control_loop(&fast_cfg(), &m, &Policy::zero(&m), &mut d, Some(5), &stop, |_| {}).unwrap();
        let mut buf = Vec::new();
        write_telemetry_csv(&mut buf, &log.records, 16, 11).unwrap();
        let back = read_telemetry_csv(buf.as_slice(), 16, 11).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in back.iter().zip(&log.records) {
            assert_eq!((a.tick, a.t_read, a.fault), (b.tick, b.t_read, b.fault));
            assert_eq!((&a.theta, &a.l, &a.qhat), (&b.theta, &b.l, &b.qhat));
            assert_eq!((&a.action, &a.qbar, &a.theta_des), (&b.action, &b.qbar, &b.theta_des));
        }
        assert!(read_telemetry_csv(buf.as_slice(), 15, 11).is_err());
    }
}
