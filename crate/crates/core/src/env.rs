//! Batched in-hand rotation environment.
//!
//! Joint positions follow a PD servo toward the command `q̄`, which the
//! policy moves by at most `v_max·Δt` per step. The object is a ball resting
//! on a fingertip cradle: its spin is the least-squares rigid rotation that
//! best explains the tangential motion of the contacting fingertips, and it
//! falls freely once fewer than two fingertips hold it for a few substeps.
//!
//! Every environment draws its randomness from counter-based streams keyed by
//! (seed, env id, episode), so batched and serial stepping agree bit for bit.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handmodel::HandModel;
use crate::kinematics::{fingertip_states, FingertipState};
use crate::rngs::stream_rng;
use crate::trajectory::TrajectoryRow;

/// Number of past joint readings in the actor observation.
pub const HISTORY_DEPTH: usize = 5;

const STREAM_DOMAIN: u64 = 0;
const STREAM_POSE: u64 = 1;
const STREAM_OBS_NOISE: u64 = 2;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid env config: {0}")]
    Config(String),
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("expected {expected} action values, got {actual}")]
    ActionDimension { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn component(self, v: [f64; 3]) -> f64 {
        v[self.index()]
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(format!("unknown axis `{other}` (expected x, y or z)")),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(["x", "y", "z"][self.index()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Pos,
    Neg,
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pos" => Ok(Direction::Pos),
            "neg" => Ok(Direction::Neg),
            other => Err(format!("unknown direction `{other}` (expected pos or neg)")),
        }
    }
}

/// Desired rotation: axis plus sense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationTarget {
    pub axis: Axis,
    pub direction: Direction,
}

impl Default for RotationTarget {
    fn default() -> Self {
        Self {
            axis: Axis::Y,
            direction: Direction::Neg,
        }
    }
}

impl RotationTarget {
    /// `s` in the rotation term; +1 rewards negative rotation about the axis.
    pub fn sign(&self) -> f64 {
        match self.direction {
            Direction::Neg => 1.0,
            Direction::Pos => -1.0,
        }
    }

    /// Angular rate in the desired sense (positive = correct direction).
    pub fn rate_in_target(&self, omega: [f64; 3]) -> f64 {
        -self.sign() * self.axis.component(omega)
    }
}

/// `min(−s·ω + 1, 2, s·ω + 4)`.
pub fn rotation_term(omega_axis: f64, s: f64) -> f64 {
    (-s * omega_axis + 1.0).min(2.0).min(s * omega_axis + 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub rotation: f64,
    pub torque: f64,
    pub action: f64,
    pub drop: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            rotation: 0.01,
            torque: -0.02,
            action: -0.002,
            drop: -1.0,
        }
    }
}

/// Closed interval `[lo, hi]` sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrRange(pub f64, pub f64);

impl DrRange {
    pub fn fixed(v: f64) -> Self {
        Self(v, v)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.0 + (self.1 - self.0) * u
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.0..=self.1).contains(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrRanges {
    /// Actor observation noise σ, in normalized joint units.
    pub obs_noise: DrRange,
    pub joint_stiffness: DrRange,
    pub joint_damping: DrRange,
    pub tendon_stiffness: DrRange,
    pub tendon_damping: DrRange,
    pub joint_range: DrRange,
    pub hand_mass: DrRange,
    pub object_mass: DrRange,
    pub friction: DrRange,
    pub object_scale: DrRange,
}

impl Default for DrRanges {
    fn default() -> Self {
        Self {
            obs_noise: DrRange(0.005, 0.015),
            joint_stiffness: DrRange(0.8, 1.2),
            joint_damping: DrRange(0.8, 1.2),
            tendon_stiffness: DrRange(0.8, 1.2),
            tendon_damping: DrRange(0.8, 1.2),
            joint_range: DrRange(0.9, 1.1),
            hand_mass: DrRange(0.75, 1.25),
            object_mass: DrRange(0.75, 1.25),
            friction: DrRange(0.75, 1.25),
            object_scale: DrRange(0.9, 1.1),
        }
    }
}

impl DrRanges {
    /// Every range collapsed onto the nominal value, with no observation noise.
    pub fn nominal() -> Self {
        let one = DrRange::fixed(1.0);
        Self {
            obs_noise: DrRange::fixed(0.0),
            joint_stiffness: one,
            joint_damping: one,
            tendon_stiffness: one,
            tendon_damping: one,
            joint_range: one,
            hand_mass: one,
            object_mass: one,
            friction: one,
            object_scale: one,
        }
    }

    fn all(&self) -> [(&'static str, DrRange); 10] {
        [
            ("obs_noise", self.obs_noise),
            ("joint_stiffness", self.joint_stiffness),
            ("joint_damping", self.joint_damping),
            ("tendon_stiffness", self.tendon_stiffness),
            ("tendon_damping", self.tendon_damping),
            ("joint_range", self.joint_range),
            ("hand_mass", self.hand_mass),
            ("object_mass", self.object_mass),
            ("friction", self.friction),
            ("object_scale", self.object_scale),
        ]
    }
}

/// Physics parameters of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub obs_noise: f64,
    pub joint_stiffness: f64,
    pub joint_damping: f64,
    pub tendon_stiffness: f64,
    pub tendon_damping: f64,
    pub joint_range: f64,
    pub hand_mass: f64,
    pub object_mass: f64,
    pub friction: f64,
    pub object_scale: f64,
}

impl DomainParams {
    pub fn values(&self) -> [f64; 10] {
        [
            self.obs_noise,
            self.joint_stiffness,
            self.joint_damping,
            self.tendon_stiffness,
            self.tendon_damping,
            self.joint_range,
            self.hand_mass,
            self.object_mass,
            self.friction,
            self.object_scale,
        ]
    }
}

/// Draws each parameter uniformly from its range.
pub fn domain_randomize<R: Rng>(rng: &mut R, ranges: &DrRanges) -> DomainParams {
    DomainParams {
        obs_noise: ranges.obs_noise.sample(rng),
        joint_stiffness: ranges.joint_stiffness.sample(rng),
        joint_damping: ranges.joint_damping.sample(rng),
        tendon_stiffness: ranges.tendon_stiffness.sample(rng),
        tendon_damping: ranges.tendon_damping.sample(rng),
        joint_range: ranges.joint_range.sample(rng),
        hand_mass: ranges.hand_mass.sample(rng),
        object_mass: ranges.object_mass.sample(rng),
        friction: ranges.friction.sample(rng),
        object_scale: ranges.object_scale.sample(rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// Spin the ball about the target axis.
    BallRotation,
    /// Toy task: reward = −‖q − target‖₂, no object.
    JointTracking { target: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BallConfig {
    /// Nominal radius (m), scaled by the object-scale parameter.
    pub radius: f64,
    /// A fingertip touches the ball when closer than `radius + margin` to
    /// its center.
    pub contact_margin: f64,
    /// Penalty-spring stiffness for fingertip forces (N/m).
    pub contact_stiffness: f64,
    /// First-order lag of the ball center toward the cradle (s), scaled by
    /// the object-mass parameter.
    pub lag_time_constant: f64,
    pub gravity: f64,
    /// Substeps with fewer than two contacts before free fall.
    pub free_fall_after: u32,
    /// Half-width of the uniform perturbation of the rest pose at reset.
    pub reset_noise: f64,
}

impl Default for BallConfig {
    fn default() -> Self {
        Self {
            radius: 0.035,
            contact_margin: 0.012,
            contact_stiffness: 200.0,
            lag_time_constant: 0.05,
            gravity: 9.81,
            free_fall_after: 5,
            reset_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub sim_rate_hz: f64,
    pub substeps: u32,
    /// Max joint command speed (rad/s).
    pub v_max: f64,
    pub drop_distance: f64,
    pub target: RotationTarget,
    /// Factor applied to joint readings before they enter the actor
    /// observation.
    pub obs_scale: f64,
    pub reward: RewardWeights,
    pub domain_randomization: bool,
    pub randomization: DrRanges,
    /// Policy steps per episode.
    pub episode_length: u64,
    /// PD gains of the joint servo (N·m/rad, N·m·s/rad).
    pub kp: f64,
    pub kd: f64,
    /// Per-joint inertia proxy (kg·m²), scaled by the hand-mass parameter.
    pub joint_inertia: f64,
    pub history_depth: usize,
    pub task: Task,
    pub ball: BallConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sim_rate_hz: 60.0,
            substeps: 3,
            v_max: 5.0,
            drop_distance: 0.24,
            target: RotationTarget::default(),
            obs_scale: 1.0,
            reward: RewardWeights::default(),
            domain_randomization: true,
            randomization: DrRanges::default(),
            episode_length: 400,
            kp: 0.5,
            kd: 0.05,
            joint_inertia: 0.002,
            history_depth: HISTORY_DEPTH,
            task: Task::BallRotation,
            ball: BallConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn sim_dt(&self) -> f64 {
        1.0 / self.sim_rate_hz
    }

    /// Policy period Δt = substeps / sim rate.
    pub fn policy_dt(&self) -> f64 {
        f64::from(self.substeps) / self.sim_rate_hz
    }

    pub fn effective_ranges(&self) -> DrRanges {
        if self.domain_randomization {
            self.randomization
        } else {
            DrRanges::nominal()
        }
    }

    pub fn validate(&self, model: &HandModel) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        if !(self.sim_rate_hz > 0.0) {
            return bad(format!("sim rate must be positive, got {}", self.sim_rate_hz));
        }
        if self.substeps < 1 {
            return bad("substeps must be >= 1".into());
        }
        if self.history_depth != HISTORY_DEPTH {
            return bad(format!("history depth must be {HISTORY_DEPTH}, got {}", self.history_depth));
        }
        if !(self.v_max > 0.0 && self.drop_distance > 0.0) {
            return bad("v_max and drop distance must be positive".into());
        }
        if !(self.obs_scale > 0.0 && self.obs_scale <= 1.0) {
            return bad(format!("obs scale must be in (0, 1], got {}", self.obs_scale));
        }
        if !(self.kp >= 0.0 && self.kd >= 0.0 && self.joint_inertia > 0.0) {
            return bad("servo gains must be >= 0 and inertia > 0".into());
        }
        if self.episode_length == 0 {
            return bad("episode length must be positive".into());
        }
        for (name, r) in self.randomization.all() {
            if !(r.0 <= r.1) {
                return bad(format!("randomization range `{name}` has lo > hi"));
            }
        }
        if let Task::JointTracking { target } = &self.task {
            if target.len() != model.n_actuated() {
                return bad(format!(
                    "tracking target needs {} values, got {}",
                    model.n_actuated(),
                    target.len()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallState {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub linear_velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub seed: u64,
    pub env_id: u64,
    pub episode: u64,
    /// Policy steps taken this episode.
    pub step: u64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub qbar: Vec<f64>,
    pub tau: Vec<f64>,
    pub ball: BallState,
    /// Angular velocity from differencing the ball orientation over the last
    /// policy step.
    pub omega_measured: Vector3<f64>,
    /// Joint readings, oldest first.
    pub history: Vec<Vec<f64>>,
    pub prev_action: Vec<f64>,
    pub domain: DomainParams,
    pub x_hand: Vector3<f64>,
    /// Force on the ball at each fingertip (zero when not touching).
    pub tip_forces: Vec<Vector3<f64>>,
    pub contacts: usize,
    pub low_contact_substeps: u32,
    pub free_fall: bool,
    /// Joint limits after range randomization.
    pub physical_ranges: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub actor: Vec<f64>,
    pub critic: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardBreakdown {
    pub rotation: f64,
    pub torque: f64,
    pub action: f64,
    pub drop: f64,
    /// −‖q − target‖ on the joint-tracking task, zero otherwise.
    pub tracking: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    pub dropped: bool,
    pub timeout: bool,
    /// Non-finite state detected; the env was reset.
    pub fault: bool,
    /// Ball angular rate in the desired sense.
    pub omega_target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub obs: Observation,
    pub reward: RewardBreakdown,
    pub done: bool,
    pub info: StepInfo,
    /// Snapshot of the post-step (pre-reset) state for trajectory logs.
    pub row: TrajectoryRow,
    /// Observation of the finished episode's last state when a batch reset
    /// replaced `obs`.
    pub final_obs: Option<Observation>,
}

pub fn actor_obs_dim(n_joints: usize, history_depth: usize) -> usize {
    n_joints * (2 + history_depth)
}

pub fn critic_obs_dim(n_joints: usize, n_tips: usize) -> usize {
    5 * n_joints + 13 + n_tips * (3 + 4 + 3 + 3 + 3)
}

fn normalize(q: f64, (lo, hi): (f64, f64)) -> f64 {
    2.0 * (q - lo) / (hi - lo) - 1.0
}

/// Actor input from proprioceptive data only:
/// `[norm(q̄); norm(scale·h_oldest) … norm(scale·h_newest); a_prev]`.
pub fn actor_observation(
    qbar: &[f64],
    history: &[Vec<f64>],
    prev_action: &[f64],
    ranges: &[(f64, f64)],
    obs_scale: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(qbar.len() * (2 + history.len()));
    out.extend(qbar.iter().zip(ranges).map(|(&q, &r)| normalize(q, r)));
    for reading in history {
        out.extend(reading.iter().zip(ranges).map(|(&q, &r)| normalize(obs_scale * q, r)));
    }
    out.extend_from_slice(prev_action);
    out
}

/// Integrates `q̄ ← clip(q̄ + v_max·Δt·clip(a, −1, 1), q_min, q_max)`.
pub fn apply_action(qbar: &mut [f64], action: &[f64], ranges: &[(f64, f64)], v_max: f64, dt: f64) {
    for ((qb, &a), &(lo, hi)) in qbar.iter_mut().zip(action).zip(ranges) {
        let a = a.clamp(-1.0, 1.0);
        *qb = (*qb + v_max * dt * a).clamp(lo, hi);
    }
}

/// World-frame angular velocity that carries `prev` to `now` in `dt`, using
/// the shortest arc.
pub fn numerical_angular_velocity(
    prev: &UnitQuaternion<f64>,
    now: &UnitQuaternion<f64>,
    dt: f64,
) -> Result<Vector3<f64>, EnvError> {
    if !(dt > 0.0) {
        return Err(EnvError::NonPositiveDt(dt));
    }
    let delta = (now * prev.inverse()).into_inner();
    let (mut w, mut v) = (delta.w, delta.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s == 0.0 {
        return Ok(Vector3::zeros());
    }
    let angle = 2.0 * s.atan2(w);
    Ok(v * (angle / (s * dt)))
}

/// The environment definition shared by all instances: hand, config.
#[derive(Debug, Clone)]
pub struct HandEnv {
    pub model: HandModel,
    pub config: EnvConfig,
}

impl HandEnv {
    pub fn new(model: HandModel, config: EnvConfig) -> Result<Self, EnvError> {
        config.validate(&model)?;
        Ok(Self { model, config })
    }

    pub fn n_joints(&self) -> usize {
        self.model.n_actuated()
    }

    pub fn actor_dim(&self) -> usize {
        actor_obs_dim(self.n_joints(), self.config.history_depth)
    }

    pub fn critic_dim(&self) -> usize {
        critic_obs_dim(self.n_joints(), self.model.n_fingertips())
    }

    pub fn ranges(&self) -> Vec<(f64, f64)> {
        self.model.actuated_ranges()
    }

    /// Fresh episode for one env; deterministic in (seed, env id, episode).
    pub fn reset(&self, seed: u64, env_id: u64, episode: u64) -> EnvState {
        let cfg = &self.config;
        let domain = domain_randomize(
            &mut stream_rng(seed, &[env_id, episode, STREAM_DOMAIN]),
            &cfg.effective_ranges(),
        );
        let ranges = self.ranges();
        let mut pose_rng = stream_rng(seed, &[env_id, episode, STREAM_POSE]);
        let q: Vec<f64> = self
            .model
            .rest_pose()
            .iter()
            .zip(&ranges)
            .map(|(&r, &(lo, hi))| {
                let u: f64 = pose_rng.random_range(-1.0..=1.0);
                (r + cfg.ball.reset_noise * u).clamp(lo, hi)
            })
            .collect();
        let physical_ranges = ranges
            .iter()
            .map(|&(lo, hi)| {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo) * domain.joint_range;
                (mid - half, mid + half)
            })
            .collect();
        let n = q.len();
        let radius = cfg.ball.radius * domain.object_scale;
        let tips = fingertip_states(&self.model, &q, &vec![0.0; n]).expect("model dimension");
        let tip_pos: Vec<Vector3<f64>> = tips.iter().map(|t| t.pose.translation).collect();
        let position = cradle_target(&tip_pos, radius);

        let mut state = EnvState {
            seed,
            env_id,
            episode,
            step: 0,
            qdot: vec![0.0; n],
            qbar: q.clone(),
            tau: vec![0.0; n],
            ball: BallState {
                position,
                orientation: UnitQuaternion::identity(),
                linear_velocity: Vector3::zeros(),
                angular_velocity: Vector3::zeros(),
                radius,
            },
            omega_measured: Vector3::zeros(),
            history: vec![q.clone(); cfg.history_depth],
            prev_action: vec![0.0; n],
            domain,
            x_hand: Vector3::zeros(),
            tip_forces: vec![Vector3::zeros(); tips.len()],
            contacts: 0,
            low_contact_substeps: 0,
            free_fall: false,
            physical_ranges,
            q,
        };
        if matches!(cfg.task, Task::BallRotation) {
            update_contacts(&mut state, &tips, &cfg.ball);
        }
        state
    }

    /// Advances one policy step: one action, `substeps` physics steps.
    pub fn step(&self, state: &mut EnvState, action: &[f64]) -> Result<StepOutput, EnvError> {
        let n = self.n_joints();
        if action.len() != n {
            return Err(EnvError::ActionDimension {
                expected: n,
                actual: action.len(),
            });
        }
        let cfg = &self.config;
        let ranges = self.ranges();
        let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        apply_action(&mut state.qbar, &a, &ranges, cfg.v_max, cfg.policy_dt());

        let quat_start = state.ball.orientation;
        let dt = cfg.sim_dt();
        for _ in 0..cfg.substeps {
            self.joint_substep(state, dt);
            if matches!(cfg.task, Task::BallRotation) {
                self.ball_substep(state, dt);
            }
        }
        state.omega_measured = numerical_angular_velocity(&quat_start, &state.ball.orientation, cfg.policy_dt())
            .unwrap_or_else(|_| Vector3::zeros());

        // Joint reading with observation noise (σ in normalized units).
        let mut noise_rng = stream_rng(
            state.seed,
            &[state.env_id, state.episode, STREAM_OBS_NOISE, state.step],
        );
        let sigma = state.domain.obs_noise;
        let reading: Vec<f64> = state
            .q
            .iter()
            .zip(&ranges)
            .map(|(&q, &(lo, hi))| {
                if sigma > 0.0 {
                    let z: f64 = noise_rng.sample(StandardNormal);
                    q + z * sigma * 0.5 * (hi - lo)
                } else {
                    q
                }
            })
            .collect();
        state.history.remove(0);
        state.history.push(reading);
        state.prev_action.clone_from(&a);
        state.step += 1;

        let reward = self.compute_reward(state, &a);
        let dropped = reward.drop > 0.0;
        let timeout = state.step >= cfg.episode_length;
        let mut info = StepInfo {
            dropped,
            timeout,
            fault: false,
            omega_target: cfg.target.rate_in_target(state.omega_measured.into()),
        };

        if !state_is_finite(state) {
            info.fault = true;
            let (seed, env_id, episode) = (state.seed, state.env_id, state.episode + 1);
            *state = self.reset(seed, env_id, episode);
            let obs = self.observe(state);
            let row = self.trajectory_row(state, &RewardBreakdown::default(), true);
            return Ok(StepOutput {
                obs,
                reward: RewardBreakdown::default(),
                done: true,
                info,
                row,
                final_obs: None,
            });
        }

        let done = dropped || timeout;
        let obs = self.observe(state);
        let row = self.trajectory_row(state, &reward, done);
        Ok(StepOutput {
            obs,
            reward,
            done,
            info,
            row,
            final_obs: None,
        })
    }

    fn joint_substep(&self, state: &mut EnvState, dt: f64) {
        let cfg = &self.config;
        let d = &state.domain;
        let kp = cfg.kp * d.joint_stiffness * d.tendon_stiffness;
        let kd = cfg.kd * d.joint_damping * d.tendon_damping;
        let inertia = cfg.joint_inertia * d.hand_mass;
        for j in 0..state.q.len() {
            let tau = kp * (state.qbar[j] - state.q[j]) - kd * state.qdot[j];
            state.tau[j] = tau;
            state.qdot[j] += dt * tau / inertia;
            state.q[j] += dt * state.qdot[j];
            let (lo, hi) = state.physical_ranges[j];
            if state.q[j] < lo || state.q[j] > hi {
                state.q[j] = state.q[j].clamp(lo, hi);
                state.qdot[j] = 0.0;
            }
        }
    }

    fn ball_substep(&self, state: &mut EnvState, dt: f64) {
        let bc = &self.config.ball;
        let tips = fingertip_states(&self.model, &state.q, &state.qdot).expect("model dimension");
        let contacting = update_contacts(state, &tips, bc);

        if state.contacts >= 2 {
            state.low_contact_substeps = 0;
        } else {
            state.low_contact_substeps += 1;
            if state.low_contact_substeps > bc.free_fall_after {
                state.free_fall = true;
            }
        }

        let ball = &mut state.ball;
        if state.free_fall {
            ball.linear_velocity.y -= bc.gravity * dt;
            ball.position += ball.linear_velocity * dt;
        } else if !contacting.is_empty() {
            let fit = fit_rotation(&tips, &contacting, ball);
            ball.angular_velocity = fit * state.domain.friction;
            let pos: Vec<Vector3<f64>> = contacting.iter().map(|&i| tips[i].pose.translation).collect();
            let target = cradle_target(&pos, ball.radius);
            let tc = bc.lag_time_constant * state.domain.object_mass;
            let gain = 1.0 - (-dt / tc).exp();
            let next = ball.position + (target - ball.position) * gain;
            ball.linear_velocity = (next - ball.position) / dt;
            ball.position = next;
        }
        let spin = UnitQuaternion::from_scaled_axis(ball.angular_velocity * dt);
        ball.orientation = UnitQuaternion::new_normalize((spin * ball.orientation).into_inner());
    }

    /// Table-style reward; on the tracking task only the tracking term counts.
    pub fn compute_reward(&self, state: &EnvState, action: &[f64]) -> RewardBreakdown {
        let w = &self.config.reward;
        match &self.config.task {
            Task::JointTracking { target } => {
                let err = state
                    .q
                    .iter()
                    .zip(target)
                    .map(|(q, t)| (q - t).powi(2))
                    .sum::<f64>()
                    .sqrt();
                RewardBreakdown {
                    tracking: -err,
                    total: -err,
                    ..RewardBreakdown::default()
                }
            }
            Task::BallRotation => {
                let target = self.config.target;
                let rotation = rotation_term(target.axis.component(state.omega_measured.into()), target.sign());
                let torque = l2(&state.tau);
                let action = l2(action);
                let drop = if (state.ball.position - state.x_hand).norm() > self.config.drop_distance {
                    1.0
                } else {
                    0.0
                };
                RewardBreakdown {
                    rotation,
                    torque,
                    action,
                    drop,
                    tracking: 0.0,
                    total: w.rotation * rotation + w.torque * torque + w.action * action + w.drop * drop,
                }
            }
        }
    }

    pub fn build_actor_observation(&self, state: &EnvState) -> Vec<f64> {
        actor_observation(
            &state.qbar,
            &state.history,
            &state.prev_action,
            &self.ranges(),
            self.config.obs_scale,
        )
    }

    /// Privileged, noise-free critic input in table order.
    pub fn build_critic_observation(&self, state: &EnvState) -> Vec<f64> {
        let ranges = self.ranges();
        let mut out = Vec::with_capacity(self.critic_dim());
        out.extend(state.q.iter().zip(&ranges).map(|(&q, &r)| normalize(q, r)));
        out.extend(state.qbar.iter().zip(&ranges).map(|(&q, &r)| normalize(q, r)));
        out.extend_from_slice(&state.qdot);
        out.extend_from_slice(&state.tau);
        let ball = &state.ball;
        out.extend((ball.position - state.x_hand).iter());
        let bq = ball.orientation.quaternion();
        out.extend([bq.w, bq.i, bq.j, bq.k]);
        out.extend(ball.linear_velocity.iter());
        out.extend(state.omega_measured.iter());
        let tips: Vec<FingertipState> = fingertip_states(&self.model, &state.q, &state.qdot).expect("model dimension");
        for t in &tips {
            out.extend(t.pose.translation.iter());
        }
        for t in &tips {
            out.extend(t.pose.quat_wxyz());
        }
        for t in &tips {
            out.extend(t.linear_velocity.iter());
        }
        for t in &tips {
            out.extend(t.angular_velocity.iter());
        }
        for f in &state.tip_forces {
            out.extend(f.iter());
        }
        out.extend_from_slice(&state.prev_action);
        out
    }

    pub fn observe(&self, state: &EnvState) -> Observation {
        Observation {
            actor: self.build_actor_observation(state),
            critic: self.build_critic_observation(state),
        }
    }

    pub fn trajectory_row(&self, state: &EnvState, reward: &RewardBreakdown, done: bool) -> TrajectoryRow {
        let q = state.ball.orientation.quaternion();
        TrajectoryRow {
            step: state.step,
            env: state.env_id as usize,
            q: state.q.clone(),
            qbar: state.qbar.clone(),
            ball_quat: [q.w, q.i, q.j, q.k],
            omega: state.omega_measured.into(),
            rot_term: reward.rotation,
            total_reward: reward.total,
            done,
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn state_is_finite(s: &EnvState) -> bool {
    s.q.iter().chain(&s.qdot).chain(&s.tau).all(|v| v.is_finite())
        && s.ball.position.iter().all(|v| v.is_finite())
        && s.ball.orientation.coords.iter().all(|v| v.is_finite())
        && s.omega_measured.iter().all(|v| v.is_finite())
}

/// Rest point of the ball on a set of fingertips: above their centroid (+y)
/// at the height where the average tip sits on the surface.
fn cradle_target(tips: &[Vector3<f64>], radius: f64) -> Vector3<f64> {
    let n = tips.len() as f64;
    let centroid = tips.iter().fold(Vector3::zeros(), |acc, t| acc + t) / n;
    let spread = tips
        .iter()
        .map(|t| {
            let d = t - centroid;
            d.x * d.x + d.z * d.z
        })
        .sum::<f64>()
        / n;
    let h = (radius * radius - spread).max(0.25 * radius * radius).sqrt();
    centroid + Vector3::new(0.0, h, 0.0)
}

/// Recomputes contact set and penalty forces; returns contacting tip indices.
fn update_contacts(state: &mut EnvState, tips: &[FingertipState], bc: &BallConfig) -> Vec<usize> {
    let ball = &state.ball;
    let reach = ball.radius + bc.contact_margin;
    let mut contacting = Vec::new();
    for (i, t) in tips.iter().enumerate() {
        let r = ball.position - t.pose.translation;
        let dist = r.norm();
        if dist < reach && dist > 0.0 {
            contacting.push(i);
            state.tip_forces[i] = r / dist * (bc.contact_stiffness * (reach - dist));
        } else {
            state.tip_forces[i] = Vector3::zeros();
        }
    }
    state.contacts = contacting.len();
    contacting
}

/// Least-squares ω with `ω × r_i ≈ v_i` over the contacts, where `r_i` runs
/// from the ball center to the fingertip and `v_i` is the tangential part of
/// the fingertip velocity. The cradle drift of the center is ignored.
fn fit_rotation(tips: &[FingertipState], contacting: &[usize], ball: &BallState) -> Vector3<f64> {
    let mut m = Matrix3::zeros();
    let mut b = Vector3::zeros();
    let mut scale = 0.0;
    for &i in contacting {
        let r = tips[i].pose.translation - ball.position;
        let rr = r.norm_squared();
        if rr == 0.0 {
            continue;
        }
        let v = tips[i].linear_velocity;
        let v_t = v - r * (v.dot(&r) / rr);
        m += Matrix3::identity() * rr - r * r.transpose();
        b += r.cross(&v_t);
        scale += rr;
    }
    if scale == 0.0 {
        return Vector3::zeros();
    }
    m += Matrix3::identity() * (1e-9 * scale);
    m.try_inverse().map(|inv| inv * b).unwrap_or_else(Vector3::zeros)
}

/// A batch of independent environments stepped data-parallel.
#[derive(Debug, Clone)]
pub struct VecEnv {
    pub env: HandEnv,
    pub seed: u64,
    pub states: Vec<EnvState>,
}

impl VecEnv {
    pub fn new(env: HandEnv, n: usize, seed: u64) -> Self {
        let states = (0..n as u64).map(|i| env.reset(seed, i, 0)).collect();
        Self { env, seed, states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.states.par_iter().map(|s| self.env.observe(s)).collect()
    }

    fn step_one(env: &HandEnv, state: &mut EnvState, action: &[f64]) -> Result<StepOutput, EnvError> {
        let mut out = env.step(state, action)?;
        if out.done && !out.info.fault {
            *state = env.reset(state.seed, state.env_id, state.episode + 1);
            out.final_obs = Some(std::mem::replace(&mut out.obs, env.observe(state)));
        }
        Ok(out)
    }

    /// Steps every env in parallel; finished envs are reset and their
    /// returned observation is the first of the new episode.
    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<Vec<StepOutput>, EnvError> {
        let env = &self.env;
        self.states
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|(s, a)| Self::step_one(env, s, a))
            .collect()
    }

    /// Same as [`VecEnv::step`] on the calling thread.
    pub fn step_serial(&mut self, actions: &[Vec<f64>]) -> Result<Vec<StepOutput>, EnvError> {
        let env = &self.env;
        self.states
            .iter_mut()
            .zip(actions)
            .map(|(s, a)| Self::step_one(env, s, a))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use nalgebra::Unit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::handmodel::builtin_proto0;

    fn env(config: EnvConfig) -> HandEnv {
        HandEnv::new(builtin_proto0(), config).unwrap()
    }

    fn nominal() -> EnvConfig {
        EnvConfig {
            domain_randomization: false,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn rotation_term_spot_values() {
        assert_eq!(rotation_term(-1.5, 1.0), 2.0);
        assert_eq!(rotation_term(0.0, 1.0), 1.0);
        assert_eq!(rotation_term(1.0, 1.0), 0.0);
        assert_eq!(rotation_term(-3.0, 1.0), 1.0);
        assert_eq!(rotation_term(1.5, -1.0), 2.0);
    }

    #[test]
    fn plateau_weighted_contribution() {
        let e = env(nominal());
        let mut s = e.reset(1, 0, 0);
        s.omega_measured = Vector3::new(0.0, -1.5, 0.0);
        s.tau = vec![0.0; 11];
        let r = e.compute_reward(&s, &[0.0; 11]);
        assert_eq!(r.rotation, 2.0);
        assert!((r.total - 0.02).abs() < 1e-15);
        assert_eq!((r.torque, r.action, r.drop), (0.0, 0.0, 0.0));
    }

    #[test]
    fn apply_action_contract() {
        let ranges = vec![(-1.0, 1.0); 3];
        let mut qb = vec![0.0, 0.5, 1.0];
        apply_action(&mut qb, &[0.0; 3], &ranges, 5.0, 0.05);
        assert_eq!(qb, vec![0.0, 0.5, 1.0]);
        apply_action(&mut qb, &[1.0, 1.0, 1.0], &ranges, 5.0, 0.05);
        assert_eq!(qb, vec![0.25, 0.75, 1.0]);
        apply_action(&mut qb, &[-7.0, 0.0, 0.0], &ranges, 5.0, 0.05);
        assert_eq!(qb[0], 0.0);
    }

    #[test]
    fn angular_velocity_identities() {
        let q = UnitQuaternion::from_euler_angles(0.3, -0.2, 0.9);
        assert_eq!(numerical_angular_velocity(&q, &q, 0.05).unwrap(), Vector3::zeros());
        let prev = UnitQuaternion::identity();
        let now = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.1);
        let w = numerical_angular_velocity(&prev, &now, 0.05).unwrap();
        assert!((w - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-9);
        let back = numerical_angular_velocity(&now, &prev, 0.05).unwrap();
        assert_eq!(back, -w);
        assert_eq!(
            numerical_angular_velocity(&prev, &now, 0.0),
            Err(EnvError::NonPositiveDt(0.0))
        );
    }

    #[test]
    fn constant_rate_recovered() {
        for &rate in &[0.5, -3.0, 40.0] {
            let axis = Unit::new_normalize(Vector3::new(0.3, -0.5, 0.8));
            let dt: f64 = 0.05;
            let base = UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3);
            let now = UnitQuaternion::from_axis_angle(&axis, rate * dt) * base;
            if (rate * dt).abs() >= PI {
                continue;
            }
            let w = numerical_angular_velocity(&base, &now, dt).unwrap();
            assert!((w - axis.into_inner() * rate).norm() < 1e-9, "rate {rate}");
        }
    }

    #[test]
    fn reset_is_deterministic_and_safe() {
        let e = env(EnvConfig::default());
        let a = e.reset(11, 3, 0);
        let b = e.reset(11, 3, 0);
        assert_eq!(a, b);
        assert_ne!(a.domain, e.reset(11, 3, 1).domain);
        assert!((a.ball.position - a.x_hand).norm() < 0.24);
        assert!(a.contacts >= 2, "contacts at reset: {}", a.contacts);
        assert_eq!(a.history.len(), 5);
        assert!(a.history.iter().all(|h| *h == a.q));
    }

    #[test]
    fn collapsed_ranges_give_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = domain_randomize(&mut rng, &DrRanges::nominal());
        assert_eq!(d.values()[1..], [1.0; 9]);
        assert_eq!(d.obs_noise, 0.0);
    }

    #[test]
    fn observation_dims() {
        let e = env(nominal());
        let s = e.reset(0, 0, 0);
        let o = e.observe(&s);
        assert_eq!(o.actor.len(), 77);
        assert_eq!(o.critic.len(), 148);
        assert_eq!(e.actor_dim(), 77);
        assert_eq!(e.critic_dim(), 148);
    }

    #[test]
    fn zero_action_from_rest_keeps_penalties_small() {
        let e = env(nominal());
        let mut s = e.reset(5, 0, 0);
        // Settle the servo onto its command first.
        let out = e.step(&mut s, &[0.0; 11]).unwrap();
        assert!(out.reward.action == 0.0);
        assert!(out.reward.torque < 1e-2, "torque {}", out.reward.torque);
        assert!((out.reward.rotation - 1.0).abs() < 0.05, "rot {}", out.reward.rotation);
    }

    #[test]
    fn removed_ball_drops_once() {
        let e = env(nominal());
        let mut s = e.reset(5, 0, 0);
        s.ball.position = Vector3::new(0.0, 0.5, 0.0);
        let out = e.step(&mut s, &[0.0; 11]).unwrap();
        assert!(out.done);
        assert_eq!(out.reward.drop, 1.0);
        assert!((out.reward.total - (0.01 * out.reward.rotation - 0.02 * out.reward.torque - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_state_resets_with_flag() {
        let e = env(nominal());
        let mut s = e.reset(5, 2, 0);
        s.qdot[0] = f64::NAN;
        let out = e.step(&mut s, &[0.0; 11]).unwrap();
        assert!(out.info.fault && out.done);
        assert_eq!(s.episode, 1);
        assert!(s.q.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn obs_noise_only_touches_actor() {
        let mut cfg = nominal();
        cfg.domain_randomization = true;
        cfg.randomization = DrRanges::nominal();
        cfg.randomization.obs_noise = DrRange::fixed(0.05);
        let noisy = env(cfg);
        let clean = env(nominal());
        let mut a = noisy.reset(3, 0, 0);
        let mut b = clean.reset(3, 0, 0);
        assert_eq!(a.q, b.q);
        let act = vec![0.3; 11];
        let oa = noisy.step(&mut a, &act).unwrap().obs;
        let ob = clean.step(&mut b, &act).unwrap().obs;
        assert_eq!(oa.critic, ob.critic);
        assert_ne!(oa.actor, ob.actor);
    }

    #[test]
    fn normalization_endpoints() {
        let e = env(nominal());
        let mut s = e.reset(0, 0, 0);
        let ranges = e.ranges();
        s.qbar = ranges.iter().map(|r| r.1).collect();
        s.history = vec![ranges.iter().map(|r| r.0).collect(); 5];
        let o = e.build_actor_observation(&s);
        assert!(o[..11].iter().all(|&v| v == 1.0));
        assert!(o[11..66].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn half_scale_halves_readings() {
        let cfg = EnvConfig {
            obs_scale: 0.5,
            ..nominal()
        };
        let e = env(cfg);
        let s = e.reset(0, 0, 0);
        let o = e.build_actor_observation(&s);
        let ranges = e.ranges();
        for j in 0..11 {
            let expected = 2.0 * (0.5 * s.q[j] - ranges[j].0) / (ranges[j].1 - ranges[j].0) - 1.0;
            assert_eq!(o[11 + 4 * 11 + j], expected);
        }
    }

    #[test]
    fn tracking_task_reward() {
        let cfg = EnvConfig {
            task: Task::JointTracking { target: vec![0.2; 11] },
            ..nominal()
        };
        let e = env(cfg);
        let mut s = e.reset(0, 0, 0);
        s.q = vec![0.2; 11];
        assert_eq!(e.compute_reward(&s, &[0.5; 11]).total, 0.0);
        s.q[0] = 0.5;
        assert!((e.compute_reward(&s, &[0.0; 11]).total + 0.3).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let m = builtin_proto0();
        let c = EnvConfig {
            history_depth: 4,
            ..EnvConfig::default()
        };
        assert!(c.validate(&m).is_err());
        let mut c = EnvConfig::default();
        c.randomization.friction = DrRange(1.2, 0.8);
        assert!(c.validate(&m).is_err());
        let c = EnvConfig {
            task: Task::JointTracking { target: vec![0.0; 3] },
            ..EnvConfig::default()
        };
        assert!(c.validate(&m).is_err());
    }
}
