//! Rollout collection, the training loop and policy evaluation.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::policy::{policy_sample, PolicyHead};
use super::ppo::{ppo_update, ActorCritic, Optimizers, PpoStats, RolloutBuffer, TrainConfig};
use super::RlError;
use crate::env::{HandEnv, Observation, VecEnv};
use crate::rngs::stream_rng;
use crate::trajectory::TrajectoryRow;

const STREAM_ACTOR_INIT: u64 = 100;
const STREAM_CRITIC_INIT: u64 = 101;
const STREAM_SAMPLING: u64 = 102;
const STREAM_SHUFFLE: u64 = 103;

pub const TRAIN_LOG_HEADER: [&str; 6] = [
    "iter",
    "mean_reward",
    "mean_omega_target",
    "clip_frac",
    "actor_loss",
    "critic_loss",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iter: u64,
    pub mean_reward: f64,
    pub mean_omega_target: f64,
    pub clip_frac: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

pub fn write_train_log<W: Write>(out: W, rows: &[TrainLogRow]) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRAIN_LOG_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_train_log<R: std::io::Read>(input: R) -> Result<Vec<TrainLogRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Per-sample actor and critic inputs as row-major batches.
fn stack(obs: &[Observation]) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::new();
    let mut c = Vec::new();
    for o in obs {
        a.extend_from_slice(&o.actor);
        c.extend_from_slice(&o.critic);
    }
    (a, c)
}

pub fn init_actor_critic(env: &HandEnv, cfg: &TrainConfig) -> ActorCritic {
    let n_act = env.n_joints();
    let mut adims = vec![env.actor_dim()];
    adims.extend(&cfg.actor_hidden);
    adims.push(n_act);
    let mut cdims = vec![env.critic_dim()];
    cdims.extend(&cfg.critic_hidden);
    cdims.push(1);
    ActorCritic {
        actor: Mlp::new(&adims, 0.01, &mut stream_rng(cfg.seed, &[STREAM_ACTOR_INIT])),
        head: PolicyHead::new(n_act, cfg.init_log_std),
        critic: Mlp::new(&cdims, 1.0, &mut stream_rng(cfg.seed, &[STREAM_CRITIC_INIT])),
        value_norm: Default::default(),
    }
}

/// Per-step means over one rollout, before any bootstrapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSummary {
    pub mean_reward: f64,
    pub mean_omega_target: f64,
}

pub struct Trainer {
    pub venv: VecEnv,
    pub model: ActorCritic,
    pub opt: Optimizers,
    pub cfg: TrainConfig,
    pub iter: u64,
    obs: Vec<Observation>,
}

impl Trainer {
    pub fn new(env: HandEnv, cfg: TrainConfig) -> Result<Self, RlError> {
        cfg.validate()?;
        let model = init_actor_critic(&env, &cfg);
        Ok(Self::with_model(env, cfg, model))
    }

    pub fn with_model(env: HandEnv, cfg: TrainConfig, model: ActorCritic) -> Self {
        let venv = VecEnv::new(env, cfg.num_envs, cfg.seed);
        let obs = venv.observations();
        let opt = Optimizers::new(&model, cfg.learning_rate);
        Self {
            venv,
            model,
            opt,
            cfg,
            iter: 0,
            obs,
        }
    }

    /// Steps all envs for `rollout_len` steps with sampled actions.
    pub fn collect_rollout(&mut self) -> Result<(RolloutBuffer, RolloutSummary), RlError> {
        let env = &self.venv.env;
        let (n, t_len) = (self.cfg.num_envs, self.cfg.rollout_len);
        let mut buf = RolloutBuffer::new(t_len, n, env.actor_dim(), env.critic_dim(), env.n_joints());
        let mut rng = stream_rng(self.cfg.seed, &[STREAM_SAMPLING, self.iter]);
        let (mut omega_sum, mut raw_reward_sum) = (0.0, 0.0);
        for _ in 0..t_len {
            let (xa, xc) = stack(&self.obs);
            let (means, _) = self.model.actor.forward_batch(&xa, n)?;
            let vals = self.model.values(&xc, n)?;
            let na = buf.action_dim;
            let mut actions = Vec::with_capacity(n);
            for e in 0..n {
                let (a, lp) = policy_sample(&means[e * na..(e + 1) * na], &self.model.head, &mut rng);
                buf.actions.extend_from_slice(&a);
                buf.log_probs.push(lp);
                actions.push(a);
            }
            let outs = self
                .venv
                .step(&actions)
                .map_err(|source| RlError::Env { iteration: self.iter, source })?;
            buf.actor_obs.extend(xa);
            buf.critic_obs.extend(xc);
            buf.values.extend(vals);
            for (e, o) in outs.into_iter().enumerate() {
                let mut r = o.reward.total;
                // A timeout truncates rather than terminates: bootstrap it.
                if let (true, false, Some(last)) = (o.info.timeout, o.info.dropped, &o.final_obs) {
                    r += self.cfg.gamma * self.model.values(&last.critic, 1)?[0];
                }
                raw_reward_sum += o.reward.total;
                buf.rewards.push(r);
                buf.dones.push(o.done);
                omega_sum += o.info.omega_target;
                self.obs[e] = o.obs;
            }
        }
        let (_, xc) = stack(&self.obs);
        buf.last_values = self.model.values(&xc, n)?;
        buf.compute_advantages(self.cfg.gamma, self.cfg.lambda);
        let count = (n * t_len) as f64;
        Ok((
            buf,
            RolloutSummary {
                mean_reward: raw_reward_sum / count,
                mean_omega_target: omega_sum / count,
            },
        ))
    }

    pub fn iterate(&mut self) -> Result<(TrainLogRow, PpoStats), RlError> {
        let (buf, summary) = self.collect_rollout()?;
        let mut rng = stream_rng(self.cfg.seed, &[STREAM_SHUFFLE, self.iter]);
        let stats = ppo_update(&mut self.model, &mut self.opt, &buf, &self.cfg, &mut rng)?;
        let row = TrainLogRow {
            iter: self.iter,
            mean_reward: summary.mean_reward,
            mean_omega_target: summary.mean_omega_target,
            clip_frac: stats.clip_frac,
            actor_loss: stats.actor_loss,
            critic_loss: stats.critic_loss,
        };
        self.iter += 1;
        Ok((row, stats))
    }
}

/// Runs `cfg.iterations` rollout/update rounds. The callback sees every log
/// row together with the current weights (for checkpoints).
pub fn train(
    env: HandEnv,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&TrainLogRow, &ActorCritic),
) -> Result<(ActorCritic, Vec<TrainLogRow>), RlError> {
    let mut trainer = Trainer::new(env, cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.iterations as usize);
    for _ in 0..cfg.iterations {
        let (row, _) = trainer.iterate()?;
        on_iter(&row, &trainer.model);
        log.push(row);
    }
    Ok((trainer.model, log))
}

/// How actions are chosen during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum ActionSource<'a> {
    /// Deterministic actor mean.
    Mean(&'a Mlp),
    /// Sampled from the Gaussian head.
    Sample(&'a Mlp, &'a PolicyHead),
    /// Uniform in `[−1, 1]`, ignoring observations.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub rows: Vec<TrajectoryRow>,
    pub mean_reward: f64,
    pub mean_omega_target: f64,
}

/// Rolls `n_envs` envs forward `steps` policy steps; rows are ordered by
/// step, then env.
pub fn rollout(
    env: &HandEnv,
    source: ActionSource<'_>,
    n_envs: usize,
    steps: usize,
    seed: u64,
) -> Result<RolloutResult, RlError> {
    let mut venv = VecEnv::new(env.clone(), n_envs, seed);
    let mut obs = venv.observations();
    let mut rng = stream_rng(seed, &[STREAM_SAMPLING, u64::MAX]);
    let na = env.n_joints();
    let mut rows = Vec::with_capacity(n_envs * steps);
    let (mut rsum, mut wsum) = (0.0, 0.0);
    for t in 0..steps {
        let actions: Vec<Vec<f64>> = match source {
            ActionSource::Uniform => (0..n_envs)
                .map(|_| (0..na).map(|_| rng.random_range(-1.0..=1.0)).collect())
                .collect(),
            ActionSource::Mean(actor) | ActionSource::Sample(actor, _) => {
                let (xa, _) = stack(&obs);
                let (means, _) = actor.forward_batch(&xa, n_envs)?;
                (0..n_envs)
                    .map(|e| {
                        let m = &means[e * na..(e + 1) * na];
                        match source {
                            ActionSource::Sample(_, head) => policy_sample(m, head, &mut rng).0,
                            _ => m.to_vec(),
                        }
                    })
                    .collect()
            }
        };
        let outs = venv.step(&actions).map_err(|source| RlError::Env {
            iteration: t as u64,
            source,
        })?;
        for (e, o) in outs.into_iter().enumerate() {
            rsum += o.reward.total;
            wsum += o.info.omega_target;
            rows.push(o.row);
            obs[e] = o.obs;
        }
    }
    let n = (n_envs * steps).max(1) as f64;
    Ok(RolloutResult {
        rows,
        mean_reward: rsum / n,
        mean_omega_target: wsum / n,
    })
}
