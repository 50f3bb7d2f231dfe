//! Clipped-surrogate PPO over separate actor and critic networks.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::policy::{gaussian_log_prob, PolicyHead};
use super::RlError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub num_envs: usize,
    pub rollout_len: usize,
    pub iterations: u64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub init_log_std: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 = never).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_envs: 64,
            rollout_len: 64,
            iterations: 100,
            epochs: 4,
            minibatch_size: 1024,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            learning_rate: 3e-4,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            init_log_std: 0.0,
            actor_hidden: vec![512, 512, 256, 128],
            critic_hidden: vec![512, 512, 256, 128],
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.num_envs == 0 || self.rollout_len == 0 || self.epochs == 0 || self.minibatch_size == 0 {
            return bad("env count, rollout length, epochs and minibatch size must be positive");
        }
        if self.minibatch_size > self.num_envs * self.rollout_len {
            return bad("minibatch larger than the rollout");
        }
        if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0) {
            return bad("learning rate and max grad norm must be positive");
        }
        Ok(())
    }
}

/// Running mean and variance of value targets. The critic predicts
/// normalized values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueNorm {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for ValueNorm {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
            count: 0.0,
        }
    }
}

impl ValueNorm {
    /// Parallel-merge update with a new batch.
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if self.count == 0.0 {
            (self.mean, self.var, self.count) = (mean, var, n);
            return;
        }
        let total = self.count + n;
        let delta = mean - self.mean;
        let m2 = self.var * self.count + var * n + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.var = m2 / total;
        self.count = total;
    }

    fn std(&self) -> f64 {
        self.var.sqrt().max(1e-4)
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std()
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std() + self.mean
    }
}

/// Actor, its Gaussian head, and the critic.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub head: PolicyHead,
    pub critic: Mlp,
    pub value_norm: ValueNorm,
}

impl ActorCritic {
    /// Critic values in reward units for a row-major batch.
    pub fn values(&self, critic_obs: &[f64], batch: usize) -> Result<Vec<f64>, RlError> {
        let (v, _) = self.critic.forward_batch(critic_obs, batch)?;
        Ok(v.into_iter().map(|x| self.value_norm.denormalize(x)).collect())
    }
}

/// Samples laid out as `t·envs + e`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub steps: usize,
    pub envs: usize,
    pub actor_dim: usize,
    pub critic_dim: usize,
    pub action_dim: usize,
    pub actor_obs: Vec<f64>,
    pub critic_obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Critic value of the state after the last step, per env.
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(steps: usize, envs: usize, actor_dim: usize, critic_dim: usize, action_dim: usize) -> Self {
        let n = steps * envs;
        Self {
            steps,
            envs,
            actor_dim,
            critic_dim,
            action_dim,
            actor_obs: Vec::with_capacity(n * actor_dim),
            critic_obs: Vec::with_capacity(n * critic_dim),
            actions: Vec::with_capacity(n * action_dim),
            log_probs: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            last_values: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Per-env GAE over the buffer.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        let (t_len, n) = (self.steps, self.envs);
        self.advantages = vec![0.0; t_len * n];
        self.returns = vec![0.0; t_len * n];
        for e in 0..n {
            let r: Vec<f64> = (0..t_len).map(|t| self.rewards[t * n + e]).collect();
            let d: Vec<bool> = (0..t_len).map(|t| self.dones[t * n + e]).collect();
            let mut v: Vec<f64> = (0..t_len).map(|t| self.values[t * n + e]).collect();
            v.push(self.last_values[e]);
            let (adv, ret) = compute_gae(&r, &v, &d, gamma, lambda);
            for t in 0..t_len {
                self.advantages[t * n + e] = adv[t];
                self.returns[t * n + e] = ret[t];
            }
        }
    }
}

/// `δ_t = r_t + γ·v_{t+1}·(1−done_t) − v_t`,
/// `A_t = δ_t + γλ·(1−done_t)·A_{t+1}`, returns `A + v`.
/// `values` carries one bootstrap entry past the last reward.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n + 1, "values need a bootstrap entry");
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to zero mean, unit (population) std.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Adam over a fixed list of parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], grads[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / b1t) / ((v[i] / b2t).sqrt() + self.eps);
            }
        }
    }
}

fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Optimizers {
    pub actor: Adam,
    pub critic: Adam,
}

impl Optimizers {
    pub fn new(model: &ActorCritic, lr: f64) -> Self {
        let mut a: Vec<usize> = model.actor.params().iter().map(|p| p.len()).collect();
        a.push(model.head.log_std.len());
        let c: Vec<usize> = model.critic.params().iter().map(|p| p.len()).collect();
        Self {
            actor: Adam::new(&a, lr),
            critic: Adam::new(&c, lr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PpoStats {
    pub mean_ratio: f64,
    pub clip_frac: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    /// Largest `|ratio − 1|` in the first minibatch, before any step.
    pub initial_ratio_dev: f64,
}

/// Losses and raw gradients for one minibatch; no parameters change.
pub struct MinibatchGrads {
    pub actor: Mlp,
    pub log_std: Vec<f64>,
    pub critic: Mlp,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub clip_frac: f64,
    pub mean_ratio: f64,
    pub max_ratio_dev: f64,
}

fn gather(src: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
    }
    out
}

/// Gradients of the clipped surrogate (minus entropy bonus) and the value
/// loss over the samples `idx`, with advantages taken as given.
pub fn minibatch_gradients(
    model: &ActorCritic,
    buf: &RolloutBuffer,
    advantages: &[f64],
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<MinibatchGrads, RlError> {
    let b = idx.len();
    let bf = b as f64;
    let na = buf.action_dim;
    let xa = gather(&buf.actor_obs, buf.actor_dim, idx);
    let xc = gather(&buf.critic_obs, buf.critic_dim, idx);
    let (means, a_cache) = model.actor.forward_batch(&xa, b)?;
    let (vals, c_cache) = model.critic.forward_batch(&xc, b)?;
    let log_std = &model.head.log_std;
    let inv_var: Vec<f64> = log_std.iter().map(|s| (-2.0 * s).exp()).collect();

    let mut g_mean = vec![0.0; b * na];
    let mut g_log_std = vec![0.0; na];
    let (mut actor_loss, mut clipped, mut ratio_sum, mut max_dev) = (0.0, 0usize, 0.0, 0.0f64);
    for (s, &i) in idx.iter().enumerate() {
        let mu = &means[s * na..(s + 1) * na];
        let a = &buf.actions[i * na..(i + 1) * na];
        let lp = gaussian_log_prob(mu, log_std, a);
        let ratio = (lp - buf.log_probs[i]).exp();
        let adv = advantages[i];
        let s1 = ratio * adv;
        let s2 = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
        actor_loss -= s1.min(s2) / bf;
        ratio_sum += ratio;
        max_dev = max_dev.max((ratio - 1.0).abs());
        if (ratio - 1.0).abs() > cfg.clip {
            clipped += 1;
        }
        if s1 <= s2 {
            // d(−r·A)/d(log π) = −r·A
            let dlp = -s1 / bf;
            for j in 0..na {
                let diff = a[j] - mu[j];
                g_mean[s * na + j] = dlp * diff * inv_var[j];
                g_log_std[j] += dlp * (diff * diff * inv_var[j] - 1.0);
            }
        }
    }
    let entropy = model.head.entropy();
    actor_loss -= cfg.entropy_coef * entropy;
    for g in g_log_std.iter_mut() {
        *g -= cfg.entropy_coef;
    }

    let mut critic_loss = 0.0;
    let mut g_val = vec![0.0; b];
    for (s, &i) in idx.iter().enumerate() {
        let err = vals[s] - model.value_norm.normalize(buf.returns[i]);
        critic_loss += cfg.value_coef * err * err / bf;
        g_val[s] = 2.0 * cfg.value_coef * err / bf;
    }
    let (actor, _) = model.actor.backward(&a_cache, &g_mean);
    let (critic, _) = model.critic.backward(&c_cache, &g_val);
    Ok(MinibatchGrads {
        actor,
        log_std: g_log_std,
        critic,
        actor_loss,
        critic_loss,
        clip_frac: clipped as f64 / bf,
        mean_ratio: ratio_sum / bf,
        max_ratio_dev: max_dev,
    })
}

/// Several epochs of shuffled minibatch updates on one rollout. Advantages
/// are normalized over the whole buffer first, and the value-target
/// statistics absorb the new returns.
pub fn ppo_update<R: Rng>(
    model: &mut ActorCritic,
    opt: &mut Optimizers,
    buf: &RolloutBuffer,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PpoStats, RlError> {
    let mut adv = buf.advantages.clone();
    normalize_advantages(&mut adv);
    model.value_norm.update(&buf.returns);
    let n = buf.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = PpoStats::default();
    let mut count = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (mb, idx) in order.chunks(cfg.minibatch_size).enumerate() {
            let mut g = minibatch_gradients(model, buf, &adv, idx, cfg)?;
            if !(g.actor_loss.is_finite() && g.critic_loss.is_finite()) {
                return Err(RlError::NonFiniteLoss { epoch, minibatch: mb });
            }
            if epoch == 0 && mb == 0 {
                stats.initial_ratio_dev = g.max_ratio_dev;
            }
            {
                let mut ag = g.actor.params_mut();
                ag.push(g.log_std.as_mut_slice());
                clip_global_norm(&mut ag, cfg.max_grad_norm);
                let ag: Vec<&[f64]> = ag.into_iter().map(|s| &*s).collect();
                let mut ap = model.actor.params_mut();
                ap.push(model.head.log_std.as_mut_slice());
                opt.actor.step(ap, &ag);
            }
            {
                let mut cg = g.critic.params_mut();
                clip_global_norm(&mut cg, cfg.max_grad_norm);
                let cg: Vec<&[f64]> = cg.into_iter().map(|s| &*s).collect();
                opt.critic.step(model.critic.params_mut(), &cg);
            }
            stats.actor_loss += g.actor_loss;
            stats.critic_loss += g.critic_loss;
            stats.clip_frac += g.clip_frac;
            stats.mean_ratio += g.mean_ratio;
            count += 1.0;
        }
    }
    stats.actor_loss /= count;
    stats.critic_loss /= count;
    stats.clip_frac /= count;
    stats.mean_ratio /= count;
    stats.entropy = model.head.entropy();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_advantage_is_reward() {
        let (a, r) = compute_gae(&[2.5], &[0.0, 0.0], &[false], 1.0, 1.0);
        assert_eq!(a, vec![2.5]);
        assert_eq!(r, vec![2.5]);
    }

    #[test]
    fn three_step_unrolled() {
        let (g, l) = (0.99, 0.95);
        let r = [1.0, 0.0, 1.0];
        let v = [0.5, 0.5, 0.5, 0.0];
        let d2 = 1.0 + g * 0.0 - 0.5;
        let d1 = 0.0 + g * 0.5 - 0.5;
        let d0 = 1.0 + g * 0.5 - 0.5;
        let a2 = d2;
        let a1 = d1 + g * l * a2;
        let a0 = d0 + g * l * a1;
        let (a, ret) = compute_gae(&r, &v, &[false; 3], g, l);
        for (x, y) in a.iter().zip([a0, a1, a2]) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((ret[0] - (a0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn done_cuts_future() {
        let (a, _) = compute_gae(&[1.0, 100.0], &[0.0, 50.0, 50.0], &[true, false], 0.99, 0.95);
        assert_eq!(a[0], 1.0);
    }

    #[test]
    fn normalized_moments() {
        let mut a: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.3 - 4.0).collect();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn value_norm_merges_batches() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin() * 3.0 - 1.0).collect();
        let mut a = ValueNorm::default();
        a.update(&xs[..20]);
        a.update(&xs[20..]);
        let mut b = ValueNorm::default();
        b.update(&xs);
        assert!((a.mean - b.mean).abs() < 1e-12);
        assert!((a.var - b.var).abs() < 1e-12);
        assert!((b.denormalize(b.normalize(2.5)) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            gamma: 1.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            clip: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
