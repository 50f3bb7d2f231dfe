//! Asymmetric actor-critic PPO: the actor sees proprioception only, the
//! critic sees privileged simulator state.

pub mod mlp;
pub mod policy;
pub mod ppo;
pub mod train;

use thiserror::Error;

use crate::env::EnvError;

pub use mlp::{mlp_backward, mlp_forward, Layer, Mlp, MlpCache};
pub use policy::{gaussian_log_prob, load_policy, policy_sample, save_policy, PolicyHead, PolicyMetadata};
pub use ppo::{
    compute_gae, normalize_advantages, ppo_update, ActorCritic, Adam, Optimizers, PpoStats, RolloutBuffer, TrainConfig,
    ValueNorm,
};
pub use train::{rollout, train, ActionSource, RolloutResult, TrainLogRow, Trainer};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("expected {expected} values, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("non-finite loss in epoch {epoch}, minibatch {minibatch}")]
    NonFiniteLoss { epoch: usize, minibatch: usize },
    #[error("environment fault at iteration {iteration}: {source}")]
    Env { iteration: u64, source: EnvError },
    #[error("invalid policy document: {0}")]
    PolicyDocument(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid training config: {0}")]
    Config(String),
}
