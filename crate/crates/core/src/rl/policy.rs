//! Diagonal Gaussian action head and the portable policy document.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{Layer, Mlp};
use super::RlError;
use crate::env::{EnvConfig, HandEnv, RotationTarget, HISTORY_DEPTH};

pub const POLICY_SCHEMA_VERSION: u32 = 1;
pub const POLICY_FORMAT: &str = "tdk-policy";

/// State-independent log standard deviation per action dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHead {
    pub log_std: Vec<f64>,
}

impl PolicyHead {
    pub fn new(n: usize, init_log_std: f64) -> Self {
        Self {
            log_std: vec![init_log_std; n],
        }
    }

    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|s| s + 0.5 * (2.0 * PI * std::f64::consts::E).ln())
            .sum()
    }
}

/// Exact diagonal-Gaussian log density.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    mean.iter()
        .zip(log_std)
        .zip(a)
        .map(|((&m, &ls), &x)| {
            let z = (x - m) * (-ls).exp();
            -0.5 * z * z - ls - half_log_2pi
        })
        .sum()
}

/// Draws `a ~ N(mean, diag(exp(2·log_std)))` and returns it with its log
/// density.
pub fn policy_sample<R: Rng>(mean: &[f64], head: &PolicyHead, rng: &mut R) -> (Vec<f64>, f64) {
    let a: Vec<f64> = mean
        .iter()
        .zip(&head.log_std)
        .map(|(&m, &ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = gaussian_log_prob(mean, &head.log_std, &a);
    (a, lp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetadata {
    pub obs_scale: f64,
    pub history_depth: usize,
    pub joint_names: Vec<String>,
    /// Normalization range `[lo, hi]` per actuated joint.
    pub joint_ranges: Vec<[f64; 2]>,
    pub v_max: f64,
    pub policy_rate_hz: f64,
    pub target: RotationTarget,
}

impl PolicyMetadata {
    pub fn from_env(env: &HandEnv) -> Self {
        let cfg: &EnvConfig = &env.config;
        Self {
            obs_scale: cfg.obs_scale,
            history_depth: cfg.history_depth,
            joint_names: env.model.actuated_names().iter().map(|s| s.to_string()).collect(),
            joint_ranges: env.ranges().iter().map(|&(a, b)| [a, b]).collect(),
            v_max: cfg.v_max,
            policy_rate_hz: 1.0 / cfg.policy_dt(),
            target: cfg.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    /// Row-major `rows × cols`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyDocument {
    format: String,
    schema_version: u32,
    dims: Vec<usize>,
    activations: Vec<String>,
    layers: Vec<LayerDoc>,
    log_std: Vec<f64>,
    metadata: PolicyMetadata,
}

/// Serializes the actor, its head and deployment metadata as JSON.
pub fn save_policy(actor: &Mlp, head: &PolicyHead, metadata: &PolicyMetadata) -> Result<String, RlError> {
    let doc = PolicyDocument {
        format: POLICY_FORMAT.to_string(),
        schema_version: POLICY_SCHEMA_VERSION,
        dims: actor.dims(),
        activations: actor.activations().iter().map(|s| s.to_string()).collect(),
        layers: actor
            .layers
            .iter()
            .map(|l| LayerDoc {
                rows: l.outputs,
                cols: l.inputs,
                weight: l.weight.clone(),
                bias: l.bias.clone(),
            })
            .collect(),
        log_std: head.log_std.clone(),
        metadata: metadata.clone(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn load_policy(text: &str) -> Result<(Mlp, PolicyHead, PolicyMetadata), RlError> {
    let doc: PolicyDocument = serde_json::from_str(text)?;
    let bad = |m: String| Err(RlError::PolicyDocument(m));
    if doc.format != POLICY_FORMAT {
        return bad(format!("unknown format `{}`", doc.format));
    }
    if doc.schema_version != POLICY_SCHEMA_VERSION {
        return bad(format!(
            "schema version {} not supported (expected {POLICY_SCHEMA_VERSION})",
            doc.schema_version
        ));
    }
    if doc.dims.len() < 2 || doc.layers.len() != doc.dims.len() - 1 {
        return bad("layer count does not match dims".into());
    }
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.into_iter().enumerate() {
        if l.cols != doc.dims[i] || l.rows != doc.dims[i + 1] {
            return bad(format!(
                "layer {i} is {}x{}, dims say {}x{}",
                l.rows,
                l.cols,
                doc.dims[i + 1],
                doc.dims[i]
            ));
        }
        if l.weight.len() != l.rows * l.cols || l.bias.len() != l.rows {
            return bad(format!("layer {i} has the wrong number of values"));
        }
        layers.push(Layer {
            inputs: l.cols,
            outputs: l.rows,
            weight: l.weight,
            bias: l.bias,
        });
    }
    let actor = Mlp { layers };
    let expected: Vec<String> = actor.activations().iter().map(|s| s.to_string()).collect();
    if doc.activations != expected {
        return bad(format!("unsupported activations {:?}", doc.activations));
    }
    let n_out = actor.output_dim();
    if doc.log_std.len() != n_out {
        return bad(format!("log_std has {} entries for {n_out} actions", doc.log_std.len()));
    }
    let md = doc.metadata;
    if md.history_depth != HISTORY_DEPTH {
        return bad(format!("history depth {} not supported", md.history_depth));
    }
    if md.joint_ranges.len() != n_out || actor.input_dim() != n_out * (2 + md.history_depth) {
        return bad("actor dims do not match the joint count".into());
    }
    if !actor.is_finite() || doc.log_std.iter().any(|v| !v.is_finite()) {
        return bad("non-finite parameters".into());
    }
    Ok((actor, PolicyHead { log_std: doc.log_std }, md))
}
