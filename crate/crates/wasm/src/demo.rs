//! The demo computations, free of any JS types so they run natively too.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use tdk_core::env::{rotation_term, Direction};
use tdk_core::estimator::{ekf_init, ekf_step, NoiseConfig};
use tdk_core::handmodel::{builtin_proto0, HandModel};
use tdk_core::kinematics::{expand_coupled, forward_kinematics, link_poses};
use tdk_core::tendon::{muscle_jacobian, tendon_lengths, TendonLengths};

#[derive(Debug, Serialize)]
pub struct HandInfo {
    pub joints: Vec<String>,
    pub ranges: Vec<[f64; 2]>,
    pub rest: Vec<f64>,
    pub n_motors: usize,
}

pub fn hand_info(model: &HandModel) -> HandInfo {
    HandInfo {
        joints: model.actuated_names().iter().map(|s| s.to_string()).collect(),
        ranges: model.actuated_ranges().iter().map(|&(a, b)| [a, b]).collect(),
        rest: model.rest_pose(),
        n_motors: model.n_motors(),
    }
}

#[derive(Debug, Serialize)]
pub struct RewardCurve {
    pub omega: Vec<f64>,
    pub rot: Vec<f64>,
    /// Where the rotation term reaches its maximum of 2.
    pub plateau: [f64; 2],
}

/// Rotation term sampled on `n` evenly spaced rates in `[lo, hi]`.
pub fn reward_curve(direction: &str, lo: f64, hi: f64, n: usize) -> Result<RewardCurve, String> {
    let dir: Direction = direction.parse()?;
    if !(lo < hi) || !(2..=10_000).contains(&n) {
        return Err("need lo < hi and 2..=10000 samples".into());
    }
    let s = match dir {
        Direction::Neg => 1.0,
        Direction::Pos => -1.0,
    };
    let omega: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let rot = omega.iter().map(|&w| rotation_term(w, s)).collect();
    let plateau = if s > 0.0 { [-2.0, -1.0] } else { [1.0, 2.0] };
    Ok(RewardCurve { omega, rot, plateau })
}

#[derive(Debug, Serialize)]
pub struct HandPose {
    /// Line segments `[x0, y0, z0, x1, y1, z1]` between link origins and out
    /// to the fingertips, palm frame, metres.
    pub segments: Vec<[f64; 6]>,
    pub tips: Vec<[f64; 3]>,
    pub tendon_lengths: Vec<f64>,
    /// Change of each motor's tendon length from the zero pose (m).
    pub length_change: Vec<f64>,
}

pub fn hand_pose(model: &HandModel, q: &[f64]) -> Result<HandPose, String> {
    let q_full = expand_coupled(q, model).map_err(|e| e.to_string())?;
    let links = link_poses(model, &q_full);
    let mut segments: Vec<[f64; 6]> = model
        .joints()
        .iter()
        .map(|j| {
            let a = links[j.parent_link].translation;
            let b = links[j.child_link].translation;
            [a.x, a.y, a.z, b.x, b.y, b.z]
        })
        .collect();
    let tips: Vec<[f64; 3]> = forward_kinematics(model, q)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|t| [t.translation.x, t.translation.y, t.translation.z])
        .collect();
    for (f, tip) in model.fingertips().iter().zip(&tips) {
        let a = links[f.link].translation;
        segments.push([a.x, a.y, a.z, tip[0], tip[1], tip[2]]);
    }
    let l = tendon_lengths(model, q).map_err(|e| e.to_string())?.l;
    let l0 = tendon_lengths(model, &vec![0.0; model.n_actuated()]).map_err(|e| e.to_string())?.l;
    Ok(HandPose {
        segments,
        tips,
        length_change: l.iter().zip(&l0).map(|(a, b)| a - b).collect(),
        tendon_lengths: l,
    })
}

#[derive(Debug, Serialize)]
pub struct EkfTrace {
    pub t: Vec<f64>,
    /// True and estimated angle of the traced joint.
    pub q_true: Vec<f64>,
    pub q_est: Vec<f64>,
    /// Per-joint RMSE after the first second.
    pub rmse: Vec<f64>,
}

/// Filters `q = amp·sin(π t)` on every joint from tendon lengths with
/// Gaussian noise `sigma` (m) and rates with noise `sqrt(r_rate)`.
pub fn ekf_demo(model: &HandModel, sigma: f64, q_vel: f64, seconds: f64, joint: usize, seed: u64) -> Result<EkfTrace, String> {
    let n = model.n_actuated();
    if joint >= n {
        return Err(format!("joint index must be below {n}"));
    }
    if !(sigma >= 0.0 && q_vel > 0.0 && seconds > 0.0 && seconds <= 60.0) {
        return Err("need sigma >= 0, q_vel > 0 and 0 < seconds <= 60".into());
    }
    let dt = 0.05;
    let amp = 0.3;
    let w = std::f64::consts::PI;
    let noise = NoiseConfig {
        q_vel,
        r_len: (sigma * sigma).max(1e-12),
        ..NoiseConfig::default()
    };
    let len_noise = Normal::new(0.0, sigma).map_err(|e| e.to_string())?;
    let rate_noise = Normal::new(0.0, noise.r_rate.sqrt()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ekf_init(model, &vec![0.0; n], 1e-2, &noise, dt).map_err(|e| e.to_string())?;
    let steps = (seconds / dt).round() as usize;
    let mut trace = EkfTrace {
        t: Vec::with_capacity(steps),
        q_true: Vec::with_capacity(steps),
        q_est: Vec::with_capacity(steps),
        rmse: vec![0.0; n],
    };
    let mut count = 0usize;
    for i in 1..=steps {
        let t = i as f64 * dt;
        let q = vec![amp * (w * t).sin(); n];
        let qd = DVector::from_element(n, amp * w * (w * t).cos());
        let l = tendon_lengths(model, &q)
            .map_err(|e| e.to_string())?
            .l
            .iter()
            .map(|v| v + len_noise.sample(&mut rng))
            .collect();
        let j = muscle_jacobian(model, &q).map_err(|e| e.to_string())?.0;
        let ldot = (j * qd).iter().map(|v| v + rate_noise.sample(&mut rng)).collect();
        s = ekf_step(&s, &TendonLengths { l, ldot: Some(ldot) }, model).map_err(|e| e.to_string())?;
        trace.t.push(t);
        trace.q_true.push(q[joint]);
        trace.q_est.push(s.q()[joint]);
        if t > 1.0 {
            for (k, e) in trace.rmse.iter_mut().enumerate() {
                *e += (s.q()[k] - q[k]).powi(2);
            }
            count += 1;
        }
    }
    for e in trace.rmse.iter_mut() {
        *e = if count > 0 { (*e / count as f64).sqrt() } else { 0.0 };
    }
    Ok(trace)
}

/// The model the page works with.
pub fn model() -> HandModel {
    builtin_proto0()
}
