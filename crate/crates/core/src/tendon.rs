//! Joint ↔ tendon ↔ motor mapping.
//!
//! Each tendon route length is `l0 + Σ terms`, with a LINEAR term
//! contributing `sign·m·q` and a ROLLING term `sign·2ρ·sin(q/2)`. A motor
//! reports the length of its primary (first) attachment, so the measured
//! vector has one entry per motor.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handmodel::{HandModel, ResolvedTendon, TermKind};
use crate::kinematics::{expand_coupled, KinematicsError};
use crate::stats::smoothing_step;

#[derive(Debug, Error, PartialEq)]
pub enum TendonError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("expected {expected} motor values, got {actual}")]
    MotorDimension { expected: usize, actual: usize },
    #[error("calibration is not usable: {0}")]
    Calibration(String),
}

/// Measured tendon lengths, one per motor.
#[derive(Debug, Clone, PartialEq)]
pub struct TendonLengths {
    pub l: Vec<f64>,
    pub ldot: Option<Vec<f64>>,
}

impl TendonLengths {
    /// Stacked `[l; ldot]`, with zero rates when none are present.
    pub fn stacked(&self) -> Vec<f64> {
        let mut z = self.l.clone();
        match &self.ldot {
            Some(d) => z.extend_from_slice(d),
            None => z.extend(std::iter::repeat_n(0.0, self.l.len())),
        }
        z
    }
}

/// ∂l/∂q over the actuated joints, motors × actuated DoF (m/rad).
#[derive(Debug, Clone, PartialEq)]
pub struct MuscleJacobian(pub DMatrix<f64>);

/// Boot-time relation between motor angles and tendon lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub theta_cal: Vec<f64>,
    pub q_cal: Vec<f64>,
    pub l_cal: Vec<f64>,
}

fn term_length(kind: TermKind, value: f64, q: f64) -> f64 {
    match kind {
        TermKind::Linear => value * q,
        TermKind::Rolling => 2.0 * value * (0.5 * q).sin(),
    }
}

fn term_slope(kind: TermKind, value: f64, q: f64) -> f64 {
    match kind {
        TermKind::Linear => value,
        TermKind::Rolling => value * (0.5 * q).cos(),
    }
}

fn term_curvature(kind: TermKind, value: f64, q: f64) -> f64 {
    match kind {
        TermKind::Linear => 0.0,
        TermKind::Rolling => -0.5 * value * (0.5 * q).sin(),
    }
}

fn route_length(route: &ResolvedTendon, q_full: &[f64]) -> f64 {
    route.rest_length
        + route
            .terms
            .iter()
            .map(|t| t.sign * term_length(t.kind, t.value, q_full[t.joint]))
            .sum::<f64>()
}

/// Lengths of every tendon route (all attachments, not just primaries).
pub fn route_lengths(model: &HandModel, q_act: &[f64]) -> Result<Vec<f64>, TendonError> {
    let q_full = expand_coupled(q_act, model)?;
    Ok(model.tendons().iter().map(|r| route_length(r, &q_full)).collect())
}

/// `l = f(q)`: the primary-attachment length of each motor.
pub fn tendon_lengths(model: &HandModel, q_act: &[f64]) -> Result<TendonLengths, TendonError> {
    let q_full = expand_coupled(q_act, model)?;
    let l = model
        .motors()
        .iter()
        .map(|m| route_length(&model.tendons()[m.primary().tendon], &q_full))
        .collect();
    Ok(TendonLengths { l, ldot: None })
}

/// Closed-form `J_m = ∂f/∂q`, with couplings folded into driver columns.
pub fn muscle_jacobian(model: &HandModel, q_act: &[f64]) -> Result<MuscleJacobian, TendonError> {
    per_term_matrix(model, q_act, |kind, value, q, ratio| ratio * term_slope(kind, value, q)).map(MuscleJacobian)
}

/// Diagonal second derivatives `∂²l_k/∂q_a²`, motors × actuated DoF.
///
/// Each full joint follows exactly one actuated joint linearly and each term
/// depends on a single joint, so mixed partials vanish and this is the whole
/// Hessian of each motor length.
pub fn muscle_curvature(model: &HandModel, q_act: &[f64]) -> Result<DMatrix<f64>, TendonError> {
    per_term_matrix(model, q_act, |kind, value, q, ratio| {
        ratio * ratio * term_curvature(kind, value, q)
    })
}

fn per_term_matrix(
    model: &HandModel,
    q_act: &[f64],
    derivative: impl Fn(TermKind, f64, f64, f64) -> f64,
) -> Result<DMatrix<f64>, TendonError> {
    let q_full = expand_coupled(q_act, model)?;
    let sources = model.joint_sources();
    let mut j = DMatrix::zeros(model.n_motors(), model.n_actuated());
    for (k, motor) in model.motors().iter().enumerate() {
        for t in &model.tendons()[motor.primary().tendon].terms {
            let src = sources[t.joint];
            j[(k, src.actuated)] += t.sign * derivative(t.kind, t.value, q_full[t.joint], src.ratio);
        }
    }
    Ok(j)
}

fn check_motor_dim(model: &HandModel, v: &[f64]) -> Result<(), TendonError> {
    if v.len() == model.n_motors() {
        Ok(())
    } else {
        Err(TendonError::MotorDimension {
            expected: model.n_motors(),
            actual: v.len(),
        })
    }
}

/// Stores the boot-time reference: motor angles observed at a known pose.
pub fn calibrate(model: &HandModel, theta_observed: &[f64], q_known: &[f64]) -> Result<Calibration, TendonError> {
    check_motor_dim(model, theta_observed)?;
    let l_cal = tendon_lengths(model, q_known)?.l;
    if theta_observed.iter().any(|t| !t.is_finite()) {
        return Err(TendonError::Calibration("non-finite motor angle".into()));
    }
    if l_cal.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(TendonError::Calibration("reference lengths must be finite and positive".into()));
    }
    Ok(Calibration {
        theta_cal: theta_observed.to_vec(),
        q_cal: q_known.to_vec(),
        l_cal,
    })
}

/// Desired motor angles: `θ = θ_cal + w·(f(q) − l_cal)/ρ` per motor.
pub fn joints_to_motor_angles(model: &HandModel, cal: &Calibration, q_des: &[f64]) -> Result<Vec<f64>, TendonError> {
    let l = tendon_lengths(model, q_des)?.l;
    Ok(model
        .motors()
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let a = m.primary();
            cal.theta_cal[k] + a.winding * (l[k] - cal.l_cal[k]) / a.spool_radius
        })
        .collect())
}

/// Measured lengths from motor angles: `l = l_cal + w·ρ·(θ − θ_cal)`; rates
/// use the same linear map on motor velocities when given.
pub fn motor_angles_to_tendon_lengths(
    model: &HandModel,
    cal: &Calibration,
    theta: &[f64],
    theta_dot: Option<&[f64]>,
) -> Result<TendonLengths, TendonError> {
    check_motor_dim(model, theta)?;
    let motors = model.motors();
    let l = motors
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let a = m.primary();
            cal.l_cal[k] + a.winding * a.spool_radius * (theta[k] - cal.theta_cal[k])
        })
        .collect();
    let ldot = match theta_dot {
        Some(td) => {
            check_motor_dim(model, td)?;
            Some(
                motors
                    .iter()
                    .zip(td)
                    .map(|(m, &w)| m.primary().winding * m.primary().spool_radius * w)
                    .collect(),
            )
        }
        None => None,
    };
    Ok(TendonLengths { l, ldot })
}

/// Tendon rates from successive length samples when no motor velocities are
/// available: exponentially smoothed first differences.
#[derive(Debug, Clone)]
pub struct LengthRateFilter {
    alpha: f64,
    prev: Option<Vec<f64>>,
    rate: Vec<f64>,
}

impl LengthRateFilter {
    pub fn new(n: usize, alpha: f64) -> Self {
        Self {
            alpha,
            prev: None,
            rate: vec![0.0; n],
        }
    }

    /// Feeds one length sample taken `dt` after the previous one. The first
    /// sample yields zero rates.
    pub fn update(&mut self, l: &[f64], dt: f64) -> &[f64] {
        match &self.prev {
            None => {
                self.rate = vec![0.0; l.len()];
            }
            Some(prev) => {
                for ((r, &now), &before) in self.rate.iter_mut().zip(l).zip(prev) {
                    *r = smoothing_step(self.alpha, (now - before) / dt, *r);
                }
            }
        }
        self.prev = Some(l.to_vec());
        &self.rate
    }
}

/// Result of sweeping the proximal joints of every two-tendon motor.
#[derive(Debug, Clone, PartialEq)]
pub struct AntagonisticReport {
    /// Max deviation per paired motor, as (motor index, deviation in m).
    pub per_motor: Vec<(usize, f64)>,
    pub max_deviation: f64,
}

impl AntagonisticReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_deviation <= tolerance
    }
}

/// For each two-attachment motor, sweeps every joint its tendons cross over
/// the joint range (others held at the zero pose clamped into range) and
/// reports the worst gap between the secondary tendon's length change and
/// the change implied by the spool-radius ratio. Single-tendon (distal)
/// motors are skipped.
pub fn antagonistic_consistency_check(model: &HandModel, samples: usize) -> AntagonisticReport {
    let ranges = model.actuated_ranges();
    let base: Vec<f64> = ranges.iter().map(|&(lo, hi)| 0.0f64.clamp(lo, hi)).collect();
    let base_routes = route_lengths(model, &base).expect("base pose dimension");
    let sources = model.joint_sources();
    let samples = samples.max(2);

    let mut per_motor = Vec::new();
    for (k, motor) in model.motors().iter().enumerate() {
        if motor.attachments.len() != 2 {
            continue;
        }
        let (p, s) = (motor.attachments[0], motor.attachments[1]);
        let mut swept: Vec<usize> = model.tendons()[p.tendon]
            .terms
            .iter()
            .chain(&model.tendons()[s.tendon].terms)
            .map(|t| sources[t.joint].actuated)
            .collect();
        swept.sort_unstable();
        swept.dedup();

        let mut worst: f64 = 0.0;
        for &a in &swept {
            let (lo, hi) = ranges[a];
            let mut q = base.clone();
            for i in 0..samples {
                q[a] = lo + (hi - lo) * i as f64 / (samples - 1) as f64;
                let routes = route_lengths(model, &q).expect("dimension");
                let dl_p = routes[p.tendon] - base_routes[p.tendon];
                let dl_s = routes[s.tendon] - base_routes[s.tendon];
                let predicted = s.winding * s.spool_radius * p.winding * dl_p / p.spool_radius;
                worst = worst.max((dl_s - predicted).abs());
            }
        }
        per_motor.push((k, worst));
    }
    let max_deviation = per_motor.iter().map(|&(_, d)| d).fold(0.0, f64::max);
    AntagonisticReport {
        per_motor,
        max_deviation,
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::handmodel::{builtin_proto0, builtin_proto0_text, parse_hand_spec, HandModel};

    fn motor_index(m: &HandModel, name: &str) -> usize {
        m.spec().motors.iter().position(|x| x.name == name).unwrap()
    }

    fn act_index(m: &HandModel, name: &str) -> usize {
        m.actuated_names().iter().position(|x| *x == name).unwrap()
    }

    #[test]
    fn zero_pose_gives_rest_lengths() {
        let m = builtin_proto0();
        let l = tendon_lengths(&m, &[0.0; 11]).unwrap().l;
        for (k, motor) in m.motors().iter().enumerate() {
            assert_eq!(l[k], m.tendons()[motor.primary().tendon].rest_length);
        }
    }

    #[test]
    fn term_arithmetic() {
        assert!((term_length(TermKind::Linear, 0.01, 1.0) - 0.01).abs() < 1e-15);
        assert!((term_length(TermKind::Rolling, 0.01, PI) - 0.02).abs() < 1e-15);
        assert!((term_slope(TermKind::Rolling, 0.01, 0.0) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn linear_rows_are_constant() {
        let m = builtin_proto0();
        let k = motor_index(&m, "thumb_abd");
        let a = muscle_jacobian(&m, &[0.0; 11]).unwrap().0;
        let b = muscle_jacobian(&m, &m.rest_pose()).unwrap().0;
        assert_eq!(a.row(k), b.row(k));
        assert_eq!(a[(k, act_index(&m, "thumb_cmc_abd"))], 0.007);
    }

    #[test]
    fn rolling_entry_at_zero() {
        let m = builtin_proto0();
        let j = muscle_jacobian(&m, &[0.0; 11]).unwrap().0;
        let k = motor_index(&m, "index_mcp");
        assert!((j[(k, act_index(&m, "index_mcp"))] - 0.008).abs() < 1e-15);
        // Distal flexor: PIP column collects PIP and coupled DIP.
        let k = motor_index(&m, "index_pip_flexor");
        assert!((j[(k, act_index(&m, "index_pip"))] - (0.006 + 0.005)).abs() < 1e-15);
        assert!((j[(k, act_index(&m, "index_mcp"))] - 0.008).abs() < 1e-15);
    }

    #[test]
    fn spool_conversion() {
        let m = builtin_proto0();
        let theta0 = vec![1.0; 16];
        let cal = calibrate(&m, &theta0, &[0.0; 11]).unwrap();
        assert_eq!(cal.l_cal, tendon_lengths(&m, &[0.0; 11]).unwrap().l);
        assert_eq!(joints_to_motor_angles(&m, &cal, &[0.0; 11]).unwrap(), theta0);

        // A 5 mm spool turning 2 rad moves 10 mm of tendon.
        let k = motor_index(&m, "index_pip_flexor");
        let mut theta = theta0.clone();
        theta[k] += 2.0;
        let l = motor_angles_to_tendon_lengths(&m, &cal, &theta, None).unwrap().l;
        assert!((l[k] - cal.l_cal[k] - 0.01).abs() < 1e-15);
        // And back: 10 mm of length change is 2 rad.
        let q = {
            let mut q = vec![0.0; 11];
            q[act_index(&m, "index_pip")] = 0.3;
            q
        };
        let th = joints_to_motor_angles(&m, &cal, &q).unwrap();
        let dl = tendon_lengths(&m, &q).unwrap().l[k] - cal.l_cal[k];
        assert!((th[k] - theta0[k] - dl / 0.005).abs() < 1e-12);
    }

    #[test]
    fn calibration_round_trip_reproduces_f() {
        let m = builtin_proto0();
        let cal = calibrate(&m, &(0..16).map(|i| 0.1 * i as f64).collect::<Vec<_>>(), &[0.0; 11]).unwrap();
        let q = m.rest_pose();
        let theta = joints_to_motor_angles(&m, &cal, &q).unwrap();
        let l = motor_angles_to_tendon_lengths(&m, &cal, &theta, None).unwrap().l;
        let f = tendon_lengths(&m, &q).unwrap().l;
        for (a, b) in l.iter().zip(&f) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs());
        }
    }

    #[test]
    fn calibration_offset_cancels() {
        let m = builtin_proto0();
        let c1 = calibrate(&m, &[0.0; 16], &[0.0; 11]).unwrap();
        let c2 = calibrate(&m, &[3.7; 16], &[0.0; 11]).unwrap();
        for step in 0..20 {
            let q: Vec<f64> = (0..11).map(|j| 0.05 * step as f64 * ((j % 3) as f64 + 0.5)).collect();
            let l1 = motor_angles_to_tendon_lengths(&m, &c1, &joints_to_motor_angles(&m, &c1, &q).unwrap(), None)
                .unwrap()
                .l;
            let l2 = motor_angles_to_tendon_lengths(&m, &c2, &joints_to_motor_angles(&m, &c2, &q).unwrap(), None)
                .unwrap()
                .l;
            for (a, b) in l1.iter().zip(&l2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rate_filter_matches_smoothed_differences() {
        let m = builtin_proto0();
        let cal = calibrate(&m, &[0.0; 16], &[0.0; 11]).unwrap();
        let alpha = 0.5;
        let dt = 0.05;
        let mut filter = LengthRateFilter::new(16, alpha);
        // Deterministic pseudo-noisy motor stream.
        let stream: Vec<Vec<f64>> = (0..30)
            .map(|t| (0..16).map(|k| 0.1 * t as f64 + 0.01 * ((t * 7 + k * 3) % 5) as f64).collect())
            .collect();
        let mut expected = vec![0.0; 16];
        let mut prev: Option<Vec<f64>> = None;
        for theta in &stream {
            let l = motor_angles_to_tendon_lengths(&m, &cal, theta, None).unwrap().l;
            let got = filter.update(&l, dt).to_vec();
            if let Some(p) = &prev {
                for k in 0..16 {
                    let raw = (l[k] - p[k]) / dt;
                    expected[k] = alpha * raw + (1.0 - alpha) * expected[k];
                }
            }
            assert_eq!(got, expected);
            prev = Some(l);
        }
    }

    #[test]
    fn motor_rates_use_spool_map() {
        let m = builtin_proto0();
        let cal = calibrate(&m, &[0.0; 16], &[0.0; 11]).unwrap();
        let td: Vec<f64> = (0..16).map(|k| k as f64).collect();
        let z = motor_angles_to_tendon_lengths(&m, &cal, &[0.0; 16], Some(&td)).unwrap();
        let ldot = z.ldot.unwrap();
        for (k, motor) in m.motors().iter().enumerate() {
            let a = motor.primary();
            assert_eq!(ldot[k], a.winding * a.spool_radius * td[k]);
        }
    }

    #[test]
    fn antagonistic_pairs_within_tolerance() {
        let m = builtin_proto0();
        let report = antagonistic_consistency_check(&m, 101);
        assert_eq!(report.per_motor.len(), 6);
        assert!(report.within(m.antagonistic_tolerance()), "{report:?}");
        // Linear/linear thumb pair is exact; rolling/linear pairs are not.
        let abd = motor_index(&m, "thumb_abd");
        let idx = motor_index(&m, "index_mcp");
        let dev = |k| report.per_motor.iter().find(|(i, _)| *i == k).unwrap().1;
        assert!(dev(abd) < 1e-15);
        assert!(dev(idx) > 1e-5);
    }

    #[test]
    fn distal_motors_not_checked() {
        let m = builtin_proto0();
        let report = antagonistic_consistency_check(&m, 11);
        let distal = motor_index(&m, "index_pip_flexor");
        assert!(report.per_motor.iter().all(|(k, _)| *k != distal));
    }

    #[test]
    fn curvature_matches_jacobian_differences() {
        let m = builtin_proto0();
        let q = m.rest_pose();
        let c = muscle_curvature(&m, &q).unwrap();
        let h = 1e-6;
        for a in 0..11 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[a] += h;
            qm[a] -= h;
            let jp = muscle_jacobian(&m, &qp).unwrap().0;
            let jm = muscle_jacobian(&m, &qm).unwrap().0;
            for k in 0..16 {
                let fd = (jp[(k, a)] - jm[(k, a)]) / (2.0 * h);
                assert!((fd - c[(k, a)]).abs() < 1e-8, "k={k} a={a}");
            }
        }
    }

    #[test]
    fn non_unit_coupling_ratio_curvature() {
        let mut spec = parse_hand_spec(builtin_proto0_text()).unwrap();
        spec.couplings[1].ratio = 0.7;
        let m = HandModel::from_spec(spec).unwrap();
        let q = m.rest_pose();
        let c = muscle_curvature(&m, &q).unwrap();
        let h = 1e-6;
        let a = act_index(&m, "index_pip");
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[a] += h;
        qm[a] -= h;
        let jp = muscle_jacobian(&m, &qp).unwrap().0;
        let jm = muscle_jacobian(&m, &qm).unwrap().0;
        let k = motor_index(&m, "index_pip_flexor");
        let fd = (jp[(k, a)] - jm[(k, a)]) / (2.0 * h);
        assert!((fd - c[(k, a)]).abs() < 1e-8);
    }
}
