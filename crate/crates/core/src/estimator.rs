//! Extended Kalman filter for joint angles and velocities from measured
//! tendon lengths and rates.
//!
//! State `x = [q; q̇]`, constant-velocity transition, observation
//! `h(x) = [f(q); J_m(q)·q̇]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handmodel::HandModel;
use crate::tendon::{muscle_curvature, muscle_jacobian, tendon_lengths, TendonError, TendonLengths};

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Tendon(#[from] TendonError),
    #[error("expected {expected} observations, got {actual}")]
    ObservationDimension { expected: usize, actual: usize },
    #[error("innovation covariance is not positive definite; check R and P")]
    SingularInnovation,
    #[error("invalid filter setting: {0}")]
    Config(String),
}

/// Diagonal noise levels. Overridable from config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub q_pos: f64,
    pub q_vel: f64,
    pub r_len: f64,
    pub r_rate: f64,
    /// Include the `∂(J_m q̇)/∂q` block in H instead of zero.
    pub exact_jacobian: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            q_pos: 1e-8,
            q_vel: 1e-4,
            r_len: 1e-8,
            r_rate: 1e-6,
            exact_jacobian: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub q_noise: DMatrix<f64>,
    pub r_noise: DMatrix<f64>,
    pub dt: f64,
    pub exact_jacobian: bool,
}

impl EkfState {
    pub fn n_joints(&self) -> usize {
        self.x.len() / 2
    }

    pub fn q(&self) -> &[f64] {
        &self.x.as_slice()[..self.n_joints()]
    }

    pub fn qdot(&self) -> &[f64] {
        &self.x.as_slice()[self.n_joints()..]
    }
}

pub fn ekf_init(
    model: &HandModel,
    q0: &[f64],
    p0: f64,
    noise: &NoiseConfig,
    dt: f64,
) -> Result<EkfState, EstimatorError> {
    let n = model.n_actuated();
    let m = model.n_motors();
    if q0.len() != n {
        return Err(EstimatorError::ObservationDimension {
            expected: n,
            actual: q0.len(),
        });
    }
    if q0.iter().any(|v| !v.is_finite()) {
        return Err(EstimatorError::Config("initial pose must be finite".into()));
    }
    if !(dt > 0.0) || p0 < 0.0 {
        return Err(EstimatorError::Config("dt must be positive and P0 non-negative".into()));
    }
    if [noise.q_pos, noise.q_vel, noise.r_len, noise.r_rate].iter().any(|v| *v < 0.0) {
        return Err(EstimatorError::Config("noise variances must be non-negative".into()));
    }
    let mut x = DVector::zeros(2 * n);
    x.rows_mut(0, n).copy_from_slice(q0);
    let qd = (0..2 * n).map(|i| if i < n { noise.q_pos } else { noise.q_vel });
    let rd = (0..2 * m).map(|i| if i < m { noise.r_len } else { noise.r_rate });
    Ok(EkfState {
        x,
        p: DMatrix::identity(2 * n, 2 * n) * p0,
        q_noise: DMatrix::from_diagonal(&DVector::from_iterator(2 * n, qd)),
        r_noise: DMatrix::from_diagonal(&DVector::from_iterator(2 * m, rd)),
        dt,
        exact_jacobian: noise.exact_jacobian,
    })
}

fn transition(n: usize, dt: f64) -> DMatrix<f64> {
    let mut f = DMatrix::identity(2 * n, 2 * n);
    for i in 0..n {
        f[(i, n + i)] = dt;
    }
    f
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p += t;
    *p *= 0.5;
}

/// `x ← F x`, `P ← F P Fᵀ + Q`.
pub fn ekf_predict(s: &EkfState) -> EkfState {
    let n = s.n_joints();
    let f = transition(n, s.dt);
    let mut out = s.clone();
    out.x = &f * &s.x;
    out.p = &f * &s.p * f.transpose() + &s.q_noise;
    symmetrize(&mut out.p);
    out
}

/// Predicted observation `[f(q); J_m(q) q̇]` and its Jacobian H.
pub fn observation_model(
    model: &HandModel,
    x: &DVector<f64>,
    exact: bool,
) -> Result<(DVector<f64>, DMatrix<f64>), EstimatorError> {
    let n = model.n_actuated();
    let m = model.n_motors();
    let q = &x.as_slice()[..n];
    let qd = x.rows(n, n);
    let jm = muscle_jacobian(model, q)?.0;
    let l = tendon_lengths(model, q)?.l;
    let ldot = &jm * qd;
    let mut z = DVector::zeros(2 * m);
    z.rows_mut(0, m).copy_from_slice(&l);
    z.rows_mut(m, m).copy_from(&ldot);

    let mut h = DMatrix::zeros(2 * m, 2 * n);
    h.view_mut((0, 0), (m, n)).copy_from(&jm);
    h.view_mut((m, n), (m, n)).copy_from(&jm);
    if exact {
        let c = muscle_curvature(model, q)?;
        for k in 0..m {
            for a in 0..n {
                h[(m + k, a)] = c[(k, a)] * qd[a];
            }
        }
    }
    Ok((z, h))
}

/// EKF correction with a Joseph-form covariance update.
pub fn ekf_update(s: &EkfState, z: &TendonLengths, model: &HandModel) -> Result<EkfState, EstimatorError> {
    let zv = z.stacked();
    let m2 = s.r_noise.nrows();
    if zv.len() != m2 {
        return Err(EstimatorError::ObservationDimension {
            expected: m2,
            actual: zv.len(),
        });
    }
    let (z_pred, h) = observation_model(model, &s.x, s.exact_jacobian)?;
    let innovation = DVector::from_vec(zv) - z_pred;
    let ph_t = &s.p * h.transpose();
    let mut sm = &h * &ph_t + &s.r_noise;
    symmetrize(&mut sm);
    let chol = sm.cholesky().ok_or(EstimatorError::SingularInnovation)?;
    // K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ.
    let k = chol.solve(&ph_t.transpose()).transpose();

    let mut out = s.clone();
    out.x = &s.x + &k * innovation;
    let ikh = DMatrix::identity(s.x.len(), s.x.len()) - &k * &h;
    out.p = &ikh * &s.p * ikh.transpose() + &k * &s.r_noise * k.transpose();
    symmetrize(&mut out.p);
    Ok(out)
}

/// One predict/update cycle.
pub fn ekf_step(s: &EkfState, z: &TendonLengths, model: &HandModel) -> Result<EkfState, EstimatorError> {
    ekf_update(&ekf_predict(s), z, model)
}
