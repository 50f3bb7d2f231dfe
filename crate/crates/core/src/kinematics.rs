//! Forward kinematics for rolling-contact finger chains.
//!
//! Quaternions are (w, x, y, z), right-handed, active rotations. A rolling
//! joint is represented by two virtual hinges about parallel axes, each
//! turning by half the joint angle; the second hinge sits `hinge_offset`
//! along the child link's +z.

use std::ops::Mul;

use nalgebra::{Unit, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::handmodel::{HandModel, JointGeometry, ResolvedJoint};

/// Step used for finite-difference fingertip velocities.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("expected {expected} actuated joint values, got {actual}")]
    Dimension { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            translation: t,
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::from_axis_angle(axis, angle),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self {
            translation: -(rotation * self.translation),
            rotation,
        }
    }

    /// Net rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform {
            translation: self.rotation * rhs.translation + self.translation,
            rotation: self.rotation * rhs.rotation,
        }
    }
}

/// Pose of the distal side of a rolling joint relative to its proximal
/// side: `R(q/2) · T(d·z) · R(q/2) · T(-d·z)`.
pub fn rolling_joint_transform(q: f64, axis: &Unit<Vector3<f64>>, hinge_offset: f64) -> RigidTransform {
    let half = UnitQuaternion::from_axis_angle(axis, 0.5 * q);
    let rotation = half * half;
    let d = Vector3::new(0.0, 0.0, hinge_offset);
    RigidTransform {
        translation: half * d - rotation * d,
        rotation,
    }
}

/// Hinge about `axis` through `pivot`.
pub fn hinge_transform(q: f64, axis: &Unit<Vector3<f64>>, pivot: &Vector3<f64>) -> RigidTransform {
    let rotation = UnitQuaternion::from_axis_angle(axis, q);
    RigidTransform {
        translation: pivot - rotation * pivot,
        rotation,
    }
}

/// Transform contributed by one joint at angle `q` (origin excluded).
pub fn joint_transform(joint: &ResolvedJoint, q: f64) -> RigidTransform {
    match joint.geometry {
        JointGeometry::Rolling { hinge_offset, .. } => rolling_joint_transform(q, &joint.axis, hinge_offset),
        JointGeometry::Hinge { pivot } => hinge_transform(q, &joint.axis, &pivot),
    }
}

/// Maps actuated joint values onto all joints via the coupling table.
pub fn expand_coupled(q_act: &[f64], model: &HandModel) -> Result<Vec<f64>, KinematicsError> {
    check_dim(q_act, model.n_actuated())?;
    Ok(model
        .joint_sources()
        .iter()
        .map(|s| s.ratio * q_act[s.actuated])
        .collect())
}

fn check_dim(v: &[f64], expected: usize) -> Result<(), KinematicsError> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(KinematicsError::Dimension {
            expected,
            actual: v.len(),
        })
    }
}

/// Poses of every link in the palm frame for a full joint vector.
pub fn link_poses(model: &HandModel, q_full: &[f64]) -> Vec<RigidTransform> {
    let mut poses = vec![RigidTransform::identity(); model.n_links()];
    let joints = model.joints();
    for &i in model.eval_order() {
        let j = &joints[i];
        poses[j.child_link] =
            poses[j.parent_link] * RigidTransform::from_translation(j.origin) * joint_transform(j, q_full[i]);
    }
    poses
}

/// Fingertip poses (thumb, index, middle, ring, pinky) in the palm frame.
pub fn forward_kinematics(model: &HandModel, q_act: &[f64]) -> Result<Vec<RigidTransform>, KinematicsError> {
    let q_full = expand_coupled(q_act, model)?;
    let links = link_poses(model, &q_full);
    Ok(model
        .fingertips()
        .iter()
        .map(|tip| links[tip.link] * RigidTransform::from_translation(tip.offset))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipVelocity {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

/// Fingertip linear/angular velocities (palm frame) by central differences
/// of [`forward_kinematics`] along each moving joint.
pub fn fingertip_velocities(
    model: &HandModel,
    q_act: &[f64],
    qdot_act: &[f64],
) -> Result<Vec<TipVelocity>, KinematicsError> {
    check_dim(q_act, model.n_actuated())?;
    check_dim(qdot_act, model.n_actuated())?;
    let mut out = vec![
        TipVelocity {
            linear: Vector3::zeros(),
            angular: Vector3::zeros(),
        };
        model.n_fingertips()
    ];
    let mut q = q_act.to_vec();
    for (j, &rate) in qdot_act.iter().enumerate() {
        if rate == 0.0 {
            continue;
        }
        q[j] = q_act[j] + FD_STEP;
        let plus = forward_kinematics(model, &q)?;
        q[j] = q_act[j] - FD_STEP;
        let minus = forward_kinematics(model, &q)?;
        q[j] = q_act[j];
        for ((v, p), m) in out.iter_mut().zip(&plus).zip(&minus) {
            v.linear += (p.translation - m.translation) * (rate / (2.0 * FD_STEP));
            let delta = p.rotation * m.rotation.inverse();
            v.angular += delta.scaled_axis() * (rate / (2.0 * FD_STEP));
        }
    }
    Ok(out)
}

/// Pose plus velocity of one fingertip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FingertipState {
    pub pose: RigidTransform,
    pub linear_velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

pub fn fingertip_states(
    model: &HandModel,
    q_act: &[f64],
    qdot_act: &[f64],
) -> Result<Vec<FingertipState>, KinematicsError> {
    let poses = forward_kinematics(model, q_act)?;
    let vels = fingertip_velocities(model, q_act, qdot_act)?;
    Ok(poses
        .into_iter()
        .zip(vels)
        .map(|(pose, v)| FingertipState {
            pose,
            linear_velocity: v.linear,
            angular_velocity: v.angular,
        })
        .collect())
}
