use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_LEGS: usize = 4;
pub const NUM_JOINTS: usize = 12;

/// Leg indices in joint order.
pub const LEG_NAMES: [&str; NUM_LEGS] = ["FR", "FL", "RR", "RL"];

/// +1 for left legs, -1 for right legs.
#[inline]
pub fn side_sign(leg: usize) -> f64 {
    if leg % 2 == 0 {
        -1.0
    } else {
        1.0
    }
}

/// Rigid-body and kinematic description of the quadruped.
///
/// Defaults approximate a Mini Cheetah class robot. Leg links are massless;
/// each joint carries a reflected rotor inertia instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub base_mass: f64,
    pub base_inertia: Matrix3<f64>,
    pub hip_offsets: [Vector3<f64>; NUM_LEGS],
    /// `[abduction, upper, lower]` link lengths.
    pub link_lengths: [f64; 3],
    pub joint_limits: [[f64; 2]; NUM_JOINTS],
    pub joint_reflected_inertia: f64,
    pub torque_limit: f64,
}

impl Default for RobotModel {
    fn default() -> Self {
        let hx = 0.19;
        let hy = 0.049;
        let leg_limits = [[-0.8, 0.8], [-2.6, 1.2], [0.3, 2.7]];
        let mut joint_limits = [[0.0; 2]; NUM_JOINTS];
        for (j, lim) in joint_limits.iter_mut().enumerate() {
            *lim = leg_limits[j % 3];
        }
        Self {
            base_mass: 9.0,
            base_inertia: Matrix3::from_diagonal(&Vector3::new(0.07, 0.26, 0.242)),
            hip_offsets: [
                Vector3::new(hx, -hy, 0.0),
                Vector3::new(hx, hy, 0.0),
                Vector3::new(-hx, -hy, 0.0),
                Vector3::new(-hx, hy, 0.0),
            ],
            link_lengths: [0.062, 0.209, 0.195],
            joint_limits,
            joint_reflected_inertia: 0.005,
            torque_limit: 17.0,
        }
    }
}

impl RobotModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_mass > 0.0) {
            return Err(Error::Config("base_mass must be positive".into()));
        }
        if self.link_lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("link lengths must be positive".into()));
        }
        if !(self.joint_reflected_inertia > 0.0) || !(self.torque_limit > 0.0) {
            return Err(Error::Config(
                "joint inertia and torque limit must be positive".into(),
            ));
        }
        let sym = (self.base_inertia - self.base_inertia.transpose()).abs().max();
        if sym > 1e-12 || self.base_inertia.cholesky().is_none() {
            return Err(Error::Config(
                "base_inertia must be symmetric positive definite".into(),
            ));
        }
        if self.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(Error::Config("joint limits must satisfy min < max".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn clamp_joint(&self, joint: usize, angle: f64) -> f64 {
        let [lo, hi] = self.joint_limits[joint];
        angle.clamp(lo, hi)
    }

    pub fn clamp_joints(&self, angles: &mut [f64; NUM_JOINTS]) {
        for (j, a) in angles.iter_mut().enumerate() {
            *a = self.clamp_joint(j, *a);
        }
    }

    pub fn inertia_inverse(&self) -> Matrix3<f64> {
        self.base_inertia
            .try_inverse()
            .expect("validated inertia is invertible")
    }
}

/// Joint-space PD gains of the torque law `tau = kp (target - q) - kd qdot`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: 17.0, kd: 0.4 }
    }
}

impl PdGains {
    /// Torque produced for a target angle.
    #[inline]
    pub fn torque(&self, target: f64, q: f64, qd: f64) -> f64 {
        self.kp * (target - q) - self.kd * qd
    }

    /// Target angle that makes [`PdGains::torque`] return `tau` at `(q, qd)`.
    #[inline]
    pub fn target_for_torque(&self, tau: f64, q: f64, qd: f64) -> f64 {
        (self.kp * q + self.kd * qd + tau) / self.kp
    }
}

/// Penalty contact constants. The tangential compliance turns the stick
/// constraint into a very stiff damper so the per-foot solve stays regular at
/// kinematic singularities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactParams {
    pub stiffness: f64,
    pub damping: f64,
    pub tangential_compliance: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            stiffness: 8000.0,
            damping: 200.0,
            tangential_compliance: 1e-5,
        }
    }
}

/// Everything the integrator needs beyond the robot description. Gains and
/// motor friction are the quantities domain randomization perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub gravity: f64,
    pub dt: f64,
    pub gains: PdGains,
    /// Coulomb friction torque opposing joint motion, N*m.
    pub motor_friction: f64,
    pub contact: ContactParams,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            dt: 0.001,
            gains: PdGains::default(),
            motor_friction: 0.0,
            contact: ContactParams::default(),
        }
    }
}
