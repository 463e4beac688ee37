use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::model::{NUM_JOINTS, NUM_LEGS};
use crate::error::{ensure_finite, Result};

/// Full simulator state. Linear velocity is expressed in the world frame,
/// angular velocity in the body frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub base_position: Vector3<f64>,
    pub base_orientation: UnitQuaternion<f64>,
    pub base_linear_velocity: Vector3<f64>,
    pub base_angular_velocity: Vector3<f64>,
    pub joint_angles: [f64; NUM_JOINTS],
    pub joint_velocities: [f64; NUM_JOINTS],
    pub time: f64,
}

impl RobotState {
    pub fn standing(height: f64, joint_angles: [f64; NUM_JOINTS]) -> Self {
        Self {
            base_position: Vector3::new(0.0, 0.0, height),
            base_orientation: UnitQuaternion::identity(),
            base_linear_velocity: Vector3::zeros(),
            base_angular_velocity: Vector3::zeros(),
            joint_angles,
            joint_velocities: [0.0; NUM_JOINTS],
            time: 0.0,
        }
    }

    #[inline]
    pub fn rotation(&self) -> Matrix3<f64> {
        *self.base_orientation.to_rotation_matrix().matrix()
    }

    /// `(roll, pitch, yaw)` of the Z-Y-X convention.
    pub fn euler_zyx(&self) -> Vector3<f64> {
        let (r, p, y) = self.base_orientation.euler_angles();
        Vector3::new(r, p, y)
    }

    pub fn yaw(&self) -> f64 {
        self.base_orientation.euler_angles().2
    }

    /// World-frame angular velocity.
    pub fn angular_velocity_world(&self) -> Vector3<f64> {
        self.base_orientation * self.base_angular_velocity
    }

    /// Gravity direction seen from the body frame.
    pub fn projected_gravity(&self) -> Vector3<f64> {
        self.base_orientation.inverse() * Vector3::new(0.0, 0.0, -1.0)
    }

    /// Angle between body z and world up.
    pub fn tilt(&self) -> f64 {
        let up = self.base_orientation * Vector3::z();
        up.z.clamp(-1.0, 1.0).acos()
    }

    pub fn check_finite(&self) -> Result<()> {
        ensure_finite(self.base_position.as_slice(), "base_position")?;
        ensure_finite(self.base_orientation.coords.as_slice(), "base_orientation")?;
        ensure_finite(
            self.base_linear_velocity.as_slice(),
            "base_linear_velocity",
        )?;
        ensure_finite(
            self.base_angular_velocity.as_slice(),
            "base_angular_velocity",
        )?;
        ensure_finite(&self.joint_angles, "joint_angles")?;
        ensure_finite(&self.joint_velocities, "joint_velocities")?;
        ensure_finite(&[self.time], "time")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FootContact {
    pub in_contact: bool,
    pub contact_point: Vector3<f64>,
    pub normal_force: f64,
    pub tangential_force: [f64; 2],
    pub slipping: bool,
}

impl FootContact {
    pub fn force(&self) -> Vector3<f64> {
        Vector3::new(
            self.tangential_force[0],
            self.tangential_force[1],
            self.normal_force,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactState {
    pub feet: [FootContact; NUM_LEGS],
}

impl ContactState {
    pub fn flags(&self) -> [bool; NUM_LEGS] {
        [0, 1, 2, 3].map(|i| self.feet[i].in_contact)
    }
}
