use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::sim::{foot_jacobian, forward_kinematics, RobotModel};

/// Task-space impedance gains for swing feet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwingGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for SwingGains {
    fn default() -> Self {
        Self { kp: 150.0, kd: 5.0 }
    }
}

/// Joint torques pulling the foot toward a body-frame reference:
/// `J^T [kp (p_ref - p) + kd (v_ref - v)]`.
pub fn swing_torque(
    leg: usize,
    angles: &[f64; 3],
    velocities: &[f64; 3],
    ref_position: &Vector3<f64>,
    ref_velocity: &Vector3<f64>,
    model: &RobotModel,
    gains: &SwingGains,
) -> Vector3<f64> {
    let p = forward_kinematics(angles, leg, model);
    let jac = foot_jacobian(angles, leg, model);
    let v = jac * Vector3::from_column_slice(velocities);
    let force = (ref_position - p) * gains.kp + (ref_velocity - v) * gains.kd;
    jac.transpose() * force
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn on_reference_gives_zero_torque() {
        let model = RobotModel::default();
        let q = [0.1, -0.7, 1.4];
        let qd = [0.3, -1.0, 2.0];
        let p = forward_kinematics(&q, 2, &model);
        let v = foot_jacobian(&q, 2, &model) * Vector3::from_column_slice(&qd);
        let tau = swing_torque(2, &q, &qd, &p, &v, &model, &SwingGains::default());
        assert!(tau.norm() < 1e-12);
    }

    #[test]
    fn position_error_maps_through_jacobian_transpose() {
        let model = RobotModel::default();
        let q = [0.0, -0.8, 1.6];
        let e = 0.01;
        let p = forward_kinematics(&q, 0, &model) + Vector3::new(0.0, 0.0, e);
        let tau = swing_torque(0, &q, &[0.0; 3], &p, &Vector3::zeros(), &model, &SwingGains::default());
        let expect = foot_jacobian(&q, 0, &model).transpose() * Vector3::new(0.0, 0.0, 150.0 * e);
        assert!((tau - expect).norm() < 1e-12);
    }

    #[test]
    fn torque_descends_impedance_energy() {
        // With matching velocity the torque is minus the gradient of
        // 1/2 kp |p(q) - p_ref|^2.
        let model = RobotModel::default();
        let gains = SwingGains::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let leg = rng.random_range(0..4);
            let q = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-1.5..0.5),
                rng.random_range(0.5..2.2),
            ];
            let target = forward_kinematics(&q, leg, &model)
                + Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                );
            let energy = |q: &[f64; 3]| {
                0.5 * gains.kp * (forward_kinematics(q, leg, &model) - target).norm_squared()
            };
            let h = 1e-6;
            let mut grad = Vector3::zeros();
            for j in 0..3 {
                let mut qp = q;
                let mut qm = q;
                qp[j] += h;
                qm[j] -= h;
                grad[j] = (energy(&qp) - energy(&qm)) / (2.0 * h);
            }
            let tau = swing_torque(leg, &q, &[0.0; 3], &target, &Vector3::zeros(), &model, &gains);
            assert!((tau + grad).norm() < 1e-6 * (1.0 + grad.norm()), "{tau} vs {grad}");
        }
    }
}
