//! Closed-form leg kinematics.
//!
//! Each leg is an abduction joint about the body x axis followed by a hip and
//! a knee pitching about the rotated y axis. With all angles zero the leg
//! hangs straight down below the hip pitch joint, which sits `side * l_ab`
//! sideways from the hip offset.

use nalgebra::{Matrix3, Vector3};

use super::model::{side_sign, RobotModel};

/// Foot position in the body frame for one leg's `[abduction, hip, knee]`.
pub fn forward_kinematics(angles: &[f64; 3], leg: usize, model: &RobotModel) -> Vector3<f64> {
    let [l_ab, l_up, l_low] = model.link_lengths;
    let side = side_sign(leg);
    let [a, h, k] = *angles;
    let (sa, ca) = a.sin_cos();
    let hk = h + k;
    let x = -l_up * h.sin() - l_low * hk.sin();
    let z = -l_up * h.cos() - l_low * hk.cos();
    let y = side * l_ab;
    model.hip_offsets[leg] + Vector3::new(x, ca * y - sa * z, sa * y + ca * z)
}

/// Knee position in the body frame, used by the ground-contact proxy.
pub fn knee_position(angles: &[f64; 3], leg: usize, model: &RobotModel) -> Vector3<f64> {
    let [l_ab, l_up, _] = model.link_lengths;
    let side = side_sign(leg);
    let [a, h, _] = *angles;
    let (sa, ca) = a.sin_cos();
    let x = -l_up * h.sin();
    let z = -l_up * h.cos();
    let y = side * l_ab;
    model.hip_offsets[leg] + Vector3::new(x, ca * y - sa * z, sa * y + ca * z)
}

/// Body-frame foot Jacobian `d foot / d [abduction, hip, knee]`. Singular
/// configurations are returned as-is.
pub fn foot_jacobian(angles: &[f64; 3], leg: usize, model: &RobotModel) -> Matrix3<f64> {
    let [l_ab, l_up, l_low] = model.link_lengths;
    let side = side_sign(leg);
    let [a, h, k] = *angles;
    let (sa, ca) = a.sin_cos();
    let (sh, ch) = h.sin_cos();
    let (shk, chk) = (h + k).sin_cos();
    let y = side * l_ab;
    let z = -l_up * ch - l_low * chk;

    let dx_dh = -l_up * ch - l_low * chk;
    let dx_dk = -l_low * chk;
    let dz_dh = l_up * sh + l_low * shk;
    let dz_dk = l_low * shk;

    Matrix3::new(
        0.0,
        dx_dh,
        dx_dk,
        -sa * y - ca * z,
        -sa * dz_dh,
        -sa * dz_dk,
        ca * y - sa * z,
        ca * dz_dh,
        ca * dz_dk,
    )
}

#[inline]
pub fn leg_angles(joints: &[f64; 12], leg: usize) -> [f64; 3] {
    [joints[3 * leg], joints[3 * leg + 1], joints[3 * leg + 2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_jacobian(q: &[f64; 3], leg: usize, model: &RobotModel, h: f64) -> Matrix3<f64> {
        let mut jac = Matrix3::zeros();
        for c in 0..3 {
            let mut qp = *q;
            let mut qm = *q;
            qp[c] += h;
            qm[c] -= h;
            let d = (forward_kinematics(&qp, leg, model) - forward_kinematics(&qm, leg, model))
                / (2.0 * h);
            jac.set_column(c, &d);
        }
        jac
    }

    #[test]
    fn straight_leg_hangs_below_hip() {
        let model = RobotModel::default();
        let [l_ab, l_up, l_low] = model.link_lengths;
        for leg in 0..4 {
            let p = forward_kinematics(&[0.0; 3], leg, &model);
            let hip = model.hip_offsets[leg];
            assert!((p.x - hip.x).abs() < 1e-15);
            assert!((p.y - (hip.y + side_sign(leg) * l_ab)).abs() < 1e-15);
            assert!((p.z - (hip.z - (l_up + l_low))).abs() < 1e-15);
        }
    }

    #[test]
    fn right_angle_knee_matches_planar_geometry() {
        // Upper link straight down, lower link rotated a quarter turn: the foot
        // ends l_low behind the knee at the knee's height.
        let model = RobotModel::default();
        let [l_ab, l_up, l_low] = model.link_lengths;
        let p = forward_kinematics(&[0.0, 0.0, std::f64::consts::FRAC_PI_2], 0, &model);
        let hip = model.hip_offsets[0];
        assert!((p.x - (hip.x - l_low)).abs() < 1e-12);
        assert!((p.y - (hip.y - l_ab)).abs() < 1e-12);
        assert!((p.z - (hip.z - l_up)).abs() < 1e-12);
    }

    #[test]
    fn left_and_right_legs_mirror() {
        let model = RobotModel::default();
        let q_right = [0.3, -0.7, 1.4];
        let q_left = [-0.3, -0.7, 1.4];
        for (r, l) in [(0, 1), (2, 3)] {
            let pr = forward_kinematics(&q_right, r, &model);
            let pl = forward_kinematics(&q_left, l, &model);
            assert!((pr.x - pl.x).abs() < 1e-15);
            assert!((pr.y + pl.y).abs() < 1e-15);
            assert!((pr.z - pl.z).abs() < 1e-15);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let model = RobotModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let q = [
                rng.random_range(-0.8..0.8),
                rng.random_range(-2.0..1.0),
                rng.random_range(0.3..2.5),
            ];
            for leg in 0..4 {
                let err = (foot_jacobian(&q, leg, &model) - fd_jacobian(&q, leg, &model, 1e-6))
                    .abs()
                    .max();
                assert!(err < 1e-6, "leg {leg} err {err}");
            }
        }
    }

    #[test]
    fn straight_leg_is_singular() {
        let model = RobotModel::default();
        let det = foot_jacobian(&[0.0; 3], 1, &model).determinant();
        assert!(det.abs() < 1e-12, "det {det}");
    }

    #[test]
    fn jacobian_transpose_is_virtual_work_gradient() {
        // J^T f equals the gradient of the potential f . p(q).
        let model = RobotModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let q = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-1.5..0.5),
                rng.random_range(0.5..2.2),
            ];
            let f = Vector3::new(
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
            );
            let leg = rng.random_range(0..4);
            let tau = foot_jacobian(&q, leg, &model).transpose() * f;
            let h = 1e-6;
            for c in 0..3 {
                let mut qp = q;
                let mut qm = q;
                qp[c] += h;
                qm[c] -= h;
                let g = (f.dot(&forward_kinematics(&qp, leg, &model))
                    - f.dot(&forward_kinematics(&qm, leg, &model)))
                    / (2.0 * h);
                assert!((g - tau[c]).abs() < 1e-6, "{} vs {}", g, tau[c]);
            }
        }
    }
}
