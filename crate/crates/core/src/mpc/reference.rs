//! Reference generation: command integration, Raibert footholds and cubic
//! Bézier swing curves.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::gait::GaitSchedule;
use super::srb::MpcState;
use crate::error::{ensure_finite, Result};
use crate::sim::{side_sign, RobotModel, NUM_LEGS};
use crate::terrain::Terrain;

/// Body velocity command `[v_x, v_y, omega_z]` in the yaw-aligned frame.
pub type Command = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    pub horizon: usize,
    pub dt: f64,
    /// Base height above the ground under the base.
    pub height: f64,
    pub raibert_gain: f64,
    pub swing_apex: f64,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        Self {
            horizon: 26,
            dt: 0.01,
            height: 0.28,
            raibert_gain: 0.03,
            swing_apex: 0.06,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicBezier {
    pub points: [Vector3<f64>; 4],
}

impl CubicBezier {
    /// Curve from `start` to `end` whose midpoint rises `apex` above the
    /// chord.
    pub fn swing(start: Vector3<f64>, end: Vector3<f64>, apex: f64) -> Self {
        let lift = Vector3::new(0.0, 0.0, 4.0 / 3.0 * apex);
        Self {
            points: [start, start + lift, end + lift, end],
        }
    }

    pub fn position(&self, s: f64) -> Vector3<f64> {
        let s = s.clamp(0.0, 1.0);
        let u = 1.0 - s;
        let [p0, p1, p2, p3] = self.points;
        p0 * (u * u * u) + p1 * (3.0 * u * u * s) + p2 * (3.0 * u * s * s) + p3 * (s * s * s)
    }

    /// Derivative with respect to the curve parameter.
    pub fn derivative(&self, s: f64) -> Vector3<f64> {
        let s = s.clamp(0.0, 1.0);
        let u = 1.0 - s;
        let [p0, p1, p2, p3] = self.points;
        (p1 - p0) * (3.0 * u * u) + (p2 - p1) * (6.0 * u * s) + (p3 - p2) * (3.0 * s * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub states: Vec<MpcState>,
    pub footholds: [Vector3<f64>; NUM_LEGS],
    pub swing_curves: [CubicBezier; NUM_LEGS],
}

/// Rotation about world z.
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Raibert foothold: hip ground projection, plus half a stance of travel,
/// plus velocity-error feedback. Velocities are horizontal, world frame.
pub fn raibert_foothold(
    hip_ground: Vector3<f64>,
    velocity: Vector3<f64>,
    commanded: Vector3<f64>,
    stance_duration: f64,
    gain: f64,
) -> Vector3<f64> {
    let mut v = velocity;
    v.z = 0.0;
    let mut vc = commanded;
    vc.z = 0.0;
    hip_ground + v * (0.5 * stance_duration) + (v - vc) * gain
}

/// Base states for stages `0..=horizon`: stage 0 is the current state, later
/// stages integrate the command from the current pose at constant height.
pub fn reference_states(
    current: &MpcState,
    command: &Command,
    params: &ReferenceParams,
    ground_height: f64,
) -> Vec<MpcState> {
    let mut states = Vec::with_capacity(params.horizon + 1);
    states.push(*current);
    let mut yaw = current.euler_zyx.z;
    let mut pos = current.position;
    pos.z = ground_height + params.height;
    for _ in 0..params.horizon {
        let v_world = yaw_rotation(yaw) * Vector3::new(command[0], command[1], 0.0);
        pos += v_world * params.dt;
        yaw += command[2] * params.dt;
        let v_next = yaw_rotation(yaw) * Vector3::new(command[0], command[1], 0.0);
        states.push(MpcState {
            euler_zyx: Vector3::new(0.0, 0.0, yaw),
            position: pos,
            angular_velocity: Vector3::new(0.0, 0.0, command[2]),
            linear_velocity: v_next,
        });
    }
    states
}

/// Horizontal position of the leg's shoulder (hip joint shifted outward by
/// the abduction link, i.e. where the foot rests under a vertical leg) at
/// base pose `(position, yaw)`, dropped onto the terrain.
pub fn hip_ground_projection(
    model: &RobotModel,
    leg: usize,
    position: &Vector3<f64>,
    yaw: f64,
    terrain: &Terrain,
) -> Vector3<f64> {
    let shoulder = model.hip_offsets[leg] + Vector3::new(0.0, side_sign(leg) * model.link_lengths[0], 0.0);
    let hip = position + yaw_rotation(yaw) * shoulder;
    Vector3::new(hip.x, hip.y, terrain.height(hip.x, hip.y))
}

/// Full reference for one control tick at time `t`.
///
/// `swing_start` holds each foot's lift-off position (stance feet: their
/// current position); swing curves run from it to the foothold.
#[allow(clippy::too_many_arguments)]
pub fn build_reference(
    current: &MpcState,
    command: &Command,
    schedule: &GaitSchedule,
    t: f64,
    swing_start: &[Vector3<f64>; NUM_LEGS],
    model: &RobotModel,
    terrain: &Terrain,
    params: &ReferenceParams,
) -> Result<ReferenceTrajectory> {
    ensure_finite(command, "command")?;
    current.check()?;
    let ground = terrain.height(current.position.x, current.position.y);
    let states = reference_states(current, command, params, ground);

    let yaw = current.euler_zyx.z;
    let commanded = yaw_rotation(yaw) * Vector3::new(command[0], command[1], 0.0);
    let mut footholds = [Vector3::zeros(); NUM_LEGS];
    let mut swing_curves = [CubicBezier::swing(Vector3::zeros(), Vector3::zeros(), 0.0); NUM_LEGS];
    for leg in 0..NUM_LEGS {
        // Next touchdown: end of the current swing, or the swing after the
        // current stance.
        let mut until_touchdown = schedule.time_remaining(leg, t);
        if schedule.in_stance(leg, t) {
            until_touchdown += schedule.swing_duration;
        }
        let base_td = current.position + commanded * until_touchdown;
        let yaw_td = yaw + command[2] * until_touchdown;
        let hip = hip_ground_projection(model, leg, &base_td, yaw_td, terrain);
        let mut fh = raibert_foothold(
            hip,
            current.linear_velocity,
            commanded,
            schedule.stance_duration,
            params.raibert_gain,
        );
        fh.z = terrain.height(fh.x, fh.y);
        footholds[leg] = fh;
        swing_curves[leg] = CubicBezier::swing(swing_start[leg], fh, params.swing_apex);
    }
    Ok(ReferenceTrajectory {
        states,
        footholds,
        swing_curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at_rest() -> MpcState {
        MpcState {
            euler_zyx: Vector3::zeros(),
            position: Vector3::new(0.0, 0.0, 0.28),
            angular_velocity: Vector3::zeros(),
            linear_velocity: Vector3::zeros(),
        }
    }

    #[test]
    fn bezier_endpoints_and_apex() {
        let a = Vector3::new(0.1, -0.2, 0.0);
        let b = Vector3::new(0.3, -0.1, 0.0);
        let c = CubicBezier::swing(a, b, 0.06);
        assert!((c.position(0.0) - a).norm() < 1e-15);
        assert!((c.position(1.0) - b).norm() < 1e-15);
        assert!((c.position(0.5).z - 0.06).abs() < 1e-12);
        let h = 1e-6;
        for s in [0.1, 0.4, 0.77] {
            let fd = (c.position(s + h) - c.position(s - h)) / (2.0 * h);
            assert!((fd - c.derivative(s)).norm() < 1e-8);
        }
    }

    #[test]
    fn raibert_half_stance_offset() {
        let v = Vector3::new(0.5, 0.0, 0.0);
        let fh = raibert_foothold(Vector3::zeros(), v, v, 0.13, 0.0);
        assert!((fh.x - 0.065 * 0.5).abs() < 1e-15);
        // Feedback term acts on velocity error only.
        let slow = raibert_foothold(Vector3::zeros(), v, Vector3::new(1.0, 0.0, 0.0), 0.13, 0.03);
        assert!((slow.x - (0.0325 - 0.015)).abs() < 1e-15);
    }

    #[test]
    fn zero_command_keeps_footholds_under_hips() {
        let model = RobotModel::default();
        let terrain = Terrain::flat(1.0);
        let cur = at_rest();
        let starts = [Vector3::zeros(); NUM_LEGS];
        let r = build_reference(
            &cur,
            &[0.0; 3],
            &GaitSchedule::default(),
            0.05,
            &starts,
            &model,
            &terrain,
            &ReferenceParams::default(),
        )
        .unwrap();
        for leg in 0..NUM_LEGS {
            let hip = model.hip_offsets[leg];
            let y = hip.y + side_sign(leg) * model.link_lengths[0];
            assert!((r.footholds[leg] - Vector3::new(hip.x, y, 0.0)).norm() < 1e-12);
        }
        for s in &r.states {
            assert!((s.position - cur.position).norm() < 1e-12);
        }
    }

    #[test]
    fn yaw_rate_traces_circle() {
        let cmd = [0.5, 0.0, 0.5];
        let p = ReferenceParams::default();
        let states = reference_states(&at_rest(), &cmd, &p, 0.0);
        let radius = cmd[0] / cmd[2];
        // Exact chord-walk of the explicit integration: the points lie on a
        // circle of radius r' = dt v / (2 sin(dt w / 2)) around a fixed center.
        let step = p.dt * cmd[0];
        let r_exact = step / (2.0 * (p.dt * cmd[2] / 2.0).sin());
        assert!((r_exact - radius).abs() < 1e-3);
        let center = Vector3::new(0.0, 0.0, 0.28)
            + yaw_rotation(-p.dt * cmd[2] / 2.0) * Vector3::new(0.0, r_exact, 0.0);
        for (k, s) in states.iter().enumerate() {
            if k > 0 {
                assert!(((s.position - center).norm() - r_exact).abs() < 1e-9, "k={k}");
                assert!((s.euler_zyx.z - k as f64 * p.dt * cmd[2]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_velocity_matches_command_in_yaw_frame() {
        let mut cur = at_rest();
        cur.euler_zyx.z = 0.7;
        let cmd = [0.4, -0.2, 0.3];
        let states = reference_states(&cur, &cmd, &ReferenceParams::default(), 0.0);
        for s in &states[1..] {
            let body = yaw_rotation(s.euler_zyx.z).transpose() * s.linear_velocity;
            assert!((body.x - 0.4).abs() < 1e-12 && (body.y + 0.2).abs() < 1e-12);
            assert!((s.position.z - 0.28).abs() < 1e-15);
        }
    }

    #[test]
    fn singular_pitch_is_rejected() {
        let mut cur = at_rest();
        cur.euler_zyx.y = std::f64::consts::FRAC_PI_2;
        let err = build_reference(
            &cur,
            &[0.0; 3],
            &GaitSchedule::default(),
            0.0,
            &[Vector3::zeros(); NUM_LEGS],
            &RobotModel::default(),
            &Terrain::flat(1.0),
            &ReferenceParams::default(),
        );
        assert!(matches!(err, Err(crate::Error::EulerSingularity { .. })));
    }
}
