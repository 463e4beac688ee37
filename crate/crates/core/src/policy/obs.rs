//! Observation assembly.
//!
//! Actor layout (99): projected gravity 3, body angular velocity 3, joint
//! angles 12, joint velocities 12, previous action 12, joint history 48 (two
//! past control ticks of angles then velocities, most recent first), planned
//! contacts 4, phase sin/cos 2, command 3.
//!
//! Critic layout (55): the actor layout without the history, measured
//! without noise, followed by body-frame linear velocity 3 and base height
//! above the terrain 1.
//!
//! Joint angles enter relative to `q_init`; velocities are scaled by
//! [`JOINT_VELOCITY_SCALE`] and [`ANGULAR_VELOCITY_SCALE`]. The previous
//! action enters as its PD-target offset in radians times
//! [`PREV_ACTION_SCALE`], independent of the decoder's `sigma`.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{RobotState, NUM_JOINTS, NUM_LEGS};

pub const HISTORY_LEN: usize = 2;
pub const ACTOR_OBS_DIM: usize = 3 + 3 + 12 + 12 + 12 + HISTORY_LEN * 24 + NUM_LEGS + 2 + 3;
pub const CRITIC_OBS_DIM: usize = 3 + 3 + 12 + 12 + 12 + NUM_LEGS + 2 + 3 + 3 + 1;

pub const JOINT_VELOCITY_SCALE: f64 = 0.1;
pub const ANGULAR_VELOCITY_SCALE: f64 = 0.25;
pub const PREV_ACTION_SCALE: f64 = 3.0;
pub const HEIGHT_OFFSET: f64 = 0.28;
pub const HEIGHT_SCALE: f64 = 10.0;

/// Half-widths of the zero-mean uniform sensor noise, in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsNoise {
    pub orientation: f64,
    pub angular_velocity: f64,
    pub joint_angle: f64,
    pub joint_velocity: f64,
}

impl Default for ObsNoise {
    fn default() -> Self {
        Self {
            orientation: 0.03,
            angular_velocity: 0.2,
            joint_angle: 0.01,
            joint_velocity: 0.5,
        }
    }
}

impl ObsNoise {
    pub fn zero() -> Self {
        Self {
            orientation: 0.0,
            angular_velocity: 0.0,
            joint_angle: 0.0,
            joint_velocity: 0.0,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            orientation: self.orientation * k,
            angular_velocity: self.angular_velocity * k,
            joint_angle: self.joint_angle * k,
            joint_velocity: self.joint_velocity * k,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::zero()
    }
}

fn jitter<R: Rng + ?Sized>(v: f64, half_width: f64, rng: &mut R) -> f64 {
    if half_width > 0.0 {
        v + rng.random_range(-half_width..=half_width)
    } else {
        v
    }
}

/// Proprioceptive readings the actor sees, already normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proprio {
    pub gravity: [f64; 3],
    pub angular_velocity: [f64; 3],
    pub joint_angles: [f64; NUM_JOINTS],
    pub joint_velocities: [f64; NUM_JOINTS],
}

impl Proprio {
    /// Read the state, adding noise unless `noise` is zero. The random stream
    /// is untouched when the noise is zero.
    pub fn measure<R: Rng + ?Sized>(
        s: &RobotState,
        q_init: &[f64; NUM_JOINTS],
        noise: &ObsNoise,
        rng: &mut R,
    ) -> Self {
        let g = s.projected_gravity();
        let w = s.base_angular_velocity;
        let mut out = Self {
            gravity: [g.x, g.y, g.z],
            angular_velocity: [w.x, w.y, w.z],
            joint_angles: [0.0; NUM_JOINTS],
            joint_velocities: [0.0; NUM_JOINTS],
        };
        if !noise.is_zero() {
            for v in &mut out.gravity {
                *v = jitter(*v, noise.orientation, rng);
            }
            for v in &mut out.angular_velocity {
                *v = jitter(*v, noise.angular_velocity, rng);
            }
        }
        for v in &mut out.angular_velocity {
            *v *= ANGULAR_VELOCITY_SCALE;
        }
        for j in 0..NUM_JOINTS {
            let (mut q, mut qd) = (s.joint_angles[j], s.joint_velocities[j]);
            if !noise.is_zero() {
                q = jitter(q, noise.joint_angle, rng);
                qd = jitter(qd, noise.joint_velocity, rng);
            }
            out.joint_angles[j] = q - q_init[j];
            out.joint_velocities[j] = qd * JOINT_VELOCITY_SCALE;
        }
        out
    }
}

/// Ring of past normalized joint readings, zero-padded after a reset.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsHistory {
    past: VecDeque<([f64; NUM_JOINTS], [f64; NUM_JOINTS])>,
}

impl Default for ObsHistory {
    fn default() -> Self {
        let mut h = Self {
            past: VecDeque::with_capacity(HISTORY_LEN + 1),
        };
        h.reset();
        h
    }
}

impl ObsHistory {
    pub fn reset(&mut self) {
        self.past.clear();
        for _ in 0..HISTORY_LEN {
            self.past.push_back(([0.0; NUM_JOINTS], [0.0; NUM_JOINTS]));
        }
    }

    /// Record the reading of the tick that just ended.
    pub fn push(&mut self, p: &Proprio) {
        self.past.push_front((p.joint_angles, p.joint_velocities));
        self.past.truncate(HISTORY_LEN);
    }

    /// `k = 0` is the most recent past tick.
    pub fn get(&self, k: usize) -> &([f64; NUM_JOINTS], [f64; NUM_JOINTS]) {
        &self.past[k]
    }
}

/// Everything besides the proprioception that both roles share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskInputs {
    pub prev_action: [f32; NUM_JOINTS],
    pub planned_contacts: [bool; NUM_LEGS],
    pub phase: f64,
    pub command: [f64; 3],
}

fn put(out: &mut Vec<f32>, vals: &[f64]) {
    out.extend(vals.iter().map(|v| *v as f32));
}

fn put_task(out: &mut Vec<f32>, task: &TaskInputs) {
    let c: Vec<f64> = task
        .planned_contacts
        .iter()
        .map(|c| if *c { 1.0 } else { 0.0 })
        .collect();
    put(out, &c);
    let angle = 2.0 * std::f64::consts::PI * task.phase;
    put(out, &[angle.sin(), angle.cos()]);
    put(out, &task.command);
}

pub fn actor_observation(p: &Proprio, history: &ObsHistory, task: &TaskInputs, out: &mut Vec<f32>) {
    out.clear();
    put(out, &p.gravity);
    put(out, &p.angular_velocity);
    put(out, &p.joint_angles);
    put(out, &p.joint_velocities);
    out.extend_from_slice(&task.prev_action);
    for k in 0..HISTORY_LEN {
        let (q, qd) = history.get(k);
        put(out, q);
        put(out, qd);
    }
    put_task(out, task);
    debug_assert_eq!(out.len(), ACTOR_OBS_DIM);
}

/// `exact` must be a noise-free [`Proprio`] of the same state.
pub fn critic_observation(
    exact: &Proprio,
    s: &RobotState,
    height_above_terrain: f64,
    task: &TaskInputs,
    out: &mut Vec<f32>,
) {
    out.clear();
    put(out, &exact.gravity);
    put(out, &exact.angular_velocity);
    put(out, &exact.joint_angles);
    put(out, &exact.joint_velocities);
    out.extend_from_slice(&task.prev_action);
    put_task(out, task);
    let v = s.rotation().transpose() * s.base_linear_velocity;
    put(out, &[v.x, v.y, v.z]);
    put(out, &[(height_above_terrain - HEIGHT_OFFSET) * HEIGHT_SCALE]);
    debug_assert_eq!(out.len(), CRITIC_OBS_DIM);
}

pub fn check_dim(obs: &[f32], expected: usize) -> Result<()> {
    if obs.len() == expected {
        Ok(())
    } else {
        Err(Error::Dimension {
            what: "observation",
            expected,
            got: obs.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::nominal_pose;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task(phase: f64) -> TaskInputs {
        TaskInputs {
            prev_action: [0.0; NUM_JOINTS],
            planned_contacts: [true, false, false, true],
            phase,
            command: [0.5, 0.0, 0.1],
        }
    }

    #[test]
    fn dimensions() {
        assert_eq!(ACTOR_OBS_DIM, 99);
        assert_eq!(CRITIC_OBS_DIM, 55);
        let s = RobotState::standing(0.28, nominal_pose());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Proprio::measure(&s, &nominal_pose(), &ObsNoise::zero(), &mut rng);
        let mut out = Vec::new();
        actor_observation(&p, &ObsHistory::default(), &task(0.0), &mut out);
        check_dim(&out, ACTOR_OBS_DIM).unwrap();
        critic_observation(&p, &s, 0.28, &task(0.0), &mut out);
        check_dim(&out, CRITIC_OBS_DIM).unwrap();
        assert!(check_dim(&out, ACTOR_OBS_DIM).is_err());
    }

    #[test]
    fn upright_gravity_and_phase_encoding() {
        let s = RobotState::standing(0.28, nominal_pose());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Proprio::measure(&s, &nominal_pose(), &ObsNoise::zero(), &mut rng);
        let mut out = Vec::new();
        actor_observation(&p, &ObsHistory::default(), &task(0.3), &mut out);
        assert_eq!(&out[0..3], &[0.0, 0.0, -1.0]);
        let a = 2.0 * std::f64::consts::PI * 0.3;
        assert_eq!(out[94], a.sin() as f32);
        assert_eq!(out[95], a.cos() as f32);
        assert_eq!(&out[90..94], &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn noiseless_observation_is_pure() {
        let mut s = RobotState::standing(0.3, nominal_pose());
        s.joint_velocities[4] = 1.5;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let p1 = Proprio::measure(&s, &nominal_pose(), &ObsNoise::zero(), &mut rng);
        let p2 = Proprio::measure(&s, &nominal_pose(), &ObsNoise::zero(), &mut rng);
        actor_observation(&p1, &ObsHistory::default(), &task(0.1), &mut a);
        actor_observation(&p2, &ObsHistory::default(), &task(0.1), &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn noise_stays_within_bounds() {
        let s = RobotState::standing(0.3, nominal_pose());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = ObsNoise::default();
        for _ in 0..200 {
            let p = Proprio::measure(&s, &nominal_pose(), &noise, &mut rng);
            assert!(p.gravity[2] >= -1.03 - 1e-12 && p.gravity[2] <= -0.97 + 1e-12);
            assert!(p.joint_angles.iter().all(|q| q.abs() <= 0.01 + 1e-12));
            assert!(p.joint_velocities.iter().all(|v| v.abs() <= 0.05 + 1e-12));
        }
    }

    #[test]
    fn history_holds_past_ticks_in_order() {
        let q0 = nominal_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut history = ObsHistory::default();
        let mut readings = Vec::new();
        for k in 0..3 {
            let mut s = RobotState::standing(0.3, q0);
            s.joint_angles[0] = 0.1 * (k + 1) as f64;
            s.joint_velocities[2] = -(k as f64);
            let p = Proprio::measure(&s, &q0, &ObsNoise::zero(), &mut rng);
            readings.push(p);
            if k < 2 {
                history.push(&p);
            }
        }
        let mut out = Vec::new();
        actor_observation(&readings[2], &history, &task(0.0), &mut out);
        let slot = |k: usize| &out[42 + 24 * k..42 + 24 * (k + 1)];
        let expect = |p: &Proprio| {
            p.joint_angles
                .iter()
                .chain(&p.joint_velocities)
                .map(|v| *v as f32)
                .collect::<Vec<_>>()
        };
        assert_eq!(slot(0), expect(&readings[1]).as_slice());
        assert_eq!(slot(1), expect(&readings[0]).as_slice());
        assert!((out[6] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn fresh_history_is_zero_padded() {
        let h = ObsHistory::default();
        for k in 0..HISTORY_LEN {
            assert_eq!(h.get(k).0, [0.0; NUM_JOINTS]);
            assert_eq!(h.get(k).1, [0.0; NUM_JOINTS]);
        }
    }
}
