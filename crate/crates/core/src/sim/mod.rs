//! Quadruped plant: a single rigid base with four massless 3-DoF legs whose
//! joints carry reflected rotor inertia. Feet touch the heightfield through a
//! penalty spring-damper with Coulomb friction.

pub mod kinematics;
pub mod model;
mod state;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{ensure_finite, Result};
use crate::terrain::Terrain;

pub use kinematics::{foot_jacobian, forward_kinematics, knee_position, leg_angles};
pub use model::{
    side_sign, ContactParams, PdGains, RobotModel, SimParams, LEG_NAMES, NUM_JOINTS, NUM_LEGS,
};
pub use state::{ContactState, FootContact, RobotState};

/// Result of one integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: RobotState,
    pub contacts: ContactState,
    /// Motor torques after saturation.
    pub torques: [f64; NUM_JOINTS],
}

/// Scale `tangential` back onto the friction cone of radius `mu * normal`.
/// Admissible forces are returned unchanged.
pub fn project_friction(tangential: [f64; 2], normal: f64, mu: f64) -> [f64; 2] {
    let limit = mu * normal.max(0.0);
    let norm = tangential[0].hypot(tangential[1]);
    if norm <= limit {
        tangential
    } else if norm == 0.0 {
        [0.0, 0.0]
    } else {
        let s = limit / norm;
        [tangential[0] * s, tangential[1] * s]
    }
}

/// Per-foot quantities shared by the contact solve and the joint update.
struct LegFrame {
    foot_world: Vector3<f64>,
    /// World-frame foot Jacobian with respect to the leg's joints.
    jac_world: Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulator {
    pub model: RobotModel,
    pub params: SimParams,
    inertia_inv: Matrix3<f64>,
}

impl Simulator {
    pub fn new(model: RobotModel, params: SimParams) -> Result<Self> {
        model.validate()?;
        let inertia_inv = model.inertia_inverse();
        Ok(Self {
            model,
            params,
            inertia_inv,
        })
    }

    /// Motor torque for one joint: PD law, then saturation.
    #[inline]
    pub fn motor_torque(&self, target: f64, q: f64, qd: f64) -> f64 {
        let limit = self.model.torque_limit;
        self.params.gains.torque(target, q, qd).clamp(-limit, limit)
    }

    /// Advance one tick of `params.dt`.
    pub fn step(
        &self,
        s: &RobotState,
        pd_targets: &[f64; NUM_JOINTS],
        terrain: &Terrain,
    ) -> Result<StepOutput> {
        s.check_finite()?;
        ensure_finite(pd_targets, "pd_targets")?;

        let dt = self.params.dt;
        let inv_inertia = 1.0 / self.model.joint_reflected_inertia;
        let rot = s.rotation();

        let mut torques = [0.0; NUM_JOINTS];
        let mut qd_free = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            let (q, qd) = (s.joint_angles[j], s.joint_velocities[j]);
            let tau = self.motor_torque(pd_targets[j], q, qd);
            torques[j] = tau;
            let friction = self.params.motor_friction * (qd / 0.05).tanh();
            qd_free[j] = qd + dt * inv_inertia * (tau - friction);
        }

        let mut contacts = ContactState::default();
        let mut qd_next = qd_free;
        let mut force_sum = Vector3::zeros();
        let mut torque_sum = Vector3::zeros();

        for leg in 0..NUM_LEGS {
            let angles = leg_angles(&s.joint_angles, leg);
            let foot_body = forward_kinematics(&angles, leg, &self.model);
            let frame = LegFrame {
                foot_world: s.base_position + rot * foot_body,
                jac_world: rot * foot_jacobian(&angles, leg, &self.model),
            };
            let qd_leg = Vector3::new(qd_free[3 * leg], qd_free[3 * leg + 1], qd_free[3 * leg + 2]);
            let v_free = s.base_linear_velocity
                + rot * s.base_angular_velocity.cross(&foot_body)
                + frame.jac_world * qd_leg;

            let contact = self.solve_contact(&frame, v_free, terrain, dt * inv_inertia);
            if contact.in_contact {
                let f = contact.force();
                let dqd = frame.jac_world.transpose() * f * (dt * inv_inertia);
                for c in 0..3 {
                    qd_next[3 * leg + c] += dqd[c];
                }
                force_sum += f;
                torque_sum += (frame.foot_world - s.base_position).cross(&f);
            }
            contacts.feet[leg] = contact;
        }

        let mut next = s.clone();
        for j in 0..NUM_JOINTS {
            let q = s.joint_angles[j] + dt * qd_next[j];
            let clamped = self.model.clamp_joint(j, q);
            if clamped != q {
                qd_next[j] = 0.0;
            }
            next.joint_angles[j] = clamped;
            next.joint_velocities[j] = qd_next[j];
        }

        let m = self.model.base_mass;
        let accel = force_sum / m - Vector3::new(0.0, 0.0, self.params.gravity);
        let v_next = s.base_linear_velocity + dt * accel;
        // Trapezoidal position update is exact under constant acceleration.
        next.base_position = s.base_position + 0.5 * dt * (s.base_linear_velocity + v_next);
        next.base_linear_velocity = v_next;

        let w = s.base_angular_velocity;
        let tau_body = rot.transpose() * torque_sum;
        let gyro = w.cross(&(self.model.base_inertia * w));
        let w_next = w + dt * self.inertia_inv * (tau_body - gyro);
        next.base_angular_velocity = w_next;
        let q_next = s.base_orientation.into_inner()
            * UnitQuaternion::from_scaled_axis(w_next * dt).into_inner();
        next.base_orientation = UnitQuaternion::new_normalize(q_next);
        next.time = s.time + dt;

        next.check_finite()?;
        Ok(StepOutput {
            state: next,
            contacts,
            torques,
        })
    }

    /// Contact force on one foot. The stick solution makes the foot's
    /// tangential velocity (relative to the conveyor surface) vanish after the
    /// step with the normal damper treated implicitly; if it leaves the cone
    /// it is projected and the normal force re-solved along the slip
    /// direction.
    fn solve_contact(
        &self,
        frame: &LegFrame,
        v_free: Vector3<f64>,
        terrain: &Terrain,
        impulse_gain: f64,
    ) -> FootContact {
        let p = frame.foot_world;
        let depth = terrain.height(p.x, p.y) - p.z;
        let mut out = FootContact {
            contact_point: p,
            ..FootContact::default()
        };
        if depth <= 0.0 {
            return out;
        }
        let cp = &self.params.contact;
        let mu = terrain.friction(p.x, p.y);
        let [cx, cy] = terrain.conveyor(p.x, p.y);
        let v_rel = Vector3::new(v_free.x - cx, v_free.y - cy, v_free.z);
        let w = frame.jac_world * frame.jac_world.transpose() * impulse_gain;
        let spring = cp.stiffness * depth;

        let mut lhs = Matrix3::zeros();
        for c in 0..3 {
            lhs[(0, c)] = w[(0, c)];
            lhs[(1, c)] = w[(1, c)];
            lhs[(2, c)] = cp.damping * w[(2, c)];
        }
        lhs[(0, 0)] += cp.tangential_compliance;
        lhs[(1, 1)] += cp.tangential_compliance;
        lhs[(2, 2)] += 1.0;
        let rhs = Vector3::new(-v_rel.x, -v_rel.y, spring - cp.damping * v_rel.z);

        let explicit_normal = (spring - cp.damping * v_rel.z).max(0.0);
        let stick = lhs.lu().solve(&rhs);
        let (normal, tangential, slipping) = match stick {
            Some(f) if f.z > 0.0 => {
                let t = [f.x, f.y];
                let norm = f.x.hypot(f.y);
                if norm <= mu * f.z {
                    (f.z, t, false)
                } else {
                    let dir = [f.x / norm, f.y / norm];
                    let g = Vector3::new(mu * dir[0], mu * dir[1], 1.0);
                    let denom = 1.0 + cp.damping * w.row(2).dot(&g.transpose());
                    let fz = if denom > 1e-9 {
                        (spring - cp.damping * v_rel.z) / denom
                    } else {
                        explicit_normal
                    };
                    let fz = if fz > 0.0 { fz } else { explicit_normal };
                    (fz, [mu * fz * dir[0], mu * fz * dir[1]], true)
                }
            }
            _ => (0.0, [0.0, 0.0], false),
        };
        if normal > 0.0 {
            out.in_contact = true;
            out.normal_force = normal;
            out.tangential_force = tangential;
            out.slipping = slipping;
        }
        out
    }
}

/// Single step with default actuation and contact constants.
pub fn step(
    state: &RobotState,
    pd_targets: &[f64; NUM_JOINTS],
    model: &RobotModel,
    terrain: &Terrain,
    dt: f64,
) -> Result<StepOutput> {
    let sim = Simulator::new(
        model.clone(),
        SimParams {
            dt,
            ..SimParams::default()
        },
    )?;
    sim.step(state, pd_targets, terrain)
}

/// Nominal standing pose `[abduction, hip, knee] x 4`.
pub fn nominal_pose() -> [f64; NUM_JOINTS] {
    let mut q = [0.0; NUM_JOINTS];
    for leg in 0..NUM_LEGS {
        q[3 * leg] = 0.0;
        q[3 * leg + 1] = -0.8;
        q[3 * leg + 2] = 1.6;
    }
    q
}

#[cfg(test)]
mod tests;
