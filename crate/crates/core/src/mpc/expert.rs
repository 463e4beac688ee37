//! The model-predictive expert: stance forces from DDP over the
//! single-rigid-body model, swing feet from task-space impedance, everything
//! converted to PD joint targets.

use std::time::Instant;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::ddp::{self, ControlProblem, DdpOptions};
use super::gait::GaitSchedule;
use super::reference::{build_reference, hip_ground_projection, Command, ReferenceParams};
use super::srb::{GrfControl, MpcState, MpcWeights, SrbProblem};
use super::swing::{swing_torque, SwingGains};
use crate::error::{Error, Result};
use crate::sim::{
    foot_jacobian, forward_kinematics, leg_angles, PdGains, RobotModel, RobotState, NUM_JOINTS,
    NUM_LEGS,
};
use crate::terrain::Terrain;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub gait: GaitSchedule,
    pub reference: ReferenceParams,
    pub weights: MpcWeights,
    pub swing: SwingGains,
    pub max_normal_force: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Slew limits on the tracked command: `[linear m/s^2, yaw rad/s^2]`.
    pub command_slew: [f64; 2],
    /// A scheduled stance foot higher than this above the terrain is still
    /// reaching for the ground and gets no force.
    pub touchdown_clearance: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            gait: GaitSchedule::default(),
            reference: ReferenceParams::default(),
            weights: MpcWeights::default(),
            swing: SwingGains::default(),
            max_normal_force: 120.0,
            max_iterations: 50,
            tolerance: 1e-6,
            command_slew: [1.5, 3.0],
            touchdown_clearance: 0.01,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.reference.horizon == 0 || !(self.reference.dt > 0.0) {
            return Err(Error::Config("MPC horizon and dt must be positive".into()));
        }
        if self.command_slew.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("command_slew must be positive".into()));
        }
        if !(self.max_normal_force > 0.0) {
            return Err(Error::Config("max_normal_force must be positive".into()));
        }
        Ok(())
    }

    fn ddp_options(&self) -> DdpOptions {
        DdpOptions {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            ..DdpOptions::default()
        }
    }
}

/// Per-solve diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub time: f64,
    pub iterations: usize,
    pub cost: f64,
    pub max_violation: f64,
    pub converged: bool,
    pub degraded: bool,
    pub wall_us: u64,
}

/// One expert instance per environment; holds warm-start state.
#[derive(Debug, Clone)]
pub struct MpcExpert {
    pub config: ExpertConfig,
    pub model: RobotModel,
    pub gains: PdGains,
    warm: Option<Vec<DVector<f64>>>,
    swing_start: [Vector3<f64>; NUM_LEGS],
    was_stance: [bool; NUM_LEGS],
    tracked: Option<Command>,
    pub last: SolveDiagnostics,
    pub last_forces: GrfControl,
}

impl MpcExpert {
    pub fn new(model: RobotModel, gains: PdGains, config: ExpertConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        Ok(Self {
            config,
            model,
            gains,
            warm: None,
            swing_start: [Vector3::zeros(); NUM_LEGS],
            was_stance: [true; NUM_LEGS],
            tracked: None,
            last: SolveDiagnostics::default(),
            last_forces: GrfControl::default(),
        })
    }

    /// Forget warm-start and swing state, e.g. at episode reset.
    pub fn reset(&mut self) {
        self.warm = None;
        self.was_stance = [true; NUM_LEGS];
        self.swing_start = [Vector3::zeros(); NUM_LEGS];
        self.tracked = None;
        self.last = SolveDiagnostics::default();
    }

    fn foot_world(&self, s: &RobotState, leg: usize) -> Vector3<f64> {
        let a = leg_angles(&s.joint_angles, leg);
        s.base_position + s.rotation() * forward_kinematics(&a, leg, &self.model)
    }

    /// Build the horizon problem for state `s` at time `t`.
    pub fn build_problem(
        &mut self,
        s: &RobotState,
        command: &Command,
        t: f64,
        terrain: &Terrain,
    ) -> Result<(SrbProblem, MpcState, super::reference::ReferenceTrajectory)> {
        let gait = self.config.gait;
        let rp = self.config.reference;
        let stance_now = gait.contact_at(t);
        let mut feet = [Vector3::zeros(); NUM_LEGS];
        for leg in 0..NUM_LEGS {
            feet[leg] = self.foot_world(s, leg);
            if !stance_now[leg] && self.was_stance[leg] {
                self.swing_start[leg] = feet[leg];
            }
            if stance_now[leg] {
                self.swing_start[leg] = feet[leg];
            }
        }
        self.was_stance = stance_now;

        let x0 = MpcState::from_robot(s);
        let reference = build_reference(
            &x0,
            command,
            &gait,
            t,
            &self.swing_start,
            &self.model,
            terrain,
            &rp,
        )?;

        let mut contacts = Vec::with_capacity(rp.horizon);
        let mut levers = Vec::with_capacity(rp.horizon);
        for k in 0..rp.horizon {
            let tk = t + k as f64 * rp.dt;
            let c = gait.contact_at(tk);
            let com = reference.states[k].position;
            let mut r = [Vector3::zeros(); NUM_LEGS];
            for leg in 0..NUM_LEGS {
                let same_stance = stance_now[leg] && k as f64 * rp.dt < gait.time_remaining(leg, t) - 1e-9;
                let foot = if same_stance {
                    feet[leg]
                } else if stance_now[leg] {
                    // Next stance after the upcoming swing: hip projection at
                    // that time.
                    let st = &reference.states[k];
                    hip_ground_projection(&self.model, leg, &st.position, st.euler_zyx.z, terrain)
                } else {
                    reference.footholds[leg]
                };
                r[leg] = foot - com;
            }
            contacts.push(c);
            levers.push(r);
        }
        let mut friction = [0.0; NUM_LEGS];
        for leg in 0..NUM_LEGS {
            let p = if stance_now[leg] {
                feet[leg]
            } else {
                reference.footholds[leg]
            };
            friction[leg] = terrain.friction(p.x, p.y);
        }
        let refs: Vec<DVector<f64>> = reference.states.iter().map(|x| x.to_vector()).collect();
        let problem = SrbProblem::new(
            rp.dt,
            self.model.base_mass,
            9.81,
            self.model.base_inertia,
            refs,
            contacts,
            levers,
            friction,
            self.config.max_normal_force,
            &self.config.weights,
        );
        Ok((problem, x0, reference))
    }

    /// Initial controls: the shifted previous solution when it starts
    /// cheaper than even weight support, otherwise even weight support.
    pub(crate) fn initial_controls(&self, problem: &SrbProblem, x0: &DVector<f64>) -> Vec<DVector<f64>> {
        let horizon = problem.horizon();
        let mut cold: Vec<DVector<f64>> =
            (0..horizon).map(|k| problem.gravity_compensation(k)).collect();
        let Some(prev) = &self.warm else {
            return cold;
        };
        let mut warm: Vec<DVector<f64>> = prev.iter().skip(1).cloned().collect();
        while warm.len() < horizon {
            warm.push(problem.gravity_compensation(warm.len()));
        }
        let (_, warm_cost) = ddp::rollout(problem, x0, &mut warm);
        let (_, cold_cost) = ddp::rollout(problem, x0, &mut cold);
        if warm_cost <= cold_cost {
            warm
        } else {
            cold
        }
    }

    /// Solve the horizon and return the first-stage forces.
    pub fn solve_forces(
        &mut self,
        s: &RobotState,
        command: &Command,
        t: f64,
        terrain: &Terrain,
    ) -> Result<(GrfControl, super::reference::ReferenceTrajectory)> {
        let start = Instant::now();
        let (problem, x0, reference) = self.build_problem(s, command, t, terrain)?;
        let x0v = x0.to_vector();
        let init = self.initial_controls(&problem, &x0v);
        let sol = ddp::solve(&problem, &x0v, init, &self.config.ddp_options())?;
        let forces = GrfControl::from_vector(&sol.controls[0]);
        self.last = SolveDiagnostics {
            time: t,
            iterations: sol.iterations,
            cost: sol.cost,
            max_violation: sol.max_violation,
            converged: sol.converged,
            degraded: false,
            wall_us: start.elapsed().as_micros() as u64,
        };
        self.warm = Some(sol.controls);
        Ok((forces, reference))
    }

    /// Joint torques for the current tick.
    pub fn torques(
        &mut self,
        s: &RobotState,
        command: &Command,
        t: f64,
        terrain: &Terrain,
    ) -> Result<[f64; NUM_JOINTS]> {
        s.check_finite()?;
        let gait = self.config.gait;
        let (forces, reference) = match self.solve_forces(s, command, t, terrain) {
            Ok(v) => v,
            Err(e @ (Error::Config(_) | Error::Dimension { .. })) => return Err(e),
            Err(_) => {
                // Hold the previous plan; the swing references are rebuilt
                // from the cached foot state.
                self.last.degraded = true;
                self.last.time = t;
                let forces = self
                    .warm
                    .as_ref()
                    .map(|w| GrfControl::from_vector(&w[0]))
                    .unwrap_or_default();
                let fallback = self.fallback_reference(s);
                (forces, fallback)
            }
        };
        self.last_forces = forces;

        let rot = s.rotation();
        let rot_t = rot.transpose();
        let stance = gait.contact_at(t);
        let lookahead = self.config.reference.dt;
        let mut tau = [0.0; NUM_JOINTS];
        for leg in 0..NUM_LEGS {
            let a = leg_angles(&s.joint_angles, leg);
            let qd = [
                s.joint_velocities[3 * leg],
                s.joint_velocities[3 * leg + 1],
                s.joint_velocities[3 * leg + 2],
            ];
            let p_foot = forward_kinematics(&a, leg, &self.model);
            let foot_w = s.base_position + rot * p_foot;
            let clearance = foot_w.z - terrain.height(foot_w.x, foot_w.y);
            let (p_ref_w, v_ref_w) = if stance[leg] {
                if clearance <= self.config.touchdown_clearance {
                    let jac = foot_jacobian(&a, leg, &self.model);
                    let leg_tau = jac.transpose() * (rot_t * -forces.forces[leg]);
                    self.store(&mut tau, leg, &leg_tau);
                    continue;
                }
                // Late touchdown: keep reaching down instead of pushing on air.
                let mut target = foot_w;
                target.z -= clearance + self.config.touchdown_clearance;
                (target, Vector3::zeros())
            } else {
                let curve = &reference.swing_curves[leg];
                let sp = gait.segment_progress(leg, t) + lookahead / gait.swing_duration;
                (
                    curve.position(sp),
                    curve.derivative(sp.min(1.0)) / gait.swing_duration,
                )
            };
            let p_ref = rot_t * (p_ref_w - s.base_position);
            let v_ref =
                rot_t * (v_ref_w - s.base_linear_velocity) - s.base_angular_velocity.cross(&p_foot);
            let leg_tau = swing_torque(leg, &a, &qd, &p_ref, &v_ref, &self.model, &self.config.swing);
            self.store(&mut tau, leg, &leg_tau);
        }
        Ok(tau)
    }

    fn store(&self, tau: &mut [f64; NUM_JOINTS], leg: usize, leg_tau: &Vector3<f64>) {
        let limit = self.model.torque_limit;
        for c in 0..3 {
            tau[3 * leg + c] = leg_tau[c].clamp(-limit, limit);
        }
    }

    fn fallback_reference(&self, s: &RobotState) -> super::reference::ReferenceTrajectory {
        use super::reference::CubicBezier;
        let mut footholds = [Vector3::zeros(); NUM_LEGS];
        for (leg, f) in footholds.iter_mut().enumerate() {
            *f = self.foot_world(s, leg);
        }
        let curves = [0, 1, 2, 3].map(|leg| CubicBezier::swing(self.swing_start[leg], footholds[leg], 0.0));
        super::reference::ReferenceTrajectory {
            states: Vec::new(),
            footholds,
            swing_curves: curves,
        }
    }

    /// Move the tracked command toward `command` within the slew limits.
    /// The first call after a reset starts from the measured base velocity.
    fn slew_command(&mut self, s: &RobotState, command: &Command) -> Command {
        let dt = self.config.reference.dt;
        let prev = self.tracked.unwrap_or_else(|| {
            let v = super::reference::yaw_rotation(s.yaw()).transpose() * s.base_linear_velocity;
            [v.x, v.y, s.angular_velocity_world().z]
        });
        let lin = self.config.command_slew[0] * dt;
        let yaw = self.config.command_slew[1] * dt;
        let next = [
            prev[0] + (command[0] - prev[0]).clamp(-lin, lin),
            prev[1] + (command[1] - prev[1]).clamp(-lin, lin),
            prev[2] + (command[2] - prev[2]).clamp(-yaw, yaw),
        ];
        self.tracked = Some(next);
        next
    }

    /// PD targets reproducing the planned torques at the current joint state.
    pub fn act(
        &mut self,
        s: &RobotState,
        command: &Command,
        t: f64,
        terrain: &Terrain,
    ) -> Result<[f64; NUM_JOINTS]> {
        let command = self.slew_command(s, command);
        let tau = self.torques(s, &command, t, terrain)?;
        Ok(torques_to_targets(&self.gains, s, &tau))
    }
}

/// Invert the PD law joint by joint at the current `(q, qd)`.
pub fn torques_to_targets(gains: &PdGains, s: &RobotState, tau: &[f64; NUM_JOINTS]) -> [f64; NUM_JOINTS] {
    let mut out = [0.0; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        out[j] = gains.target_for_torque(tau[j], s.joint_angles[j], s.joint_velocities[j]);
    }
    out
}

/// Header and rows for the per-solve diagnostics CSV.
pub const DIAGNOSTICS_HEADER: [&str; 6] =
    ["time", "iterations", "cost", "max_violation", "converged", "degraded"];

impl SolveDiagnostics {
    pub fn record(&self) -> [String; 6] {
        [
            format!("{:.4}", self.time),
            self.iterations.to_string(),
            format!("{:e}", self.cost),
            format!("{:e}", self.max_violation),
            (self.converged as u8).to_string(),
            (self.degraded as u8).to_string(),
        ]
    }
}
