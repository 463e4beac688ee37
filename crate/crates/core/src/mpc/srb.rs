//! Reduced single-rigid-body model used by the expert's optimizer.
//!
//! State `[euler_zyx (roll, pitch, yaw), position, angular velocity (world),
//! linear velocity]`, control = four world-frame ground reaction forces.
//! Rotational kinematics are linearized about the reference yaw of each
//! stage, and the inertia is rotated by that yaw only.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::ddp::{ControlProblem, CostExpansion, StageConstraints};
use crate::error::{Error, Result};
use crate::sim::{RobotState, NUM_LEGS};

pub const STATE_DIM: usize = 12;
pub const CONTROL_DIM: usize = 3 * NUM_LEGS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcState {
    pub euler_zyx: Vector3<f64>,
    pub position: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
    pub linear_velocity: Vector3<f64>,
}

impl MpcState {
    pub fn from_robot(s: &RobotState) -> Self {
        Self {
            euler_zyx: s.euler_zyx(),
            position: s.base_position,
            angular_velocity: s.angular_velocity_world(),
            linear_velocity: s.base_linear_velocity,
        }
    }

    /// Fails when pitch is at or beyond the Z-Y-X singularity.
    pub fn check(&self) -> Result<()> {
        let pitch = self.euler_zyx.y;
        if !(pitch.abs() < std::f64::consts::FRAC_PI_2) {
            return Err(Error::EulerSingularity { pitch });
        }
        Ok(())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(STATE_DIM);
        v.rows_mut(0, 3).copy_from(&self.euler_zyx);
        v.rows_mut(3, 3).copy_from(&self.position);
        v.rows_mut(6, 3).copy_from(&self.angular_velocity);
        v.rows_mut(9, 3).copy_from(&self.linear_velocity);
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            euler_zyx: v.fixed_rows::<3>(0).into_owned(),
            position: v.fixed_rows::<3>(3).into_owned(),
            angular_velocity: v.fixed_rows::<3>(6).into_owned(),
            linear_velocity: v.fixed_rows::<3>(9).into_owned(),
        }
    }
}

/// Per-foot ground reaction forces, world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GrfControl {
    pub forces: [Vector3<f64>; NUM_LEGS],
}

impl GrfControl {
    pub fn from_vector(u: &DVector<f64>) -> Self {
        let mut forces = [Vector3::zeros(); NUM_LEGS];
        for (i, f) in forces.iter_mut().enumerate() {
            *f = Vector3::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]);
        }
        Self { forces }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut u = DVector::zeros(CONTROL_DIM);
        for (i, f) in self.forces.iter().enumerate() {
            u.fixed_rows_mut::<3>(3 * i).copy_from(f);
        }
        u
    }
}

/// Diagonal state weights grouped as in the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcWeights {
    pub euler: [f64; 3],
    pub position: [f64; 3],
    pub angular_velocity: [f64; 3],
    pub linear_velocity: [f64; 3],
    pub force: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        Self {
            euler: [10.0; 3],
            position: [5.0, 5.0, 50.0],
            angular_velocity: [1.0; 3],
            linear_velocity: [5.0; 3],
            force: 1e-5,
        }
    }
}

impl MpcWeights {
    pub fn q_diagonal(&self) -> DVector<f64> {
        let mut q = DVector::zeros(STATE_DIM);
        for i in 0..3 {
            q[i] = self.euler[i];
            q[3 + i] = self.position[i];
            q[6 + i] = self.angular_velocity[i];
            q[9 + i] = self.linear_velocity[i];
        }
        q
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_diagonal().iter().any(|q| !(*q >= 0.0)) {
            return Err(Error::Config("state weights must be >= 0".into()));
        }
        if !(self.force > 0.0) {
            return Err(Error::Config("force weight must be > 0".into()));
        }
        Ok(())
    }
}

/// One horizon of the single-rigid-body tracking problem:
/// `sum_k |x_{k+1} - ref_{k+1}|_Q^2 + |u_k|_R^2`.
#[derive(Debug, Clone)]
pub struct SrbProblem {
    pub dt: f64,
    pub mass: f64,
    pub gravity: f64,
    pub inertia_body: Matrix3<f64>,
    pub reference: Vec<DVector<f64>>,
    /// Stance flags per stage and leg.
    pub contacts: Vec<[bool; NUM_LEGS]>,
    /// Foot position relative to the reference CoM, per stage and leg.
    pub lever_arms: Vec<[Vector3<f64>; NUM_LEGS]>,
    pub friction: [f64; NUM_LEGS],
    pub max_normal_force: f64,
    pub q_diag: DVector<f64>,
    pub force_weight: f64,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    constraints: Vec<StageConstraints>,
}

impl SrbProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dt: f64,
        mass: f64,
        gravity: f64,
        inertia_body: Matrix3<f64>,
        reference: Vec<DVector<f64>>,
        contacts: Vec<[bool; NUM_LEGS]>,
        lever_arms: Vec<[Vector3<f64>; NUM_LEGS]>,
        friction: [f64; NUM_LEGS],
        max_normal_force: f64,
        weights: &MpcWeights,
    ) -> Self {
        let horizon = contacts.len();
        assert_eq!(reference.len(), horizon + 1);
        assert_eq!(lever_arms.len(), horizon);
        let mut p = Self {
            dt,
            mass,
            gravity,
            inertia_body,
            reference,
            contacts,
            lever_arms,
            friction,
            max_normal_force,
            q_diag: weights.q_diagonal(),
            force_weight: weights.force,
            a: Vec::with_capacity(horizon),
            b: Vec::with_capacity(horizon),
            constraints: Vec::with_capacity(horizon),
        };
        for k in 0..horizon {
            let (a, b) = p.linearization(k);
            p.a.push(a);
            p.b.push(b);
            p.constraints.push(p.build_constraints(k));
        }
        p
    }

    fn linearization(&self, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let dt = self.dt;
        let yaw = self.reference[k][2];
        let (s, c) = yaw.sin_cos();
        let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let inertia_world = rz * self.inertia_body * rz.transpose();
        let inv_i = inertia_world.try_inverse().expect("inertia invertible");

        let mut a = DMatrix::identity(STATE_DIM, STATE_DIM);
        let rzt = rz.transpose();
        for r in 0..3 {
            for cidx in 0..3 {
                a[(r, 6 + cidx)] = dt * rzt[(r, cidx)];
            }
            a[(3 + r, 9 + r)] = dt;
        }
        let mut b = DMatrix::zeros(STATE_DIM, CONTROL_DIM);
        for leg in 0..NUM_LEGS {
            if !self.contacts[k][leg] {
                continue;
            }
            let r = self.lever_arms[k][leg];
            let skew = Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0);
            let ang = inv_i * skew * dt;
            for i in 0..3 {
                for j in 0..3 {
                    b[(6 + i, 3 * leg + j)] = ang[(i, j)];
                }
                b[(9 + i, 3 * leg + i)] = dt / self.mass;
            }
        }
        (a, b)
    }

    fn build_constraints(&self, k: usize) -> StageConstraints {
        let mut fixed = vec![false; CONTROL_DIM];
        let mut rows: Vec<([f64; 3], usize, f64)> = Vec::new();
        for leg in 0..NUM_LEGS {
            let base = 3 * leg;
            if !self.contacts[k][leg] {
                fixed[base..base + 3].iter_mut().for_each(|f| *f = true);
                continue;
            }
            let mu = self.friction[leg];
            if mu > 0.0 {
                rows.push(([1.0, 0.0, -mu], base, 0.0));
                rows.push(([-1.0, 0.0, -mu], base, 0.0));
                rows.push(([0.0, 1.0, -mu], base, 0.0));
                rows.push(([0.0, -1.0, -mu], base, 0.0));
            } else {
                fixed[base] = true;
                fixed[base + 1] = true;
                rows.push(([0.0, 0.0, -1.0], base, 0.0));
            }
            rows.push(([0.0, 0.0, 1.0], base, self.max_normal_force));
        }
        let mut a = DMatrix::zeros(rows.len(), CONTROL_DIM);
        let mut b = DVector::zeros(rows.len());
        for (r, (coef, base, rhs)) in rows.iter().enumerate() {
            for j in 0..3 {
                if !fixed[base + j] {
                    a[(r, base + j)] = coef[j];
                }
            }
            b[r] = *rhs;
        }
        StageConstraints { a, b, fixed }
    }

    /// Feasible default: the weight split evenly over the stance feet.
    pub fn gravity_compensation(&self, k: usize) -> DVector<f64> {
        let stance = self.contacts[k].iter().filter(|c| **c).count();
        let mut u = DVector::zeros(CONTROL_DIM);
        if stance > 0 {
            let fz = (self.mass * self.gravity / stance as f64).min(self.max_normal_force);
            for leg in 0..NUM_LEGS {
                if self.contacts[k][leg] {
                    u[3 * leg + 2] = fz;
                }
            }
        }
        u
    }

    fn gravity_term(&self) -> f64 {
        -self.dt * self.gravity
    }
}

/// Clamp one force onto the pyramid `|fx|, |fy| <= mu fz`, `0 <= fz <= fmax`.
pub fn project_to_pyramid(f: &mut [f64], mu: f64, f_max: f64) {
    let fz = f[2].clamp(0.0, f_max);
    let lim = mu.max(0.0) * fz;
    f[0] = f[0].clamp(-lim, lim);
    f[1] = f[1].clamp(-lim, lim);
    f[2] = fz;
}

impl ControlProblem for SrbProblem {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn control_dim(&self) -> usize {
        CONTROL_DIM
    }

    fn horizon(&self) -> usize {
        self.contacts.len()
    }

    fn dynamics(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut next = &self.a[k] * x + &self.b[k] * u;
        next[11] += self.gravity_term();
        next
    }

    fn jacobians(&self, k: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a[k].clone(), self.b[k].clone())
    }

    fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        // The state of stage k > 0 is x_k, weighted together with u_{k-1} in
        // the summed objective; x_0 is fixed and carries no cost.
        let state_cost = if k == 0 {
            0.0
        } else {
            let e = x - &self.reference[k];
            e.component_mul(&e).dot(&self.q_diag)
        };
        state_cost + self.force_weight * u.norm_squared()
    }

    fn stage_expansion(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> CostExpansion {
        let (lx, lxx) = if k == 0 {
            (DVector::zeros(STATE_DIM), DMatrix::zeros(STATE_DIM, STATE_DIM))
        } else {
            let e = x - &self.reference[k];
            (
                2.0 * e.component_mul(&self.q_diag),
                DMatrix::from_diagonal(&(2.0 * &self.q_diag)),
            )
        };
        CostExpansion {
            lx,
            lu: 2.0 * self.force_weight * u,
            lxx,
            luu: DMatrix::identity(CONTROL_DIM, CONTROL_DIM) * (2.0 * self.force_weight),
            lux: DMatrix::zeros(CONTROL_DIM, STATE_DIM),
        }
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        let e = x - self.reference.last().unwrap();
        e.component_mul(&e).dot(&self.q_diag)
    }

    fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let e = x - self.reference.last().unwrap();
        (
            2.0 * e.component_mul(&self.q_diag),
            DMatrix::from_diagonal(&(2.0 * &self.q_diag)),
        )
    }

    fn constraints(&self, k: usize) -> StageConstraints {
        self.constraints[k].clone()
    }

    fn project(&self, k: usize, u: &mut DVector<f64>) {
        for leg in 0..NUM_LEGS {
            let s = u.as_mut_slice();
            let f = &mut s[3 * leg..3 * leg + 3];
            if self.contacts[k][leg] {
                project_to_pyramid(f, self.friction[leg], self.max_normal_force);
            } else {
                f.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}
