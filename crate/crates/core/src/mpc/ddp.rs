//! Control-constrained DDP (iLQR flavour: second-order dynamics terms are
//! dropped).
//!
//! Control constraints are linear inequalities per stage plus a set of
//! controls pinned to zero. The backward pass solves the stage QP over the
//! free controls with an active-set method and restricts the feedback gain to
//! the tangent space of the active constraints. Each forward rollout is
//! projected back onto the feasible set, and a backtracking line search keeps
//! accepted costs non-increasing.

use nalgebra::{DMatrix, DVector};

use super::qp::{constrained_gain, solve_qp};
use crate::error::{Error, Result};

/// Linear control constraints for one stage: `a u <= b`, plus controls fixed
/// at zero. Rows of `a` must not involve fixed controls.
#[derive(Debug, Clone)]
pub struct StageConstraints {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub fixed: Vec<bool>,
}

impl StageConstraints {
    pub fn unconstrained(nu: usize) -> Self {
        Self {
            a: DMatrix::zeros(0, nu),
            b: DVector::zeros(0),
            fixed: vec![false; nu],
        }
    }

    pub fn max_violation(&self, u: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, f) in self.fixed.iter().enumerate() {
            if *f {
                worst = worst.max(u[i].abs());
            }
        }
        for r in 0..self.a.nrows() {
            worst = worst.max(self.a.row(r).dot(&u.transpose()) - self.b[r]);
        }
        worst
    }
}

/// First and second derivatives of a stage cost.
#[derive(Debug, Clone)]
pub struct CostExpansion {
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub lux: DMatrix<f64>,
}

/// Finite-horizon optimal control problem over stages `0..horizon`.
pub trait ControlProblem {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn horizon(&self) -> usize;

    fn dynamics(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `(df/dx, df/du)` at stage `k`.
    fn jacobians(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>)
        -> (DMatrix<f64>, DMatrix<f64>);

    fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn stage_expansion(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> CostExpansion;
    fn terminal_cost(&self, x: &DVector<f64>) -> f64;
    fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);

    fn constraints(&self, _k: usize) -> StageConstraints {
        StageConstraints::unconstrained(self.control_dim())
    }

    /// Map a control onto the stage's feasible set.
    fn project(&self, _k: usize, _u: &mut DVector<f64>) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdpOptions {
    pub max_iterations: usize,
    /// Stop once an accepted iteration lowers the cost by less than this.
    pub tolerance: f64,
    pub initial_regularization: f64,
    pub max_regularization: f64,
    pub min_step: f64,
}

impl Default for DdpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-6,
            initial_regularization: 1e-9,
            max_regularization: 1e6,
            min_step: 1.0 / 1024.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DdpSolution {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
    pub initial_cost: f64,
    /// Cost after every accepted iteration, starting with the initial rollout.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub max_violation: f64,
}

struct BackwardPass {
    k_ff: Vec<DVector<f64>>,
    k_fb: Vec<DMatrix<f64>>,
    expected: f64,
}

/// Roll out controls (projected first) from `x0` and return states and cost.
pub fn rollout<P: ControlProblem + ?Sized>(
    problem: &P,
    x0: &DVector<f64>,
    controls: &mut [DVector<f64>],
) -> (Vec<DVector<f64>>, f64) {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    let mut cost = 0.0;
    for (k, u) in controls.iter_mut().enumerate() {
        problem.project(k, u);
        let x = &states[k];
        cost += problem.stage_cost(k, x, u);
        let next = problem.dynamics(k, x, u);
        states.push(next);
    }
    cost += problem.terminal_cost(states.last().unwrap());
    (states, cost)
}

fn backward_pass<P: ControlProblem + ?Sized>(
    problem: &P,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    reg: f64,
) -> Option<BackwardPass> {
    let t = problem.horizon();
    let nu = problem.control_dim();
    let (mut vx, mut vxx) = problem.terminal_expansion(&states[t]);
    let mut k_ff = vec![DVector::zeros(nu); t];
    let mut k_fb = vec![DMatrix::zeros(nu, problem.state_dim()); t];
    let mut expected = 0.0;

    for k in (0..t).rev() {
        let x = &states[k];
        let u = &controls[k];
        let (fx, fu) = problem.jacobians(k, x, u);
        let c = problem.stage_expansion(k, x, u);
        let fu_t_vxx = fu.transpose() * &vxx;
        let qx = &c.lx + fx.transpose() * &vx;
        let qu = &c.lu + fu.transpose() * &vx;
        let qxx = &c.lxx + fx.transpose() * &vxx * &fx;
        let quu = &c.luu + &fu_t_vxx * &fu;
        let qux = &c.lux + &fu_t_vxx * &fx;

        let cons = problem.constraints(k);
        let free: Vec<usize> = (0..nu).filter(|i| !cons.fixed[*i]).collect();
        let nf = free.len();
        let mut kk = DVector::zeros(nu);
        let mut kmat = DMatrix::zeros(nu, problem.state_dim());
        if nf > 0 {
            let mut h = quu.select_rows(&free).select_columns(&free);
            for i in 0..nf {
                h[(i, i)] += reg;
            }
            h.clone().cholesky()?;
            let g = qu.select_rows(&free);
            let a = cons.a.select_columns(&free);
            let uf = u.select_rows(&free);
            let slack = (&cons.b - &a * &uf).map(|s| s.max(0.0));
            let sol = solve_qp(&h, &g, &a, &slack, DVector::zeros(nf), 100);
            let rhs = qux.select_rows(&free);
            let gain = constrained_gain(&h, &rhs, &a, &sol.active)?;
            for (r, &i) in free.iter().enumerate() {
                kk[i] = sol.x[r];
                kmat.set_row(i, &gain.row(r));
            }
        }

        expected += kk.dot(&qu) + 0.5 * kk.dot(&(&quu * &kk));
        let kt = kmat.transpose();
        vx = &qx + &kt * &quu * &kk + &kt * &qu + qux.transpose() * &kk;
        vxx = &qxx + &kt * &quu * &kmat + &kt * &qux + qux.transpose() * &kmat;
        vxx = 0.5 * (&vxx + vxx.transpose());
        k_ff[k] = kk;
        k_fb[k] = kmat;
    }
    Some(BackwardPass {
        k_ff,
        k_fb,
        expected,
    })
}

/// Run DDP from `x0` starting at `initial_controls` (projected before use).
pub fn solve<P: ControlProblem + ?Sized>(
    problem: &P,
    x0: &DVector<f64>,
    initial_controls: Vec<DVector<f64>>,
    opts: &DdpOptions,
) -> Result<DdpSolution> {
    let t = problem.horizon();
    if initial_controls.len() != t {
        return Err(Error::Dimension {
            what: "initial controls",
            expected: t,
            got: initial_controls.len(),
        });
    }
    let mut controls = initial_controls;
    let (mut states, mut cost) = rollout(problem, x0, &mut controls);
    if !cost.is_finite() {
        return Err(Error::NonFinite {
            field: "initial rollout cost",
        });
    }
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut reg = opts.initial_regularization;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iterations {
        iterations += 1;
        let bp = loop {
            match backward_pass(problem, &states, &controls, reg) {
                Some(bp) => break bp,
                None => {
                    reg *= 10.0;
                    if reg > opts.max_regularization {
                        break 'outer;
                    }
                }
            }
        };

        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= opts.min_step {
            let mut trial = Vec::with_capacity(t);
            let mut x = x0.clone();
            let mut trial_states = vec![x.clone()];
            let mut trial_cost = 0.0;
            for k in 0..t {
                let dx = &x - &states[k];
                let mut u = &controls[k] + alpha * &bp.k_ff[k] + &bp.k_fb[k] * dx;
                problem.project(k, &mut u);
                trial_cost += problem.stage_cost(k, &x, &u);
                x = problem.dynamics(k, &x, &u);
                trial_states.push(x.clone());
                trial.push(u);
            }
            trial_cost += problem.terminal_cost(&x);
            if trial_cost.is_finite() && trial_cost <= cost {
                accepted = Some((trial_states, trial, trial_cost));
                break;
            }
            alpha *= 0.5;
        }

        match accepted {
            Some((s, u, c)) => {
                let decrease = cost - c;
                states = s;
                controls = u;
                cost = c;
                history.push(c);
                reg = (reg / 10.0).max(opts.initial_regularization);
                if decrease < opts.tolerance {
                    converged = true;
                    break;
                }
            }
            None => {
                // No descent along the step: already optimal if the model
                // predicted a negligible decrease.
                if -bp.expected < opts.tolerance {
                    converged = true;
                    break;
                }
                reg *= 10.0;
                if reg > opts.max_regularization {
                    break;
                }
            }
        }
    }

    let max_violation = (0..t)
        .map(|k| problem.constraints(k).max_violation(&controls[k]))
        .fold(0.0, f64::max);
    Ok(DdpSolution {
        states,
        controls,
        cost,
        initial_cost,
        cost_history: history,
        iterations,
        converged,
        max_violation,
    })
}
