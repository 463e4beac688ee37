use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ddp::{self, CostExpansion};
use super::*;
use crate::sim::{nominal_pose, PdGains, RobotModel, RobotState, Simulator, SimParams};
use crate::terrain::Terrain;

struct Lqr {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    horizon: usize,
}

impl ControlProblem for Lqr {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn dynamics(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
    fn jacobians(&self, _k: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }
    fn stage_cost(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }
    fn stage_expansion(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> CostExpansion {
        CostExpansion {
            lx: 2.0 * &self.q * x,
            lu: 2.0 * &self.r * u,
            lxx: 2.0 * &self.q,
            luu: 2.0 * &self.r,
            lux: DMatrix::zeros(self.control_dim(), self.state_dim()),
        }
    }
    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x))
    }
    fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (2.0 * &self.q * x, 2.0 * &self.q)
    }
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.1
}

fn double_integrator(rng: &mut ChaCha8Rng) -> Lqr {
    let dt = 0.01;
    let n = 2;
    let mut a = DMatrix::identity(2 * n, 2 * n);
    let mut b = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        a[(i, n + i)] = dt;
        b[(i, i)] = 0.5 * dt * dt;
        b[(n + i, i)] = dt;
    }
    Lqr {
        a,
        b,
        q: random_spd(2 * n, rng),
        r: random_spd(n, rng) * 1e-3,
        horizon: 26,
    }
}

/// Backward Riccati recursion, then forward simulation of `u = -K x`.
fn riccati_controls(p: &Lqr, x0: &DVector<f64>) -> Vec<DVector<f64>> {
    let mut pm = p.q.clone();
    let mut gains = Vec::new();
    for _ in 0..p.horizon {
        let btp = p.b.transpose() * &pm;
        let k = (&p.r + &btp * &p.b).lu().solve(&(&btp * &p.a)).unwrap();
        pm = &p.q + p.a.transpose() * &pm * (&p.a - &p.b * &k);
        gains.push(k);
    }
    gains.reverse();
    let mut x = x0.clone();
    gains
        .iter()
        .map(|k| {
            let u = -(k * &x);
            x = &p.a * &x + &p.b * &u;
            u
        })
        .collect()
}

#[test]
fn ddp_matches_riccati_on_double_integrator() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let p = double_integrator(&mut rng);
        let x0 = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let oracle = riccati_controls(&p, &x0);
        let sol = ddp::solve(&p, &x0, vec![DVector::zeros(2); 26], &DdpOptions::default()).unwrap();
        let err = sol
            .controls
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "max abs control error {err}");
        assert!(sol.converged);
    }
}

fn standing_problem(mu: f64) -> (SrbProblem, DVector<f64>) {
    let model = RobotModel::default();
    let x0 = MpcState {
        euler_zyx: Vector3::zeros(),
        position: Vector3::new(0.0, 0.0, 0.28),
        angular_velocity: Vector3::zeros(),
        linear_velocity: Vector3::zeros(),
    };
    let gait = GaitSchedule::default();
    let horizon = 26;
    let refs = vec![x0.to_vector(); horizon + 1];
    let contacts: Vec<_> = (0..horizon).map(|k| gait.contact_at(k as f64 * 0.01)).collect();
    let levers = vec![
        [0, 1, 2, 3].map(|leg| {
            let h = model.hip_offsets[leg];
            Vector3::new(h.x, h.y, -0.28)
        });
        horizon
    ];
    let p = SrbProblem::new(
        0.01,
        model.base_mass,
        9.81,
        model.base_inertia,
        refs,
        contacts,
        levers,
        [mu; 4],
        120.0,
        &MpcWeights::default(),
    );
    (p, x0.to_vector())
}

fn zero_controls() -> Vec<DVector<f64>> {
    vec![DVector::zeros(12); 26]
}

#[test]
fn standing_forces_balance_weight() {
    let (p, x0) = standing_problem(0.6);
    let sol = ddp::solve(&p, &x0, zero_controls(), &DdpOptions::default()).unwrap();
    let weight = 9.0 * 9.81;
    for (k, u) in sol.controls.iter().enumerate().take(13) {
        let f = GrfControl::from_vector(u);
        let fz: f64 = f.forces.iter().map(|f| f.z).sum();
        assert!((fz - weight).abs() < 0.02 * weight, "stage {k}: {fz}");
        for ff in &f.forces {
            assert!(ff.x.abs() < 0.5 && ff.y.abs() < 0.5, "stage {k}: {ff}");
        }
    }
}

#[test]
fn zero_friction_gives_zero_tangential_forces() {
    let (p, x0) = standing_problem(0.0);
    let mut x = x0.clone();
    x[9] = 0.3;
    x[1] = 0.05;
    let sol = ddp::solve(&p, &x, zero_controls(), &DdpOptions::default()).unwrap();
    for u in &sol.controls {
        for leg in 0..4 {
            assert_eq!(u[3 * leg], 0.0);
            assert_eq!(u[3 * leg + 1], 0.0);
        }
    }
}

#[test]
fn costs_monotone_and_forces_in_pyramid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let mu = rng.random_range(0.2..1.0);
        let (p, x0) = standing_problem(mu);
        let mut x = x0.clone();
        for i in 0..12 {
            x[i] += rng.random_range(-0.3..0.3);
        }
        x[5] = 0.28 + rng.random_range(-0.05..0.05);
        let sol = ddp::solve(&p, &x, zero_controls(), &DdpOptions::default()).unwrap();
        for w in sol.cost_history.windows(2) {
            assert!(w[1] <= w[0], "cost rose: {:?}", sol.cost_history);
        }
        for (k, u) in sol.controls.iter().enumerate() {
            for leg in 0..4 {
                let (fx, fy, fz) = (u[3 * leg], u[3 * leg + 1], u[3 * leg + 2]);
                if !p.contacts[k][leg] {
                    assert_eq!((fx, fy, fz), (0.0, 0.0, 0.0));
                    continue;
                }
                assert!(fx.abs() <= mu * fz + 1e-9 && fy.abs() <= mu * fz + 1e-9);
                assert!(fz >= -1e-9 && fz <= 120.0 + 1e-9);
            }
        }
        assert!(sol.max_violation <= 1e-9);
    }
}

#[test]
fn line_search_never_accepts_cost_increase_from_feasible_start() {
    let (p, x0) = standing_problem(0.5);
    let init: Vec<_> = (0..26).map(|k| p.gravity_compensation(k)).collect();
    let sol = ddp::solve(&p, &x0, init, &DdpOptions::default()).unwrap();
    assert!(sol.cost <= sol.initial_cost);
}

#[test]
fn pd_inversion_round_trip() {
    let gains = PdGains::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let q = rng.random_range(-2.0..2.0);
        let qd = rng.random_range(-20.0..20.0);
        let tau = rng.random_range(-17.0..17.0);
        let target = gains.target_for_torque(tau, q, qd);
        worst = worst.max((gains.torque(target, q, qd) - tau).abs());
    }
    assert!(worst < 1e-12, "{worst}");
    // Zero torque: target leads the joint by the damping term.
    let t = gains.target_for_torque(0.0, 0.3, 2.0);
    assert!((t - (0.3 + 0.4 / 17.0 * 2.0)).abs() < 1e-15);
    // Inverting a PD torque recovers its target.
    let tau = gains.torque(1.1, 0.3, 2.0);
    assert!((gains.target_for_torque(tau, 0.3, 2.0) - 1.1).abs() < 1e-14);
}

fn new_expert() -> MpcExpert {
    MpcExpert::new(RobotModel::default(), PdGains::default(), ExpertConfig::default()).unwrap()
}

#[test]
fn expert_is_deterministic() {
    let terrain = Terrain::flat(0.8);
    let s = RobotState::standing(0.28, nominal_pose());
    let a = new_expert().act(&s, &[0.5, 0.0, 0.0], 0.0, &terrain).unwrap();
    let b = new_expert().act(&s, &[0.5, 0.0, 0.0], 0.0, &terrain).unwrap();
    assert_eq!(a, b);
}

#[test]
fn warm_start_first_cost_not_above_cold() {
    let terrain = Terrain::flat(0.8);
    let sim = Simulator::new(RobotModel::default(), SimParams::default()).unwrap();
    let mut expert = new_expert();
    let mut s = RobotState::standing(0.28, nominal_pose());
    let cmd = [0.5, 0.0, 0.0];
    for tick in 0..40 {
        let t = tick as f64 * 0.01;
        let targets = expert.act(&s, &cmd, t, &terrain).unwrap();
        for _ in 0..10 {
            s = sim.step(&s, &targets, &terrain).unwrap().state;
        }
        if tick % 5 == 4 {
            let t1 = (tick + 1) as f64 * 0.01;
            let mut probe = expert.clone();
            let (problem, x0, _) = probe.build_problem(&s, &cmd, t1, &terrain).unwrap();
            let x0 = x0.to_vector();
            let mut warm = probe.initial_controls(&problem, &x0);
            let mut cold: Vec<_> = (0..26).map(|k| problem.gravity_compensation(k)).collect();
            let (_, wc) = ddp::rollout(&problem, &x0, &mut warm);
            let (_, cc) = ddp::rollout(&problem, &x0, &mut cold);
            assert!(wc <= cc, "warm {wc} cold {cc}");
        }
    }
}

#[test]
fn expert_trots_forward_on_flat_ground() {
    let terrain = Terrain::flat(0.8);
    let sim = Simulator::new(RobotModel::default(), SimParams::default()).unwrap();
    let mut expert = new_expert();
    let mut s = RobotState::standing(0.28, nominal_pose());
    let cmd = [0.5, 0.0, 0.0];
    let mut v_sum = 0.0;
    let mut n = 0;
    for tick in 0..300 {
        let t = tick as f64 * 0.01;
        let targets = expert.act(&s, &cmd, t, &terrain).unwrap();
        assert!(!expert.last.degraded);
        for _ in 0..10 {
            s = sim.step(&s, &targets, &terrain).unwrap().state;
        }
        assert!(s.tilt() < 0.5, "tilted at t={t}");
        assert!(s.base_position.z > 0.15, "collapsed at t={t}");
        if tick >= 100 {
            v_sum += s.base_linear_velocity.x;
            n += 1;
        }
    }
    let v = v_sum / n as f64;
    assert!((v - 0.5).abs() < 0.15, "mean forward velocity {v}");
}
