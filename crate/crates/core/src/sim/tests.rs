use super::*;
use crate::terrain::Terrain;
use proptest::prelude::*;

fn sim_with(gravity: f64) -> Simulator {
    Simulator::new(
        RobotModel::default(),
        SimParams {
            gravity,
            ..SimParams::default()
        },
    )
    .unwrap()
}

fn airborne_state(height: f64) -> RobotState {
    RobotState::standing(height, nominal_pose())
}

#[test]
fn equilibrium_without_gravity_or_contact() {
    let sim = sim_with(0.0);
    let terrain = Terrain::flat(1.0);
    let s = airborne_state(2.0);
    let out = sim.step(&s, &s.joint_angles, &terrain).unwrap();
    let mut expected = s.clone();
    expected.time += 0.001;
    assert_eq!(out.state, expected);
    assert!(out.torques.iter().all(|t| *t == 0.0));
}

#[test]
fn free_fall_matches_closed_form() {
    let sim = sim_with(9.81);
    let terrain = Terrain::flat(1.0);
    let mut s = airborne_state(3.0);
    let targets = s.joint_angles;
    for _ in 0..100 {
        s = sim.step(&s, &targets, &terrain).unwrap().state;
    }
    let drop = 3.0 - s.base_position.z;
    assert!((drop - 0.04905).abs() < 1e-4, "drop {drop}");
}

#[test]
fn free_flight_energy_is_conserved() {
    let sim = sim_with(9.81);
    let terrain = Terrain::flat(1.0);
    let mut s = airborne_state(8.0);
    s.base_linear_velocity = Vector3::new(0.3, 0.1, 1.0);
    s.base_angular_velocity = Vector3::new(0.4, -0.3, 0.5);
    let m = sim.model.base_mass;
    let energy = |s: &RobotState| {
        let w = s.base_angular_velocity;
        0.5 * m * s.base_linear_velocity.norm_squared()
            + 0.5 * w.dot(&(sim.model.base_inertia * w))
            + m * 9.81 * s.base_position.z
    };
    let e0 = energy(&s);
    let targets = s.joint_angles;
    for _ in 0..1000 {
        s = sim.step(&s, &targets, &terrain).unwrap().state;
    }
    let drift = ((energy(&s) - e0) / e0).abs();
    assert!(drift < 1e-3, "relative drift {drift}");
}

/// Reference stick-force solve written out independently from the simulator.
fn stick_demand(
    sim: &Simulator,
    s: &RobotState,
    leg: usize,
    qd_free: [f64; 3],
    depth: f64,
) -> Vector3<f64> {
    let rot = s.rotation();
    let angles = leg_angles(&s.joint_angles, leg);
    let a = rot * foot_jacobian(&angles, leg, &sim.model);
    let g = sim.params.dt / sim.model.joint_reflected_inertia;
    let w = a * a.transpose() * g;
    let v = a * Vector3::from(qd_free);
    let (k, d, eps) = (
        sim.params.contact.stiffness,
        sim.params.contact.damping,
        sim.params.contact.tangential_compliance,
    );
    // Rows: tangential velocity after the step is zero; normal force follows
    // the spring-damper with post-step velocity.
    let m = Matrix3::new(
        w[(0, 0)] + eps,
        w[(0, 1)],
        w[(0, 2)],
        w[(1, 0)],
        w[(1, 1)] + eps,
        w[(1, 2)],
        d * w[(2, 0)],
        d * w[(2, 1)],
        1.0 + d * w[(2, 2)],
    );
    let rhs = Vector3::new(-v.x, -v.y, k * depth - d * v.z);
    m.try_inverse().unwrap() * rhs
}

#[test]
fn lateral_push_on_low_friction_slips_on_cone_boundary() {
    let sim = sim_with(9.81);
    let terrain = Terrain::flat(0.22);
    let mut q = nominal_pose();
    for leg in 1..4 {
        q[3 * leg + 2] = 2.4;
    }
    let depth = 0.005;
    let foot = forward_kinematics(&leg_angles(&q, 0), 0, &sim.model);
    let s = RobotState::standing(-foot.z - depth, q);

    let mut targets = q;
    targets[0] += 1.0;
    let tau = sim.motor_torque(targets[0], q[0], 0.0);
    assert_eq!(tau, sim.model.torque_limit);
    let qd_free = [
        sim.params.dt * tau / sim.model.joint_reflected_inertia,
        0.0,
        0.0,
    ];
    let demand = stick_demand(&sim, &s, 0, qd_free, depth);
    let demand_t = demand.x.hypot(demand.y);
    assert!(demand.z > 0.0);
    assert!(demand_t > 0.22 * demand.z, "demand inside cone");

    let out = sim.step(&s, &targets, &terrain).unwrap();
    let foot = out.contacts.feet[0];
    assert!(foot.in_contact && foot.slipping);
    let ft = foot.tangential_force[0].hypot(foot.tangential_force[1]);
    assert!((ft - 0.22 * foot.normal_force).abs() < 1e-6);
    for leg in 1..4 {
        assert!(!out.contacts.feet[leg].in_contact);
        assert_eq!(out.contacts.feet[leg].normal_force, 0.0);
    }
}

#[test]
fn sticking_foot_inside_cone() {
    let sim = sim_with(9.81);
    let terrain = Terrain::flat(1.0);
    let q = nominal_pose();
    let foot = forward_kinematics(&leg_angles(&q, 0), 0, &sim.model);
    let s = RobotState::standing(-foot.z - 0.004, q);
    let out = sim.step(&s, &q, &terrain).unwrap();
    for f in &out.contacts.feet {
        assert!(f.in_contact);
        assert!(!f.slipping);
        let ft = f.tangential_force[0].hypot(f.tangential_force[1]);
        assert!(ft <= f.normal_force + 1e-9);
    }
}

#[test]
fn stands_on_flat_ground() {
    let sim = sim_with(9.81);
    let terrain = Terrain::flat(1.0);
    let q = nominal_pose();
    let foot = forward_kinematics(&leg_angles(&q, 0), 0, &sim.model);
    let mut s = RobotState::standing(-foot.z, q);
    for _ in 0..2000 {
        let out = sim.step(&s, &q, &terrain).unwrap();
        for f in &out.contacts.feet {
            assert!(f.normal_force >= 0.0);
            if !f.in_contact {
                assert_eq!(f.normal_force, 0.0);
            }
            let ft = f.tangential_force[0].hypot(f.tangential_force[1]);
            assert!(ft <= terrain.friction(0.0, 0.0) * f.normal_force + 1e-9);
        }
        s = out.state;
        assert!((s.base_orientation.norm() - 1.0).abs() < 1e-9);
    }
    assert!(s.base_position.z > 0.15, "collapsed to {}", s.base_position.z);
    assert!(s.tilt() < 0.1);
}

#[test]
fn joint_limits_are_enforced() {
    let sim = sim_with(0.0);
    let terrain = Terrain::flat(1.0);
    let mut s = airborne_state(2.0);
    let mut targets = s.joint_angles;
    targets.iter_mut().for_each(|t| *t += 10.0);
    for _ in 0..500 {
        s = sim.step(&s, &targets, &terrain).unwrap().state;
        for (j, q) in s.joint_angles.iter().enumerate() {
            let [lo, hi] = sim.model.joint_limits[j];
            assert!(*q >= lo && *q <= hi);
        }
    }
}

#[test]
fn non_finite_inputs_fault_with_field_name() {
    let sim = sim_with(9.81);
    let terrain = Terrain::flat(1.0);
    let s = airborne_state(1.0);
    let mut targets = s.joint_angles;
    targets[4] = f64::NAN;
    let err = sim.step(&s, &targets, &terrain).unwrap_err();
    assert!(err.to_string().contains("pd_targets"), "{err}");

    let mut bad = s.clone();
    bad.joint_velocities[0] = f64::INFINITY;
    let err = sim.step(&bad, &s.joint_angles, &terrain).unwrap_err();
    assert!(err.to_string().contains("joint_velocities"), "{err}");
}

#[test]
fn identical_inputs_give_identical_trajectories() {
    let sim = sim_with(9.81);
    let terrain = crate::terrain::generate(crate::terrain::TerrainKind::Rough, 0.5, 3).unwrap();
    let run = || {
        let mut s = RobotState::standing(0.3, nominal_pose());
        let mut trace = Vec::new();
        for k in 0..600 {
            let mut targets = nominal_pose();
            targets[1] += 0.3 * (k as f64 * 0.02).sin();
            targets[7] -= 0.2 * (k as f64 * 0.03).cos();
            s = sim.step(&s, &targets, &terrain).unwrap().state;
            trace.push(s.clone());
        }
        trace
    };
    assert_eq!(run(), run());
}

#[test]
fn default_step_helper_uses_given_dt() {
    let model = RobotModel::default();
    let terrain = Terrain::flat(1.0);
    let s = airborne_state(2.0);
    let out = step(&s, &s.joint_angles, &model, &terrain, 0.001).unwrap();
    assert!((out.state.time - 0.001).abs() < 1e-15);
}

proptest! {
    #[test]
    fn friction_projection_is_idempotent(
        fx in -50.0f64..50.0, fy in -50.0f64..50.0, fn_ in 0.0f64..100.0, mu in 0.01f64..2.0
    ) {
        let once = project_friction([fx, fy], fn_, mu);
        let twice = project_friction(once, fn_, mu);
        prop_assert!((once[0].hypot(once[1])) <= mu * fn_ + 1e-9);
        prop_assert!((once[0] - twice[0]).abs() <= 1e-12 && (once[1] - twice[1]).abs() <= 1e-12);
    }

    #[test]
    fn admissible_forces_are_untouched(
        r in 0.0f64..1.0, angle in 0.0f64..6.28, fn_ in 0.0f64..100.0, mu in 0.01f64..2.0
    ) {
        let t = [r * mu * fn_ * angle.cos(), r * mu * fn_ * angle.sin()];
        prop_assert_eq!(project_friction(t, fn_, mu), t);
    }
}
