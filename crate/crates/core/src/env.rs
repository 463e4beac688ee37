//! Control-rate environment around the simulator: command sampling, gait
//! clock, actuation latency, per-episode randomization, observations and
//! termination.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpc::{GaitSchedule, MpcExpert};
use crate::policy::obs::{self, ObsHistory, ObsNoise, Proprio, TaskInputs};
use crate::policy::{ActionDecoder, GaussianPolicy};
use crate::sim::{
    forward_kinematics, knee_position, leg_angles, nominal_pose, ContactState, PdGains,
    RobotModel, RobotState, SimParams, Simulator, NUM_JOINTS, NUM_LEGS,
};
use crate::terrain::Terrain;
use crate::trajectory::TrajectoryRow;

pub const MAX_TILT: f64 = 70.0 * std::f64::consts::PI / 180.0;
/// Base-center height above the terrain below which the belly touches.
pub const BODY_CLEARANCE: f64 = 0.08;
/// Hip-joint (body corner) height above the terrain below which it touches.
pub const CORNER_CLEARANCE: f64 = 0.03;

/// True when the trunk or a knee touches the ground or the body tilts past
/// 70 degrees.
pub fn should_terminate(s: &RobotState, model: &RobotModel, terrain: &Terrain) -> bool {
    if s.tilt() > MAX_TILT {
        return true;
    }
    let p = s.base_position;
    if p.z - terrain.height(p.x, p.y) < BODY_CLEARANCE {
        return true;
    }
    let rot = s.rotation();
    for leg in 0..NUM_LEGS {
        let corner = p + rot * model.hip_offsets[leg];
        if corner.z - terrain.height(corner.x, corner.y) < CORNER_CLEARANCE {
            return true;
        }
        let knee = p + rot * knee_position(&leg_angles(&s.joint_angles, leg), leg, model);
        if knee.z < terrain.height(knee.x, knee.y) {
            return true;
        }
    }
    false
}

/// Holds PD targets until their scheduled simulator tick.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayLine {
    pending: VecDeque<(u64, [f64; NUM_JOINTS])>,
    current: [f64; NUM_JOINTS],
}

impl DelayLine {
    pub fn new(initial: [f64; NUM_JOINTS]) -> Self {
        Self {
            pending: VecDeque::new(),
            current: initial,
        }
    }

    /// Schedule `target` to take effect at simulator tick `tick`.
    pub fn push(&mut self, tick: u64, target: [f64; NUM_JOINTS]) {
        self.pending.push_back((tick, target));
    }

    /// Target in force at `tick`. Ticks must be queried in order.
    pub fn at(&mut self, tick: u64) -> [f64; NUM_JOINTS] {
        while let Some((t, target)) = self.pending.front() {
            if *t > tick {
                break;
            }
            self.current = *target;
            self.pending.pop_front();
        }
        self.current
    }
}

/// Per-episode randomization ranges. Degenerate ranges disable a term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizationSpec {
    /// Ground friction cap; `None` keeps the terrain's own values. An absent
    /// key reads as `None` so that `None` survives a serialize round trip.
    #[serde(default)]
    pub friction: Option<[f64; 2]>,
    pub latency_ms: [f64; 2],
    pub kp_scale: [f64; 2],
    pub kd_scale: [f64; 2],
    pub motor_friction: [f64; 2],
    pub obs_noise: ObsNoise,
}

impl Default for RandomizationSpec {
    fn default() -> Self {
        Self {
            friction: Some([0.3, 1.0]),
            latency_ms: [0.0, 10.0],
            kp_scale: [0.9, 1.1],
            kd_scale: [0.8, 1.2],
            motor_friction: [0.0, 0.2],
            obs_noise: ObsNoise::default(),
        }
    }
}

impl RandomizationSpec {
    pub fn none() -> Self {
        Self {
            friction: None,
            latency_ms: [0.0, 0.0],
            kp_scale: [1.0, 1.0],
            kd_scale: [1.0, 1.0],
            motor_friction: [0.0, 0.0],
            obs_noise: ObsNoise::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        let mut ok = ordered(self.latency_ms)
            && ordered(self.kp_scale)
            && ordered(self.kd_scale)
            && ordered(self.motor_friction)
            && self.latency_ms[0] >= 0.0
            && self.kp_scale[0] > 0.0
            && self.kd_scale[0] >= 0.0
            && self.motor_friction[0] >= 0.0;
        if let Some(f) = self.friction {
            ok &= ordered(f) && f[0] > 0.0 && f[1] <= 2.0;
        }
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid randomization ranges".into()))
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, nominal: &PdGains, rng: &mut R) -> EpisodeDraw {
        let mut u = |r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..r[1]) } else { r[0] };
        let friction = self.friction.map(&mut u);
        let latency_ms = u(self.latency_ms);
        let gains = PdGains {
            kp: nominal.kp * u(self.kp_scale),
            kd: nominal.kd * u(self.kd_scale),
        };
        let motor_friction = u(self.motor_friction);
        EpisodeDraw {
            friction,
            latency_ticks: latency_ms.round() as u64,
            gains,
            motor_friction,
            obs_noise: self.obs_noise,
        }
    }
}

/// Values drawn for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDraw {
    pub friction: Option<f64>,
    /// Delay in 1 kHz simulator ticks.
    pub latency_ticks: u64,
    pub gains: PdGains,
    pub motor_friction: f64,
    pub obs_noise: ObsNoise,
}

/// Uniform command ranges for `[v_x, v_y, omega_z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommandSpec {
    pub ranges: [[f64; 2]; 3],
    /// Resample period in seconds; `None` keeps one command per episode.
    #[serde(default)]
    pub resample_every: Option<f64>,
}

impl Default for CommandSpec {
    fn default() -> Self {
        Self::protocol()
    }
}

impl CommandSpec {
    /// Evaluation protocol: new command every 4 s.
    pub fn protocol() -> Self {
        Self {
            ranges: [[-0.3, 1.0], [-0.5, 0.5], [-0.6, 0.6]],
            resample_every: Some(4.0),
        }
    }

    pub fn fixed(command: [f64; 3]) -> Self {
        Self {
            ranges: command.map(|c| [c, c]),
            resample_every: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        self.ranges
            .map(|[lo, hi]| if lo < hi { rng.random_range(lo..hi) } else { lo })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub control_dt: f64,
    pub sim: SimParams,
    pub gait: GaitSchedule,
    pub decoder: ActionDecoder,
    pub commands: CommandSpec,
    pub randomization: RandomizationSpec,
    pub init_height: f64,
    /// Half-width of uniform perturbations of the initial joint angles (rad)
    /// and yaw (rad); zero starts from the nominal pose facing +x.
    pub init_joint_noise: f64,
    pub init_yaw_noise: f64,
    pub episode_seconds: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            control_dt: 0.01,
            sim: SimParams::default(),
            gait: GaitSchedule::default(),
            decoder: ActionDecoder::default(),
            commands: CommandSpec::protocol(),
            randomization: RandomizationSpec::none(),
            init_height: 0.28,
            init_joint_noise: 0.0,
            init_yaw_noise: 0.0,
            episode_seconds: 20.0,
        }
    }
}

impl EnvConfig {
    pub fn substeps(&self) -> u64 {
        (self.control_dt / self.sim.dt).round() as u64
    }

    pub fn episode_ticks(&self) -> u64 {
        (self.episode_seconds / self.control_dt).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.control_dt / self.sim.dt;
        if !(self.sim.dt > 0.0) || !(n >= 1.0) || (n - n.round()).abs() > 1e-9 {
            return Err(Error::Config(
                "control_dt must be a positive multiple of the simulator dt".into(),
            ));
        }
        if !(self.episode_seconds > 0.0) || !(self.init_height > 0.0) {
            return Err(Error::Config("episode length and init height must be positive".into()));
        }
        if !(self.decoder.sigma > 0.0) {
            return Err(Error::Config("action scale sigma must be positive".into()));
        }
        self.randomization.validate()
    }
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Running,
    Fell,
    TimeLimit,
    /// The simulator rejected a non-finite state or target.
    Fault,
}

impl Outcome {
    pub fn done(self) -> bool {
        self != Outcome::Running
    }
}

#[derive(Debug, Clone)]
pub struct Env {
    pub config: EnvConfig,
    pub model: RobotModel,
    sim: Simulator,
    /// Terrain as generated; `terrain` adds this episode's friction draw.
    base_terrain: Arc<Terrain>,
    terrain: Arc<Terrain>,
    pub state: RobotState,
    pub contacts: ContactState,
    pub torques: [f64; NUM_JOINTS],
    pub command: [f64; 3],
    pub draw: EpisodeDraw,
    pub episode_seed: u64,
    pub tick: u64,
    pub prev_action: [f32; NUM_JOINTS],
    history: ObsHistory,
    last_reading: Option<Proprio>,
    delay: DelayLine,
    sim_tick: u64,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(model: RobotModel, config: EnvConfig, terrain: Arc<Terrain>, seed: u64) -> Result<Self> {
        config.validate()?;
        let sim = Simulator::new(model.clone(), config.sim)?;
        let draw = RandomizationSpec::none().draw(&config.sim.gains, &mut ChaCha8Rng::seed_from_u64(0));
        let state = RobotState::standing(config.init_height, nominal_pose());
        let mut env = Self {
            delay: DelayLine::new(state.joint_angles),
            config,
            model,
            sim,
            base_terrain: Arc::clone(&terrain),
            terrain,
            state,
            contacts: ContactState::default(),
            torques: [0.0; NUM_JOINTS],
            command: [0.0; 3],
            draw,
            episode_seed: seed,
            tick: 0,
            prev_action: [0.0; NUM_JOINTS],
            history: ObsHistory::default(),
            last_reading: None,
            sim_tick: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset(None, seed)?;
        Ok(env)
    }

    pub fn terrain(&self) -> &Terrain {
        &self.terrain
    }

    /// The generated terrain, without the episode's friction draw.
    pub fn base_terrain(&self) -> Arc<Terrain> {
        Arc::clone(&self.base_terrain)
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.config.control_dt
    }

    pub fn schedule(&self) -> &GaitSchedule {
        &self.config.gait
    }

    /// Start a new episode, optionally on a new terrain. Everything random in
    /// the episode derives from `seed`.
    pub fn reset(&mut self, terrain: Option<Arc<Terrain>>, seed: u64) -> Result<()> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.episode_seed = seed;
        self.draw = self.config.randomization.draw(&self.config.sim.gains, &mut self.rng);
        if let Some(t) = terrain {
            self.base_terrain = t;
        }
        self.terrain = match self.draw.friction {
            Some(mu) => Arc::new(self.base_terrain.with_friction_cap(mu)),
            None => Arc::clone(&self.base_terrain),
        };
        let params = SimParams {
            gains: self.draw.gains,
            motor_friction: self.draw.motor_friction,
            ..self.config.sim
        };
        self.sim = Simulator::new(self.model.clone(), params)?;

        let mut q = self.config.decoder.q_init;
        if self.config.init_joint_noise > 0.0 {
            let a = self.config.init_joint_noise;
            for (j, v) in q.iter_mut().enumerate() {
                *v = self.model.clamp_joint(j, *v + self.rng.random_range(-a..=a));
            }
        }
        let ground = self.terrain.height(0.0, 0.0);
        let mut s = RobotState::standing(ground + self.config.init_height, q);
        if self.config.init_yaw_noise > 0.0 {
            let a = self.config.init_yaw_noise;
            let yaw = self.rng.random_range(-a..=a);
            s.base_orientation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
        }
        self.state = s;
        self.contacts = ContactState::default();
        self.torques = [0.0; NUM_JOINTS];
        self.command = self.config.commands.sample(&mut self.rng);
        self.tick = 0;
        self.sim_tick = 0;
        self.prev_action = [0.0; NUM_JOINTS];
        self.history.reset();
        self.last_reading = None;
        self.delay = DelayLine::new(q);
        Ok(())
    }

    fn task_inputs(&self) -> TaskInputs {
        let t = self.time();
        let k = self.config.decoder.sigma * obs::PREV_ACTION_SCALE;
        TaskInputs {
            prev_action: self.prev_action.map(|a| (a as f64 * k) as f32),
            planned_contacts: self.config.gait.contact_at(t),
            phase: self.config.gait.phase(t),
            command: self.command,
        }
    }

    /// Actor observation with this episode's sensor noise. Call at most once
    /// per tick; the reading feeds the joint history.
    pub fn actor_observation(&mut self, out: &mut Vec<f32>) {
        let noise = self.draw.obs_noise;
        let p = Proprio::measure(&self.state, &self.config.decoder.q_init, &noise, &mut self.rng);
        obs::actor_observation(&p, &self.history, &self.task_inputs(), out);
        self.last_reading = Some(p);
    }

    pub fn critic_observation(&self, out: &mut Vec<f32>) {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let exact = Proprio::measure(
            &self.state,
            &self.config.decoder.q_init,
            &ObsNoise::zero(),
            &mut unused,
        );
        let p = self.state.base_position;
        let h = p.z - self.terrain.height(p.x, p.y);
        obs::critic_observation(&exact, &self.state, h, &self.task_inputs(), out);
    }

    /// Apply PD targets for one control period. `action` is what the
    /// observation reports as the previous action next tick.
    pub fn step(&mut self, targets: &[f64; NUM_JOINTS], action: &[f32; NUM_JOINTS]) -> Outcome {
        if let Some(p) = self.last_reading.take() {
            self.history.push(&p);
        } else {
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let p = Proprio::measure(
                &self.state,
                &self.config.decoder.q_init,
                &ObsNoise::zero(),
                &mut unused,
            );
            self.history.push(&p);
        }
        self.prev_action = *action;
        if targets.iter().any(|t| !t.is_finite()) {
            return Outcome::Fault;
        }
        self.delay.push(self.sim_tick + self.draw.latency_ticks, *targets);
        for _ in 0..self.config.substeps() {
            let target = self.delay.at(self.sim_tick);
            match self.sim.step(&self.state, &target, &self.terrain) {
                Ok(out) => {
                    self.state = out.state;
                    self.contacts = out.contacts;
                    self.torques = out.torques;
                }
                Err(_) => return Outcome::Fault,
            }
            self.sim_tick += 1;
        }
        self.tick += 1;
        if let Some(period) = self.config.commands.resample_every {
            let every = (period / self.config.control_dt).round() as u64;
            if every > 0 && self.tick % every == 0 {
                self.command = self.config.commands.sample(&mut self.rng);
            }
        }
        if should_terminate(&self.state, &self.model, &self.terrain) {
            Outcome::Fell
        } else if self.tick >= self.config.episode_ticks() {
            Outcome::TimeLimit
        } else {
            Outcome::Running
        }
    }

    pub fn row(&self) -> TrajectoryRow {
        TrajectoryRow::capture(self.time(), &self.state, &self.torques, &self.contacts, &self.command)
    }

    /// World-frame foot positions.
    pub fn foot_positions(&self) -> [Vector3<f64>; NUM_LEGS] {
        let rot = self.state.rotation();
        [0, 1, 2, 3].map(|leg| {
            self.state.base_position
                + rot * forward_kinematics(&leg_angles(&self.state.joint_angles, leg), leg, &self.model)
        })
    }
}

/// Something that turns the current environment state into PD targets.
pub trait Controller {
    fn reset(&mut self);

    /// Returns the PD targets and the normalized action they correspond to.
    fn act(&mut self, env: &mut Env) -> Result<([f64; NUM_JOINTS], [f32; NUM_JOINTS])>;
}

/// MPC expert using the nominal PD gains for its torque inversion.
pub struct ExpertController {
    pub expert: MpcExpert,
    pub degraded_count: usize,
}

impl ExpertController {
    pub fn new(expert: MpcExpert) -> Self {
        Self {
            expert,
            degraded_count: 0,
        }
    }
}

impl Controller for ExpertController {
    fn reset(&mut self) {
        self.expert.reset();
    }

    fn act(&mut self, env: &mut Env) -> Result<([f64; NUM_JOINTS], [f32; NUM_JOINTS])> {
        let t = env.time();
        let targets = self.expert.act(&env.state, &env.command, t, &env.terrain)?;
        if self.expert.last.degraded {
            self.degraded_count += 1;
        }
        Ok((targets, env.config.decoder.encode(&targets)))
    }
}

/// Deterministic policy: executes the Gaussian mean.
pub struct PolicyController {
    pub policy: GaussianPolicy,
    obs: Vec<f32>,
}

impl PolicyController {
    pub fn new(policy: GaussianPolicy) -> Self {
        Self {
            policy,
            obs: Vec::with_capacity(obs::ACTOR_OBS_DIM),
        }
    }
}

impl Controller for PolicyController {
    fn reset(&mut self) {}

    fn act(&mut self, env: &mut Env) -> Result<([f64; NUM_JOINTS], [f32; NUM_JOINTS])> {
        env.actor_observation(&mut self.obs);
        obs::check_dim(&self.obs, self.policy.actor.input_dim())?;
        let mean = self.policy.mean(&self.obs);
        let mut a = [0.0f32; NUM_JOINTS];
        a.copy_from_slice(&mean);
        Ok((env.config.decoder.decode(&a, &env.model), a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub outcome: Outcome,
    pub ticks: u64,
    pub seconds: f64,
}

/// Run `controller` from the current env state until the episode ends,
/// appending one trajectory row per control tick (the initial state first).
pub fn run_episode(
    env: &mut Env,
    controller: &mut dyn Controller,
    mut log: Option<&mut Vec<TrajectoryRow>>,
) -> EpisodeSummary {
    controller.reset();
    if let Some(rows) = log.as_deref_mut() {
        rows.push(env.row());
    }
    let outcome = loop {
        let outcome = match controller.act(env) {
            Ok((targets, action)) => env.step(&targets, &action),
            Err(_) => Outcome::Fault,
        };
        if let Some(rows) = log.as_deref_mut() {
            rows.push(env.row());
        }
        if outcome.done() {
            break outcome;
        }
    };
    EpisodeSummary {
        outcome,
        ticks: env.tick,
        seconds: env.time(),
    }
}
