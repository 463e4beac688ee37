//! PPO finetuning with an asymmetric actor-critic, terrain curriculum and
//! per-episode domain randomization.

use std::io::Write;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{CommandSpec, Env, EnvConfig, EpisodeDraw, Outcome, RandomizationSpec};
use crate::error::{Error, Result};
use crate::metrics::heading_velocity;
use crate::policy::{
    critic_widths, gaussian_entropy, gaussian_log_prob, Adam, GaussianPolicy, Mlp, Workspace,
    ACTION_DIM, ACTOR_OBS_DIM, CRITIC_OBS_DIM,
};
use crate::sim::{ContactState, RobotModel, RobotState, NUM_JOINTS, NUM_LEGS};
use crate::terrain::{Terrain, TerrainConfig, TerrainKind};
use crate::trajectory::TrajectoryRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Command tracking plus motion and torque regularization.
    Sr,
    /// `Sr` plus a bonus for matching the planned contact sequence.
    Cr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub tracking: f64,
    /// Width `s` of the tracking kernel `exp(-|e|^2 / s)`.
    pub tracking_width: f64,
    pub motion: f64,
    pub torque: f64,
    pub contact: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            tracking: 1.0,
            tracking_width: 0.25,
            motion: 0.2,
            torque: 2e-4,
            contact: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub tracking: f64,
    /// Penalties are stored as the (non-positive) amounts added.
    pub motion: f64,
    pub torque: f64,
    pub contact: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn accumulate(&mut self, other: &RewardBreakdown) {
        self.tracking += other.tracking;
        self.motion += other.motion;
        self.torque += other.torque;
        self.contact += other.contact;
        self.total += other.total;
    }

    fn scaled(&self, k: f64) -> Self {
        Self {
            tracking: self.tracking * k,
            motion: self.motion * k,
            torque: self.torque * k,
            contact: self.contact * k,
            total: self.total * k,
        }
    }
}

pub fn compute_reward(
    s: &RobotState,
    contacts: &ContactState,
    torques: &[f64; NUM_JOINTS],
    command: &[f64; 3],
    planned: &[bool; NUM_LEGS],
    mode: RewardMode,
    w: &RewardWeights,
) -> RewardBreakdown {
    let row = TrajectoryRow::capture(0.0, s, torques, contacts, command);
    let v = heading_velocity(&row);
    let err: f64 = (0..3).map(|i| (v[i] - command[i]).powi(2)).sum();
    let tracking = w.tracking * (-err / w.tracking_width).exp();
    let wb = s.base_angular_velocity;
    let off_axis = s.base_linear_velocity.z.powi(2) + wb.x.powi(2) + wb.y.powi(2);
    let motion = -w.motion * off_axis;
    let torque = -w.torque * torques.iter().map(|t| t * t).sum::<f64>();
    let contact = match mode {
        RewardMode::Sr => 0.0,
        RewardMode::Cr => {
            let flags = contacts.flags();
            let matched = (0..NUM_LEGS).filter(|&l| flags[l] == planned[l]).count();
            w.contact * matched as f64 / NUM_LEGS as f64
        }
    };
    RewardBreakdown {
        tracking,
        motion,
        torque,
        contact,
        total: tracking + motion + torque + contact,
    }
}

/// Terrain difficulty schedule. Every `every` iterations the factor is
/// divided by `growth` (below one, so the factor grows), up to `cap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Curriculum {
    pub terrain_factor: f64,
    pub growth: f64,
    pub every: usize,
    pub cap: f64,
    pub flat_probability: f64,
    pub kinds: Vec<TerrainKind>,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            terrain_factor: 0.01,
            growth: 0.96,
            every: 5,
            cap: 1.0,
            flat_probability: 0.05,
            kinds: vec![
                TerrainKind::Rough,
                TerrainKind::DiscreteRough,
                TerrainKind::Step,
                TerrainKind::Cliff,
            ],
        }
    }
}

impl Curriculum {
    pub fn validate(&self) -> Result<()> {
        let ok = self.terrain_factor >= 0.0
            && self.growth > 0.0
            && self.growth <= 1.0
            && self.every > 0
            && self.cap >= self.terrain_factor
            && (0.0..=1.0).contains(&self.flat_probability)
            && !self.kinds.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid curriculum".into()))
        }
    }

    /// State after finishing `iteration` (zero-based).
    pub fn advance(&self, iteration: usize) -> Curriculum {
        let mut next = self.clone();
        if (iteration + 1) % self.every == 0 {
            next.terrain_factor = (self.terrain_factor / self.growth).min(self.cap);
        }
        next
    }

    /// Factor in effect during `iteration` when starting from `self`.
    pub fn factor_at(&self, iteration: usize) -> f64 {
        let steps = (iteration / self.every) as i32;
        (self.terrain_factor / self.growth.powi(steps)).min(self.cap)
    }

    /// Draws a terrain kind and the factor it is generated at.
    pub fn sample_terrain<R: Rng + ?Sized>(&self, rng: &mut R) -> (TerrainKind, f64) {
        if rng.random::<f64>() < self.flat_probability {
            (TerrainKind::Flat, 0.0)
        } else {
            let kind = *self.kinds.choose(rng).expect("non-empty kinds");
            (kind, self.terrain_factor)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub mode: RewardMode,
    pub init_std: f64,
    pub clip: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub num_envs: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Iterations at the start that train only the critic.
    pub critic_warmup: usize,
    pub rewards: RewardWeights,
    pub curriculum: Curriculum,
    pub terrain: TerrainConfig,
    pub randomization: RandomizationSpec,
    pub commands: CommandSpec,
    pub episode_seconds: f64,
    pub init_joint_noise: f64,
    pub init_yaw_noise: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self::ifm_sr()
    }
}

impl PpoConfig {
    pub fn ifm_sr() -> Self {
        Self {
            mode: RewardMode::Sr,
            init_std: 1.0,
            clip: 0.05,
            actor_lr: 1e-5,
            critic_lr: 1e-3,
            gamma: 0.99,
            lambda: 0.95,
            epochs: 4,
            minibatch: 4096,
            num_envs: 32,
            horizon: 100,
            iterations: 500,
            max_grad_norm: 1.0,
            normalize_advantages: true,
            critic_warmup: 0,
            rewards: RewardWeights::default(),
            curriculum: Curriculum::default(),
            terrain: TerrainConfig::default(),
            randomization: RandomizationSpec::default(),
            commands: CommandSpec {
                ranges: [[-1.0, 1.0]; 3],
                resample_every: None,
            },
            episode_seconds: 10.0,
            init_joint_noise: 0.05,
            init_yaw_noise: std::f64::consts::PI,
        }
    }

    pub fn ifm_cr() -> Self {
        Self {
            mode: RewardMode::Cr,
            init_std: 2.0,
            clip: 0.1,
            ..Self::ifm_sr()
        }
    }

    /// Unconstrained exploration: wide std and clip and a standard PPO
    /// learning rate.
    pub fn vanilla_sr() -> Self {
        Self {
            init_std: 3.0,
            clip: 0.2,
            actor_lr: 3e-4,
            ..Self::ifm_sr()
        }
    }

    pub fn vanilla_cr() -> Self {
        Self {
            mode: RewardMode::Cr,
            ..Self::vanilla_sr()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.clip > 0.0
            && self.actor_lr > 0.0
            && self.critic_lr > 0.0
            && self.init_std > 0.0
            && (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.lambda)
            && self.epochs > 0
            && self.minibatch > 0
            && self.num_envs > 0
            && self.horizon > 0
            && self.episode_seconds > 0.0;
        if !ok {
            return Err(Error::Config("invalid PPO configuration".into()));
        }
        self.curriculum.validate()?;
        self.terrain.validate()?;
        self.randomization.validate()
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            commands: self.commands,
            randomization: self.randomization,
            episode_seconds: self.episode_seconds,
            init_joint_noise: self.init_joint_noise,
            init_yaw_noise: self.init_yaw_noise,
            ..EnvConfig::default()
        }
    }
}

/// Transitions of `num_envs` environments over `horizon` ticks, stored
/// time-major (`index = t * num_envs + env`).
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub horizon: usize,
    pub actor_obs: Vec<f32>,
    pub critic_obs: Vec<f32>,
    pub actions: Vec<f32>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Episode ended by a fall or fault: no bootstrap.
    pub terminal: Vec<bool>,
    /// Episode cut by the time limit: bootstrap from `bootstrap`.
    pub truncated: Vec<bool>,
    pub bootstrap: Vec<f64>,
    /// Values of the states after the final tick.
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Generalized advantage estimation over a time-major batch.
pub fn compute_gae(batch: &mut RolloutBatch, gamma: f64, lambda: f64) {
    let (n, horizon) = (batch.num_envs, batch.horizon);
    batch.advantages = vec![0.0; n * horizon];
    batch.returns = vec![0.0; n * horizon];
    for e in 0..n {
        let mut gae = 0.0;
        for t in (0..horizon).rev() {
            let i = t * n + e;
            let next_value = if batch.terminal[i] {
                0.0
            } else if batch.truncated[i] {
                batch.bootstrap[i]
            } else if t + 1 == horizon {
                batch.last_values[e]
            } else {
                batch.values[i + n]
            };
            let done = batch.terminal[i] || batch.truncated[i];
            let delta = batch.rewards[i] + gamma * next_value - batch.values[i];
            gae = delta + if done { 0.0 } else { gamma * lambda * gae };
            batch.advantages[i] = gae;
            batch.returns[i] = gae + batch.values[i];
        }
    }
}

/// Clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)` and whether the
/// unclipped branch is active (so the sample contributes gradient).
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// Pre-generated terrains for the current curriculum level. Generating a
/// rough map costs milliseconds, so episodes draw from a fixed set that is
/// rebuilt only when the factor changes.
pub struct TerrainPool {
    pub factor: f64,
    kinds: Vec<TerrainKind>,
    maps: Vec<Vec<Arc<Terrain>>>,
    flat: Arc<Terrain>,
}

impl TerrainPool {
    pub const PER_KIND: usize = 8;

    pub fn build(config: &TerrainConfig, curriculum: &Curriculum, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut maps = Vec::with_capacity(curriculum.kinds.len());
        for &kind in &curriculum.kinds {
            let mut v = Vec::with_capacity(Self::PER_KIND);
            for _ in 0..Self::PER_KIND {
                v.push(Arc::new(config.generate(kind, curriculum.terrain_factor, rng.random())?));
            }
            maps.push(v);
        }
        Ok(Self {
            factor: curriculum.terrain_factor,
            kinds: curriculum.kinds.clone(),
            maps,
            flat: Arc::new(config.generate(TerrainKind::Flat, 0.0, 0)?),
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, curriculum: &Curriculum, rng: &mut R) -> Arc<Terrain> {
        let (kind, _) = curriculum.sample_terrain(rng);
        if kind == TerrainKind::Flat {
            return self.flat.clone();
        }
        let k = self.kinds.iter().position(|&x| x == kind).expect("kind in pool");
        self.maps[k][rng.random_range(0..Self::PER_KIND)].clone()
    }
}

/// An environment with its own episode stream on curriculum terrains.
pub struct TrainEnv {
    pub env: Env,
    rng: ChaCha8Rng,
    pub episodes: u64,
}

impl TrainEnv {
    pub fn new(model: RobotModel, config: EnvConfig, seed: u64) -> Result<Self> {
        let env = Env::new(model, config, Arc::new(Terrain::flat(1.0)), seed)?;
        Ok(Self {
            env,
            rng: ChaCha8Rng::seed_from_u64(seed),
            episodes: 0,
        })
    }

    pub fn reset(&mut self, curriculum: &Curriculum, pool: &TerrainPool) -> Result<EpisodeDraw> {
        let terrain = pool.draw(curriculum, &mut self.rng);
        let seed: u64 = self.rng.random();
        self.env.reset(Some(terrain), seed)?;
        self.episodes += 1;
        Ok(self.env.draw)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub reward: RewardBreakdown,
    pub terrain_factor: f64,
    pub episode_length: f64,
    pub episodes_finished: usize,
    pub falls: usize,
    pub kl: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub std_mean: f64,
    pub skipped_updates: usize,
}

impl PpoStats {
    pub const HEADER: [&'static str; 14] = [
        "iter",
        "mean_reward",
        "reward_tracking",
        "reward_motion",
        "reward_torque",
        "reward_contact",
        "terrain_factor",
        "episode_length",
        "kl",
        "clip_fraction",
        "std_mean",
        "value_loss",
        "entropy",
        "falls",
    ];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.iteration.to_string(),
            self.mean_reward.to_string(),
            self.reward.tracking.to_string(),
            self.reward.motion.to_string(),
            self.reward.torque.to_string(),
            self.reward.contact.to_string(),
            self.terrain_factor.to_string(),
            self.episode_length.to_string(),
            self.kl.to_string(),
            self.clip_fraction.to_string(),
            self.std_mean.to_string(),
            self.value_loss.to_string(),
            self.entropy.to_string(),
            self.falls.to_string(),
        ]
    }
}

pub fn write_stats_csv<W: Write>(stats: &[PpoStats], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PpoStats::HEADER)?;
    for s in stats {
        out.write_record(s.record())?;
    }
    out.flush()?;
    Ok(())
}

/// Logged per-episode randomization draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub iteration: usize,
    pub env: usize,
    pub seed: u64,
    pub terrain: String,
    pub terrain_factor: f64,
    pub friction: f64,
    pub latency_ticks: u64,
    pub kp: f64,
    pub kd: f64,
    pub motor_friction: f64,
}

pub struct Ppo {
    pub config: PpoConfig,
    pub policy: GaussianPolicy,
    pub critic: Mlp<f32>,
    pub curriculum: Curriculum,
    pub iteration: usize,
    pub stats: Vec<PpoStats>,
    pub episode_log: Vec<EpisodeRecord>,
    envs: Vec<TrainEnv>,
    pool: TerrainPool,
    seed: u64,
    actor_opt: Adam,
    std_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
    ws_actor: Workspace<f32>,
    ws_critic: Workspace<f32>,
    episode_lengths: Vec<f64>,
}

/// Forward only, into a reusable workspace.
fn batch_forward(net: &Mlp<f32>, x: &[f32], n: usize, ws: &mut Workspace<f32>) -> Vec<f32> {
    net.forward_batch(x, n, ws).to_vec()
}

impl Ppo {
    /// `policy` carries the actor weights; its log-std is reset to
    /// `config.init_std`.
    pub fn new(config: PpoConfig, model: RobotModel, policy: GaussianPolicy, seed: u64) -> Result<Self> {
        config.validate()?;
        if policy.actor.input_dim() != ACTOR_OBS_DIM || policy.actor.output_dim() != ACTION_DIM {
            return Err(Error::Config("policy does not match the observation layout".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = GaussianPolicy::new(policy.actor, config.init_std);
        let critic = Mlp::random(&critic_widths(), 1.0, &mut rng);
        let env_config = config.env_config();
        let mut envs = Vec::with_capacity(config.num_envs);
        let curriculum = config.curriculum.clone();
        let pool = TerrainPool::build(&config.terrain, &curriculum, seed)?;
        for i in 0..config.num_envs {
            let mut e = TrainEnv::new(model.clone(), env_config.clone(), seed.wrapping_mul(1000) + i as u64)?;
            e.reset(&curriculum, &pool)?;
            envs.push(e);
        }
        let n_actor = policy.actor.params().len();
        let n_critic = critic.params().len();
        let mut ppo = Self {
            actor_opt: Adam::new(n_actor, config.actor_lr).with_max_grad_norm(config.max_grad_norm),
            std_opt: Adam::new(ACTION_DIM, config.actor_lr),
            critic_opt: Adam::new(n_critic, config.critic_lr).with_max_grad_norm(config.max_grad_norm),
            config,
            policy,
            critic,
            curriculum,
            iteration: 0,
            stats: Vec::new(),
            episode_log: Vec::new(),
            envs,
            pool,
            seed,
            rng,
            ws_actor: Workspace::default(),
            ws_critic: Workspace::default(),
            episode_lengths: Vec::new(),
        };
        for i in 0..ppo.envs.len() {
            ppo.log_episode(i);
        }
        Ok(ppo)
    }

    fn log_episode(&mut self, env: usize) {
        let e = &self.envs[env].env;
        let t = e.terrain();
        self.episode_log.push(EpisodeRecord {
            iteration: self.iteration,
            env,
            seed: e.episode_seed,
            terrain: t.kind.to_string(),
            terrain_factor: t.terrain_factor,
            friction: e.draw.friction.unwrap_or(f64::NAN),
            latency_ticks: e.draw.latency_ticks,
            kp: e.draw.gains.kp,
            kd: e.draw.gains.kd,
            motor_friction: e.draw.motor_friction,
        });
    }

    fn critic_values(&mut self, obs: &[f32], n: usize) -> Vec<f64> {
        batch_forward(&self.critic, obs, n, &mut self.ws_critic)
            .into_iter()
            .map(|v| v as f64)
            .collect()
    }

    /// Roll out every environment for `horizon` ticks with actions sampled
    /// from the current policy.
    pub fn collect(&mut self) -> Result<(RolloutBatch, RewardBreakdown, usize)> {
        let (n, horizon) = (self.envs.len(), self.config.horizon);
        let mut b = RolloutBatch {
            num_envs: n,
            horizon,
            ..RolloutBatch::default()
        };
        let mut reward_sum = RewardBreakdown::default();
        let mut falls = 0;
        let mut obs = Vec::with_capacity(ACTOR_OBS_DIM);
        let mut cobs = Vec::with_capacity(CRITIC_OBS_DIM);
        for _ in 0..horizon {
            let start_a = b.actor_obs.len();
            let start_c = b.critic_obs.len();
            for e in &mut self.envs {
                e.env.actor_observation(&mut obs);
                b.actor_obs.extend_from_slice(&obs);
                e.env.critic_observation(&mut cobs);
                b.critic_obs.extend_from_slice(&cobs);
            }
            let means = batch_forward(&self.policy.actor, &b.actor_obs[start_a..], n, &mut self.ws_actor);
            let values = self.critic_values(&b.critic_obs[start_c..].to_vec(), n);
            for i in 0..n {
                let mean = &means[i * ACTION_DIM..(i + 1) * ACTION_DIM];
                let sample = self.policy.sample(mean, &mut self.rng);
                let logp = self.policy.log_prob(mean, &sample);
                let mut a = [0.0f32; ACTION_DIM];
                a.copy_from_slice(&sample);
                let env = &mut self.envs[i].env;
                let targets = env.config.decoder.decode(&a, &env.model);
                let outcome = env.step(&targets, &a);
                let planned = env.config.gait.contact_at(env.time());
                let r = compute_reward(
                    &env.state,
                    &env.contacts,
                    &env.torques,
                    &env.command,
                    &planned,
                    self.config.mode,
                    &self.config.rewards,
                );
                let reward = if r.total.is_finite() { r.total } else { 0.0 };
                reward_sum.accumulate(&r);
                let terminal = matches!(outcome, Outcome::Fell | Outcome::Fault);
                let truncated = outcome == Outcome::TimeLimit;
                let boot = if truncated {
                    env.critic_observation(&mut cobs);
                    self.critic_values(&cobs.clone(), 1)[0]
                } else {
                    0.0
                };
                b.actions.extend_from_slice(&a);
                b.log_probs.push(logp);
                b.values.push(values[i]);
                b.rewards.push(reward);
                b.terminal.push(terminal);
                b.truncated.push(truncated);
                b.bootstrap.push(boot);
                if outcome.done() {
                    falls += terminal as usize;
                    self.episode_lengths.push(self.envs[i].env.time());
                    self.envs[i].reset(&self.curriculum, &self.pool)?;
                    self.log_episode(i);
                }
            }
        }
        let mut last = Vec::with_capacity(n * CRITIC_OBS_DIM);
        for e in &self.envs {
            e.env.critic_observation(&mut cobs);
            last.extend_from_slice(&cobs);
        }
        b.last_values = self.critic_values(&last, n);
        Ok((b, reward_sum, falls))
    }

    /// PPO epochs over the batch. Returns `(kl, clip_fraction, value_loss,
    /// skipped)`.
    pub fn update(&mut self, batch: &RolloutBatch, train_actor: bool) -> (f64, f64, f64, usize) {
        let total = batch.len();
        let mut adv = batch.advantages.clone();
        if self.config.normalize_advantages && total > 1 {
            let mean = adv.iter().sum::<f64>() / total as f64;
            let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / total as f64;
            let std = var.sqrt();
            for a in &mut adv {
                *a = (*a - mean) / (std + 1e-8);
            }
        }
        let mut order: Vec<usize> = (0..total).collect();
        let (mut kl_sum, mut clip_sum, mut vloss_sum, mut count, mut batches) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let mut skipped = 0;
        let n_actor = self.policy.actor.params().len();
        let n_critic = self.critic.params().len();
        let mut g_actor = vec![0.0f32; n_actor];
        let mut g_std = vec![0.0f32; ACTION_DIM];
        let mut g_critic = vec![0.0f32; n_critic];
        let mut x = Vec::new();
        let mut xc = Vec::new();
        for _ in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            for idx in order.chunks(self.config.minibatch) {
                let m = idx.len();
                x.clear();
                xc.clear();
                for &i in idx {
                    x.extend_from_slice(&batch.actor_obs[i * ACTOR_OBS_DIM..(i + 1) * ACTOR_OBS_DIM]);
                    xc.extend_from_slice(&batch.critic_obs[i * CRITIC_OBS_DIM..(i + 1) * CRITIC_OBS_DIM]);
                }
                let snapshot = (
                    self.policy.actor.clone(),
                    self.policy.log_std.clone(),
                    self.critic.clone(),
                );

                let means = self.policy.actor.forward_batch(&x, m, &mut self.ws_actor).to_vec();
                let mut grad_mean = vec![0.0f32; m * ACTION_DIM];
                g_std.iter_mut().for_each(|g| *g = 0.0);
                let mut loss = 0.0;
                for (r, &i) in idx.iter().enumerate() {
                    let mean = &means[r * ACTION_DIM..(r + 1) * ACTION_DIM];
                    let action = &batch.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM];
                    let logp = gaussian_log_prob(mean, &self.policy.log_std, action);
                    let ratio = (logp - batch.log_probs[i]).exp();
                    let (surr, active) = clipped_surrogate(ratio, adv[i], self.config.clip);
                    loss -= surr / m as f64;
                    kl_sum += batch.log_probs[i] - logp;
                    clip_sum += ((ratio - 1.0).abs() > self.config.clip) as usize as f64;
                    count += 1;
                    if active {
                        // d(-r A / m) / d logp = -r A / m
                        let c = -ratio * adv[i] / m as f64;
                        for k in 0..ACTION_DIM {
                            let ls = self.policy.log_std[k] as f64;
                            let z = (action[k] as f64 - mean[k] as f64) / ls.exp();
                            grad_mean[r * ACTION_DIM + k] = (c * z / ls.exp()) as f32;
                            g_std[k] += (c * (z * z - 1.0)) as f32;
                        }
                    }
                }

                let values = self.critic.forward_batch(&xc, m, &mut self.ws_critic).to_vec();
                let mut grad_v = vec![0.0f32; m];
                let mut vloss = 0.0;
                for (r, &i) in idx.iter().enumerate() {
                    let e = values[r] as f64 - batch.returns[i];
                    vloss += e * e / m as f64;
                    grad_v[r] = (2.0 * e / m as f64) as f32;
                }
                vloss_sum += vloss;
                batches += 1;

                if !loss.is_finite() || !vloss.is_finite() {
                    skipped += 1;
                    continue;
                }
                if train_actor {
                    g_actor.iter_mut().for_each(|g| *g = 0.0);
                    self.policy.actor.backward_batch(&mut self.ws_actor, &grad_mean, &mut g_actor);
                    self.actor_opt.step(self.policy.actor.params_mut(), &g_actor);
                    self.std_opt.step(&mut self.policy.log_std, &g_std);
                }
                g_critic.iter_mut().for_each(|g| *g = 0.0);
                self.critic.backward_batch(&mut self.ws_critic, &grad_v, &mut g_critic);
                self.critic_opt.step(self.critic.params_mut(), &g_critic);

                let finite = self.policy.actor.is_finite()
                    && self.policy.log_std.iter().all(|v| v.is_finite())
                    && self.critic.is_finite();
                if !finite {
                    self.policy.actor = snapshot.0;
                    self.policy.log_std = snapshot.1;
                    self.critic = snapshot.2;
                    skipped += 1;
                }
            }
        }
        let c = count.max(1) as f64;
        (kl_sum / c, clip_sum / c, vloss_sum / batches.max(1) as f64, skipped)
    }

    /// One collect/update cycle; the curriculum advances afterwards.
    pub fn step(&mut self) -> Result<PpoStats> {
        let factor = self.curriculum.terrain_factor;
        self.episode_lengths.clear();
        let (mut batch, reward_sum, falls) = self.collect()?;
        compute_gae(&mut batch, self.config.gamma, self.config.lambda);
        let train_actor = self.iteration >= self.config.critic_warmup;
        let (kl, clip_fraction, value_loss, skipped) = self.update(&batch, train_actor);
        let n = batch.len() as f64;
        let std = self.policy.std();
        let stats = PpoStats {
            iteration: self.iteration,
            mean_reward: batch.rewards.iter().sum::<f64>() / n,
            reward: reward_sum.scaled(1.0 / n),
            terrain_factor: factor,
            episode_length: if self.episode_lengths.is_empty() {
                f64::NAN
            } else {
                self.episode_lengths.iter().sum::<f64>() / self.episode_lengths.len() as f64
            },
            episodes_finished: self.episode_lengths.len(),
            falls,
            kl,
            clip_fraction,
            value_loss,
            entropy: gaussian_entropy(&self.policy.log_std),
            std_mean: std.iter().map(|s| *s as f64).sum::<f64>() / std.len() as f64,
            skipped_updates: skipped,
        };
        self.curriculum = self.curriculum.advance(self.iteration);
        self.iteration += 1;
        if self.curriculum.terrain_factor != self.pool.factor {
            let level_seed = self.seed ^ (self.iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            self.pool = TerrainPool::build(&self.config.terrain, &self.curriculum, level_seed)?;
        }
        self.stats.push(stats.clone());
        Ok(stats)
    }

    pub fn run(&mut self, mut on_iter: impl FnMut(&PpoStats)) -> Result<()> {
        while self.iteration < self.config.iterations {
            let s = self.step()?;
            on_iter(&s);
        }
        Ok(())
    }
}

/// First iteration whose reward, averaged over a trailing `window`, reaches
/// `threshold`.
pub fn iterations_to_reach(rewards: &[f64], threshold: f64, window: usize) -> Option<usize> {
    let w = window.max(1);
    (0..rewards.len()).find(|&i| {
        let lo = (i + 1).saturating_sub(w);
        let avg = rewards[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
        avg >= threshold
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::nominal_pose;

    fn still() -> RobotState {
        RobotState::standing(0.28, nominal_pose())
    }

    #[test]
    fn perfect_tracking_earns_tracking_weight() {
        let w = RewardWeights::default();
        let r = compute_reward(&still(), &ContactState::default(), &[0.0; 12], &[0.0; 3], &[true; 4], RewardMode::Sr, &w);
        assert_eq!(r.total, w.tracking);
        assert_eq!(r.contact, 0.0);
    }

    #[test]
    fn contact_term_spans_weight() {
        let w = RewardWeights::default();
        let mut c = ContactState::default();
        for f in &mut c.feet {
            f.in_contact = true;
        }
        let all = compute_reward(&still(), &c, &[0.0; 12], &[0.0; 3], &[true; 4], RewardMode::Cr, &w);
        let none = compute_reward(&still(), &c, &[0.0; 12], &[0.0; 3], &[false; 4], RewardMode::Cr, &w);
        assert!((all.contact - none.contact - w.contact).abs() < 1e-15);
    }

    #[test]
    fn torque_penalty_is_quadratic() {
        let w = RewardWeights::default();
        let c = ContactState::default();
        let tau: [f64; 12] = std::array::from_fn(|i| i as f64 * 0.7 - 3.0);
        let r1 = compute_reward(&still(), &c, &tau, &[0.0; 3], &[true; 4], RewardMode::Sr, &w);
        let r2 = compute_reward(&still(), &c, &tau.map(|t| 2.0 * t), &[0.0; 3], &[true; 4], RewardMode::Sr, &w);
        assert!((r2.torque - 4.0 * r1.torque).abs() < 1e-12);
    }

    #[test]
    fn curriculum_schedule() {
        let c = Curriculum::default();
        let mut cur = c.clone();
        for it in 0..5 {
            assert_eq!(cur.terrain_factor, 0.01, "iteration {it}");
            cur = cur.advance(it);
        }
        assert!((cur.terrain_factor - 0.01 / 0.96).abs() < 1e-15);
        assert!((c.factor_at(5) - 0.010416666666666666).abs() < 1e-12);
        let mut cur = c.clone();
        for it in 0..5000 {
            cur = cur.advance(it);
            assert!(cur.terrain_factor <= 1.0);
        }
        assert_eq!(cur.terrain_factor, 1.0);
    }

    #[test]
    fn flat_terrain_frequency() {
        let c = Curriculum::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let flats = (0..20000).filter(|_| c.sample_terrain(&mut rng).0 == TerrainKind::Flat).count();
        let p = flats as f64 / 20000.0;
        assert!((p - 0.05).abs() < 0.01, "{p}");
        for _ in 0..100 {
            let (k, f) = c.sample_terrain(&mut rng);
            if k != TerrainKind::Flat {
                assert_eq!(f, 0.01);
            }
        }
    }

    fn batch(rewards: Vec<f64>, values: Vec<f64>, terminal: Vec<bool>, last: f64) -> RolloutBatch {
        let h = rewards.len();
        RolloutBatch {
            num_envs: 1,
            horizon: h,
            rewards,
            values,
            truncated: vec![false; h],
            bootstrap: vec![0.0; h],
            terminal,
            last_values: vec![last],
            ..RolloutBatch::default()
        }
    }

    #[test]
    fn gae_with_unit_discounts_is_return_minus_value() {
        let values = vec![0.3, -1.0, 2.0, 0.5, 0.0];
        let mut b = batch(vec![1.0; 5], values.clone(), vec![false, false, false, false, true], 9.0);
        compute_gae(&mut b, 1.0, 1.0);
        for t in 0..5 {
            let ret = (5 - t) as f64;
            assert!((b.advantages[t] - (ret - values[t])).abs() < 1e-12);
            assert!((b.returns[t] - ret).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_bootstraps_truncation_and_horizon() {
        let mut b = batch(vec![1.0, 1.0], vec![0.0, 0.0], vec![false, false], 10.0);
        b.truncated[0] = true;
        b.bootstrap[0] = 5.0;
        compute_gae(&mut b, 0.5, 1.0);
        assert!((b.advantages[0] - (1.0 + 0.5 * 5.0)).abs() < 1e-12);
        assert!((b.advantages[1] - (1.0 + 0.5 * 10.0)).abs() < 1e-12);
    }

    #[test]
    fn surrogate_hand_computed() {
        let ratio = (0.3f64 - 0.1).exp();
        let (s, active) = clipped_surrogate(ratio, 2.0, 0.1);
        assert!(!active);
        assert!((s - 1.1 * 2.0).abs() < 1e-10);
        let (s, active) = clipped_surrogate(ratio, -2.0, 0.1);
        assert!(active);
        assert!((s + ratio * 2.0).abs() < 1e-10);
        let (s, active) = clipped_surrogate(0.95, 1.5, 0.2);
        assert!(active);
        assert!((s - 1.425).abs() < 1e-10);
        let (s, active) = clipped_surrogate(1.0, 3.0, 0.05);
        assert!(active && s == 3.0);
    }

    #[test]
    fn threshold_crossing() {
        let r = [0.0, 0.1, 0.5, 0.9, 1.0, 1.0];
        assert_eq!(iterations_to_reach(&r, 0.8, 1), Some(3));
        assert_eq!(iterations_to_reach(&r, 0.8, 2), Some(4));
        assert_eq!(iterations_to_reach(&r, 2.0, 1), None);
    }
}
