//! DAgger: roll out the learner, label every visited state with the MPC
//! expert, aggregate, and fit the actor by minibatch Adam on the squared
//! action error.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{CommandSpec, Env, EnvConfig, Outcome, RandomizationSpec};
use crate::error::{Error, Result};
use crate::mpc::{ExpertConfig, MpcExpert};
use crate::policy::{Adam, GaussianPolicy, Mlp, Workspace, ACTION_DIM};
use crate::sim::{RobotModel, NUM_JOINTS};
use crate::terrain::Terrain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaggerConfig {
    pub num_envs: usize,
    pub steps_per_env: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate decays log-linearly to this value at
    /// `max_iterations`.
    pub final_learning_rate: f64,
    pub capacity: usize,
    pub max_iterations: usize,
    /// Stop once the held-out MSE falls below this fraction of the first
    /// iteration's; `None` always runs `max_iterations`.
    pub target_ratio: Option<f64>,
    pub holdout_episodes: usize,
    pub episode_seconds: f64,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        Self {
            num_envs: 10,
            steps_per_env: 400,
            epochs: 10,
            batch_size: 512,
            learning_rate: 1e-3,
            final_learning_rate: 1e-4,
            capacity: 400_000,
            max_iterations: 100,
            target_ratio: None,
            holdout_episodes: 4,
            episode_seconds: 4.0,
        }
    }
}

impl DaggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_envs == 0 || self.steps_per_env == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("DAgger sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.final_learning_rate > 0.0) {
            return Err(Error::Config("DAgger learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let span = self.max_iterations.saturating_sub(1).max(1) as f64;
        let u = (iteration as f64 / span).min(1.0);
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(u)
    }

    /// Flat-ground environment with one command per episode drawn from the
    /// evaluation ranges and no randomization.
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            commands: CommandSpec {
                resample_every: None,
                ..CommandSpec::protocol()
            },
            randomization: RandomizationSpec::none(),
            episode_seconds: self.episode_seconds,
            ..EnvConfig::default()
        }
    }
}

/// Append-only (observation, expert action) rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregatedDataset {
    pub obs_dim: usize,
    pub capacity: usize,
    observations: Vec<f32>,
    actions: Vec<f32>,
}

impl AggregatedDataset {
    pub fn new(obs_dim: usize, capacity: usize) -> Self {
        Self {
            obs_dim,
            capacity,
            observations: Vec::new(),
            actions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len() / ACTION_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn observation(&self, i: usize) -> &[f32] {
        &self.observations[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action(&self, i: usize) -> &[f32] {
        &self.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]
    }

    /// Append one row unless full. Non-finite rows are rejected.
    pub fn push(&mut self, obs: &[f32], action: &[f32]) -> Result<bool> {
        if obs.len() != self.obs_dim {
            return Err(Error::Dimension {
                what: "dataset observation",
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        if action.len() != ACTION_DIM {
            return Err(Error::Dimension {
                what: "dataset action",
                expected: ACTION_DIM,
                got: action.len(),
            });
        }
        if !obs.iter().chain(action).all(|v| v.is_finite()) {
            return Err(Error::NonFinite { field: "dataset row" });
        }
        if self.len() >= self.capacity {
            return Ok(false);
        }
        self.observations.extend_from_slice(obs);
        self.actions.extend_from_slice(action);
        Ok(true)
    }

    pub fn extend(&mut self, other: &AggregatedDataset) -> Result<usize> {
        let mut added = 0;
        for i in 0..other.len() {
            if self.push(other.observation(i), other.action(i))? {
                added += 1;
            }
        }
        Ok(added)
    }
}

/// Mean squared action error of `net` over the dataset.
pub fn dataset_mse(net: &Mlp<f32>, data: &AggregatedDataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut ws = Workspace::default();
    let chunk = 1024;
    let mut total = 0.0f64;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let n = end - start;
        let x = &data.observations[start * data.obs_dim..end * data.obs_dim];
        let y = net.forward_batch(x, n, &mut ws);
        let target = &data.actions[start * ACTION_DIM..end * ACTION_DIM];
        total += y
            .iter()
            .zip(target)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
        start = end;
    }
    total / (data.len() * ACTION_DIM) as f64
}

/// Minibatch Adam on the mean squared action error.
pub struct Trainer {
    pub adam: Adam,
    pub batch_size: usize,
    rng: ChaCha8Rng,
    ws: Workspace<f32>,
    grads: Vec<f32>,
    batch_obs: Vec<f32>,
    grad_out: Vec<f32>,
}

impl Trainer {
    pub fn new(net: &Mlp<f32>, learning_rate: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            adam: Adam::new(net.params().len(), learning_rate),
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ws: Workspace::default(),
            grads: vec![0.0; net.params().len()],
            batch_obs: Vec::new(),
            grad_out: Vec::new(),
        }
    }

    /// One pass over the data in a fresh random order. Returns the mean
    /// minibatch loss.
    pub fn epoch(&mut self, net: &mut Mlp<f32>, data: &AggregatedDataset) -> f64 {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(self.batch_size) {
            let n = idx.len();
            self.batch_obs.clear();
            for &i in idx {
                self.batch_obs.extend_from_slice(data.observation(i));
            }
            let y = net.forward_batch(&self.batch_obs, n, &mut self.ws);
            self.grad_out.clear();
            let scale = 2.0 / (n * ACTION_DIM) as f32;
            let mut loss = 0.0f64;
            for (r, &i) in idx.iter().enumerate() {
                let target = data.action(i);
                for k in 0..ACTION_DIM {
                    let e = y[r * ACTION_DIM + k] - target[k];
                    loss += (e as f64).powi(2);
                    self.grad_out.push(scale * e);
                }
            }
            self.grads.iter_mut().for_each(|g| *g = 0.0);
            net.backward_batch(&mut self.ws, &self.grad_out, &mut self.grads);
            self.adam.step(net.params_mut(), &self.grads);
            loss_sum += loss / (n * ACTION_DIM) as f64;
            batches += 1;
        }
        if batches == 0 {
            0.0
        } else {
            loss_sum / batches as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaggerStats {
    pub iteration: usize,
    pub dataset_size: usize,
    pub train_mse_before: f64,
    pub train_mse: f64,
    pub holdout_mse: f64,
    pub mean_episode_length: f64,
    pub expert_degraded_count: usize,
    pub episodes: usize,
    pub falls: usize,
}

impl DaggerStats {
    pub const HEADER: [&'static str; 6] = [
        "iter",
        "dataset_size",
        "train_mse",
        "holdout_mse",
        "mean_episode_length",
        "expert_degraded_count",
    ];

    pub fn record(&self) -> [String; 6] {
        [
            self.iteration.to_string(),
            self.dataset_size.to_string(),
            self.train_mse.to_string(),
            self.holdout_mse.to_string(),
            self.mean_episode_length.to_string(),
            self.expert_degraded_count.to_string(),
        ]
    }
}

pub fn write_stats_csv<W: Write>(stats: &[DaggerStats], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(DaggerStats::HEADER)?;
    for s in stats {
        out.write_record(s.record())?;
    }
    out.flush()?;
    Ok(())
}

/// Seed of episode `episode` of env `env` in iteration `iteration`.
fn episode_seed(base: u64, iteration: usize, env: usize, episode: usize) -> u64 {
    base ^ ((iteration as u64) << 40) ^ ((env as u64) << 20) ^ episode as u64
}

/// Which controller drives the rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutDriver {
    Expert,
    Learner,
}

pub struct RolloutResult {
    pub data: AggregatedDataset,
    pub episode_lengths: Vec<f64>,
    pub falls: usize,
    pub degraded: usize,
}

/// Roll out one environment for exactly `steps` control ticks, resetting
/// after each episode, and label every visited state with the expert.
#[allow(clippy::too_many_arguments)]
pub fn labeled_rollout(
    env: &mut Env,
    expert: &mut MpcExpert,
    policy: &GaussianPolicy,
    driver: RolloutDriver,
    steps: usize,
    seed_base: u64,
    iteration: usize,
    env_index: usize,
) -> Result<RolloutResult> {
    let mut data = AggregatedDataset::new(policy.actor.input_dim(), usize::MAX);
    let mut lengths = Vec::new();
    let (mut falls, mut degraded) = (0, 0);
    let mut episode = 0;
    env.reset(None, episode_seed(seed_base, iteration, env_index, episode))?;
    expert.reset();
    let mut obs = Vec::new();
    let decoder = env.config.decoder;
    while data.len() < steps {
        env.actor_observation(&mut obs);
        let t = env.time();
        let expert_targets = expert.act(&env.state, &env.command, t, env.terrain())?;
        if expert.last.degraded {
            degraded += 1;
        }
        let label = decoder.encode(&expert_targets);
        data.push(&obs, &label)?;
        let (targets, action) = match driver {
            RolloutDriver::Expert => (expert_targets, label),
            RolloutDriver::Learner => {
                let mean = policy.mean(&obs);
                let mut a = [0.0f32; NUM_JOINTS];
                a.copy_from_slice(&mean);
                (decoder.decode(&a, &env.model), a)
            }
        };
        let outcome = env.step(&targets, &action);
        if outcome.done() {
            lengths.push(env.time());
            if outcome == Outcome::Fell || outcome == Outcome::Fault {
                falls += 1;
            }
            episode += 1;
            env.reset(None, episode_seed(seed_base, iteration, env_index, episode))?;
            expert.reset();
        }
    }
    if env.tick > 0 {
        lengths.push(env.time());
    }
    Ok(RolloutResult {
        data,
        episode_lengths: lengths,
        falls,
        degraded,
    })
}

/// DAgger driver state.
pub struct Dagger {
    pub config: DaggerConfig,
    pub policy: GaussianPolicy,
    pub dataset: AggregatedDataset,
    pub holdout: AggregatedDataset,
    pub stats: Vec<DaggerStats>,
    envs: Vec<Env>,
    experts: Vec<MpcExpert>,
    trainer: Trainer,
    seed: u64,
}

impl Dagger {
    pub fn new(
        config: DaggerConfig,
        model: RobotModel,
        expert_config: ExpertConfig,
        policy: GaussianPolicy,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let env_config = config.env_config();
        let terrain = Arc::new(Terrain::flat(1.0));
        let mut envs = Vec::with_capacity(config.num_envs);
        let mut experts = Vec::with_capacity(config.num_envs);
        for i in 0..config.num_envs {
            envs.push(Env::new(model.clone(), env_config.clone(), Arc::clone(&terrain), seed + i as u64)?);
            experts.push(MpcExpert::new(model.clone(), env_config.sim.gains, expert_config.clone())?);
        }
        // Held-out states come from expert episodes on seeds the training
        // rollouts never use.
        let mut holdout = AggregatedDataset::new(policy.actor.input_dim(), usize::MAX);
        let steps = (config.episode_seconds / env_config.control_dt).round() as usize;
        for e in 0..config.holdout_episodes {
            let r = labeled_rollout(
                &mut envs[0],
                &mut experts[0],
                &policy,
                RolloutDriver::Expert,
                steps,
                !seed,
                usize::MAX >> 24,
                e,
            )?;
            holdout.extend(&r.data)?;
        }
        let trainer = Trainer::new(&policy.actor, config.learning_rate, config.batch_size, seed ^ 0xda66e7);
        Ok(Self {
            dataset: AggregatedDataset::new(policy.actor.input_dim(), config.capacity),
            config,
            policy,
            holdout,
            stats: Vec::new(),
            envs,
            experts,
            trainer,
            seed,
        })
    }

    /// One aggregation round: roll out, label, append, train.
    pub fn iteration(&mut self) -> Result<DaggerStats> {
        let k = self.stats.len();
        let driver = if k == 0 {
            RolloutDriver::Expert
        } else {
            RolloutDriver::Learner
        };
        let mut lengths = Vec::new();
        let (mut falls, mut degraded) = (0, 0);
        let mut fresh = Vec::with_capacity(self.envs.len());
        for (i, (env, expert)) in self.envs.iter_mut().zip(self.experts.iter_mut()).enumerate() {
            let r = labeled_rollout(
                env,
                expert,
                &self.policy,
                driver,
                self.config.steps_per_env,
                self.seed,
                k,
                i,
            )?;
            lengths.extend(r.episode_lengths);
            falls += r.falls;
            degraded += r.degraded;
            fresh.push(r.data);
        }
        for d in &fresh {
            self.dataset.extend(d)?;
        }
        let before = dataset_mse(&self.policy.actor, &self.dataset);
        self.trainer.adam.lr = self.config.learning_rate_at(k);
        for _ in 0..self.config.epochs {
            self.trainer.epoch(&mut self.policy.actor, &self.dataset);
        }
        if !self.policy.actor.is_finite() {
            return Err(Error::NonFinite { field: "actor parameters" });
        }
        let stats = DaggerStats {
            iteration: k,
            dataset_size: self.dataset.len(),
            train_mse_before: before,
            train_mse: dataset_mse(&self.policy.actor, &self.dataset),
            holdout_mse: dataset_mse(&self.policy.actor, &self.holdout),
            mean_episode_length: lengths.iter().sum::<f64>() / lengths.len().max(1) as f64,
            expert_degraded_count: degraded,
            episodes: lengths.len(),
            falls,
        };
        self.stats.push(stats.clone());
        Ok(stats)
    }

    /// Held-out MSE relative to the first iteration's.
    pub fn holdout_ratio(&self) -> Option<f64> {
        let first = self.stats.first()?.holdout_mse;
        let last = self.stats.last()?.holdout_mse;
        Some(last / first)
    }

    pub fn should_stop(&self) -> bool {
        if self.stats.len() >= self.config.max_iterations {
            return true;
        }
        match (self.config.target_ratio, self.holdout_ratio()) {
            (Some(target), Some(r)) => self.stats.len() > 1 && r < target,
            _ => false,
        }
    }

    /// Iterate until [`Dagger::should_stop`], calling `on_iter` after each.
    pub fn run(&mut self, mut on_iter: impl FnMut(&DaggerStats)) -> Result<()> {
        while !self.should_stop() {
            let s = self.iteration()?;
            on_iter(&s);
        }
        Ok(())
    }
}
