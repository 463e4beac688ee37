//! Episode batteries: run a controller over a fixed, seeded set of episodes
//! and summarize each with [`EvalReport`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{run_episode, CommandSpec, Controller, Env, EnvConfig, Outcome, RandomizationSpec};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, SolveTimeStats};
use crate::sim::RobotModel;
use crate::terrain::{TerrainConfig, TerrainKind};
use crate::trajectory::TrajectoryRow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub terrain: TerrainKind,
    pub terrain_factor: f64,
    pub commands: CommandSpec,
    pub episodes: usize,
    pub episode_seconds: f64,
    pub seed: u64,
    pub randomization: RandomizationSpec,
    pub init_joint_noise: f64,
    pub init_yaw_noise: f64,
    /// Success requires passing this x; `None` uses the end of the step
    /// regions on step terrain and no requirement elsewhere.
    pub finish_x: Option<f64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            terrain: TerrainKind::Flat,
            terrain_factor: 0.0,
            commands: CommandSpec::fixed([0.5, 0.0, 0.0]),
            episodes: 5,
            episode_seconds: 20.0,
            seed: 0,
            randomization: RandomizationSpec::none(),
            init_joint_noise: 0.0,
            init_yaw_noise: 0.0,
            finish_x: None,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || !(self.episode_seconds > 0.0) || !(self.terrain_factor >= 0.0) {
            return Err(Error::Config("evaluation needs episodes, a positive length and factor >= 0".into()));
        }
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

    /// Terrain and environment seeds of episode `i`; shared by every
    /// controller evaluated under this spec.
    pub fn episode_seeds(&self, i: usize) -> (u64, u64) {
        let base = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        (base ^ 0x7e77a1, base.rotate_left(17) ^ 0xe5)
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub report: EvalReport,
    pub outcome: Outcome,
    pub rows: Vec<TrajectoryRow>,
}

pub fn evaluate(
    name: &str,
    controller: &mut dyn Controller,
    model: &RobotModel,
    terrain_config: &TerrainConfig,
    spec: &EvalSpec,
) -> Result<Vec<EpisodeResult>> {
    spec.validate()?;
    let config = spec.env_config();
    let gravity = config.sim.gravity;
    let period = config.gait.period();
    let mut out = Vec::with_capacity(spec.episodes);
    for i in 0..spec.episodes {
        let (terrain_seed, env_seed) = spec.episode_seeds(i);
        let terrain = Arc::new(terrain_config.generate(spec.terrain, spec.terrain_factor, terrain_seed)?);
        let finish_x = spec.finish_x.or_else(|| {
            (spec.terrain == TerrainKind::Step).then(|| terrain_config.step_regions()[2][1])
        });
        let mut env = Env::new(model.clone(), config.clone(), Arc::clone(&terrain), env_seed)?;
        let mut rows = Vec::with_capacity(config.episode_ticks() as usize + 1);
        let summary = run_episode(&mut env, controller, Some(&mut rows));
        let report = EvalReport::from_log(
            name,
            env_seed,
            &rows,
            model,
            gravity,
            env.terrain(),
            finish_x,
            period,
            spec.episode_seconds,
            &SolveTimeStats {
                mean_us: f64::NAN,
                p99_us: f64::NAN,
            },
        );
        out.push(EpisodeResult {
            report,
            outcome: summary.outcome,
            rows,
        });
    }
    Ok(out)
}

/// Mean of a per-episode statistic, ignoring `NaN`s; `NaN` if none remain.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_seeds_differ_and_repeat() {
        let s = EvalSpec::default();
        assert_eq!(s.episode_seeds(3), s.episode_seeds(3));
        assert_ne!(s.episode_seeds(3), s.episode_seeds(4));
        let other = EvalSpec { seed: 1, ..EvalSpec::default() };
        assert_ne!(s.episode_seeds(0), other.episode_seeds(0));
    }

    #[test]
    fn finite_mean_skips_nan() {
        assert_eq!(finite_mean([1.0, f64::NAN, 3.0]), 2.0);
        assert!(finite_mean([f64::NAN]).is_nan());
    }
}
