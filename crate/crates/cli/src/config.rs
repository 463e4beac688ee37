//! Layered run configuration: built-in defaults, then the preset, then the
//! TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use quadlab::eval::EvalSpec;
use quadlab::imitation::DaggerConfig;
use quadlab::mpc::ExpertConfig;
use quadlab::env::EnvConfig;
use quadlab::rl::PpoConfig;
use quadlab::sim::RobotModel;
use quadlab::terrain::{TerrainConfig, TerrainKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    IfmSr,
    IfmCr,
    VanillaSr,
    VanillaCr,
    DaggerOnly,
    Expert,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::IfmSr => "ifm-sr",
            Preset::IfmCr => "ifm-cr",
            Preset::VanillaSr => "vanilla-sr",
            Preset::VanillaCr => "vanilla-cr",
            Preset::DaggerOnly => "dagger-only",
            Preset::Expert => "expert",
        }
    }

    /// Vanilla baselines always start from a random actor.
    pub fn from_scratch(self) -> bool {
        matches!(self, Preset::VanillaSr | Preset::VanillaCr)
    }

    pub fn ppo(self) -> PpoConfig {
        match self {
            Preset::IfmCr => PpoConfig::ifm_cr(),
            Preset::VanillaSr => PpoConfig::vanilla_sr(),
            Preset::VanillaCr => PpoConfig::vanilla_cr(),
            _ => PpoConfig::ifm_sr(),
        }
    }
}

/// Terrain names accepted by `--terrain`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TerrainArg {
    Flat,
    Rough,
    Discrete,
    Step,
    Cliff,
    Slippery,
    Conveyor,
}

impl From<TerrainArg> for TerrainKind {
    fn from(t: TerrainArg) -> Self {
        match t {
            TerrainArg::Flat => TerrainKind::Flat,
            TerrainArg::Rough => TerrainKind::Rough,
            TerrainArg::Discrete => TerrainKind::DiscreteRough,
            TerrainArg::Step => TerrainKind::Step,
            TerrainArg::Cliff => TerrainKind::Cliff,
            TerrainArg::Slippery => TerrainKind::Slippery,
            TerrainArg::Conveyor => TerrainKind::Conveyor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub calls: usize,
    /// Seconds of expert walking whose states feed the timed solves.
    pub warmup_seconds: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            calls: 1000,
            warmup_seconds: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    /// Policy checkpoint consumed by `finetune`, `evaluate` and `bench`.
    pub checkpoint: Option<PathBuf>,
    /// Run directories read by `export-plots`.
    pub runs: Vec<PathBuf>,
}

/// Fully resolved configuration; serialized whole into every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub seed: u64,
    pub preset: Preset,
    pub from_scratch: bool,
    pub model: RobotModel,
    pub terrain: TerrainConfig,
    pub expert: ExpertConfig,
    /// Environment for `expert-rollout`.
    pub rollout: EnvConfig,
    pub rollout_terrain: TerrainKind,
    pub rollout_terrain_factor: f64,
    pub dagger: DaggerConfig,
    pub ppo: PpoConfig,
    pub eval: EvalSpec,
    pub bench: BenchConfig,
    pub inputs: Inputs,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self::for_preset(Preset::IfmSr)
    }
}

impl LabConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            seed: 0,
            preset,
            from_scratch: preset.from_scratch(),
            model: RobotModel::default(),
            terrain: TerrainConfig::default(),
            expert: ExpertConfig::default(),
            rollout: EnvConfig::default(),
            rollout_terrain: TerrainKind::Flat,
            rollout_terrain_factor: 0.0,
            dagger: DaggerConfig::default(),
            ppo: preset.ppo(),
            eval: EvalSpec::default(),
            bench: BenchConfig::default(),
            inputs: Inputs::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |r: quadlab::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        check(self.model.validate())?;
        check(self.terrain.validate())?;
        check(self.expert.validate())?;
        check(self.rollout.validate())?;
        check(self.dagger.validate())?;
        check(self.ppo.validate())?;
        check(self.eval.validate())?;
        if self.bench.calls == 0 {
            return Err(CliError::Config("bench.calls must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))
    }
}

/// Command-line overrides applied after the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub terrain: Option<TerrainKind>,
    pub terrain_factor: Option<f64>,
    pub iters: Option<usize>,
    pub from_scratch: bool,
    pub checkpoint: Option<PathBuf>,
    pub runs: Vec<PathBuf>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Resolve the configuration. The preset (flag, else file, else `ifm-sr`)
/// picks the defaults the file then overrides key by key, so a file that
/// sets `ppo.clip` keeps the preset's `ppo.init_std`.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<LabConfig, CliError> {
    let file: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map(toml::Value::Table)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    // A manifest of an earlier run carries its resolved config.
    let file = match (file.get("manifest_version"), file.get("config")) {
        (Some(_), Some(c)) => c.clone(),
        _ => file,
    };
    let preset = match overrides.preset {
        Some(p) => p,
        None => match file.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| CliError::Config(format!("preset: {e}")))?,
            None => Preset::IfmSr,
        },
    };
    let defaults = LabConfig::for_preset(preset);
    let mut value = toml::Value::try_from(&defaults).map_err(|e| CliError::Runtime(e.to_string()))?;
    merge(&mut value, file);
    let mut cfg: LabConfig = LabConfig::deserialize(value).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.preset = preset;

    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(kind) = overrides.terrain {
        cfg.eval.terrain = kind;
        cfg.rollout_terrain = kind;
    }
    if let Some(f) = overrides.terrain_factor {
        cfg.eval.terrain_factor = f;
        cfg.rollout_terrain_factor = f;
    }
    if let Some(n) = overrides.iters {
        cfg.dagger.max_iterations = n;
        cfg.ppo.iterations = n;
    }
    if overrides.from_scratch {
        cfg.from_scratch = true;
    }
    if let Some(c) = &overrides.checkpoint {
        cfg.inputs.checkpoint = Some(c.clone());
    }
    if !overrides.runs.is_empty() {
        cfg.inputs.runs = overrides.runs.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = LabConfig::for_preset(Preset::VanillaCr);
        let text = cfg.to_toml().unwrap();
        let f = write(&text);
        let back = resolve(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_overrides_single_key_of_preset() {
        let f = write("preset = \"vanilla-sr\"\n[ppo]\nclip = 0.3\n");
        let cfg = resolve(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(cfg.ppo.clip, 0.3);
        assert_eq!(cfg.ppo.init_std, 3.0);
        assert!(cfg.from_scratch);
    }

    #[test]
    fn flags_win() {
        let f = write("seed = 4\n[ppo]\niterations = 7\n");
        let o = Overrides {
            seed: Some(9),
            preset: Some(Preset::IfmCr),
            iters: Some(3),
            terrain: Some(TerrainKind::Step),
            ..Overrides::default()
        };
        let cfg = resolve(Some(f.path()), &o).unwrap();
        assert_eq!((cfg.seed, cfg.ppo.iterations, cfg.dagger.max_iterations), (9, 3, 3));
        assert_eq!(cfg.ppo.clip, 0.1);
        assert_eq!(cfg.eval.terrain, TerrainKind::Step);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let f = write("[ppo]\nclip = -1.0\n");
        assert!(matches!(resolve(Some(f.path()), &Overrides::default()), Err(CliError::Config(_))));
        let f = write("[ppo\n");
        assert!(matches!(resolve(Some(f.path()), &Overrides::default()), Err(CliError::Config(_))));
        let f = write("[ppo]\nclip = \"wide\"\n");
        assert!(matches!(resolve(Some(f.path()), &Overrides::default()), Err(CliError::Config(_))));
    }
}
