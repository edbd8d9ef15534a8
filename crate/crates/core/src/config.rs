//! Run configuration: a flat `key = value` file with dotted sections.
//!
//! ```text
//! # comments run to end of line
//! es.sigma = 0.05
//! env.topology = nsfnet, geant2
//! ```
//!
//! Unknown keys are rejected. Command-line overrides are applied on top of
//! the file in the order given.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::env::{EnvConfig, DEFAULT_BANDWIDTHS, DEFAULT_MAX_STEPS};
use crate::es::{EsConfig, Shaping};
use crate::policy::PolicyConfig;
use crate::runtime::partition_mutations;
use crate::topology::resolve_topology;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}` set twice (line {line})")]
    Duplicate { key: String, line: usize },
    #[error("`{key}`: cannot parse {value:?} as {expected}")]
    Type { key: String, value: String, expected: &'static str },
    #[error("`{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    InProc,
    Proc,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inproc" => Ok(Self::InProc),
            "proc" => Ok(Self::Proc),
            _ => Err(format!("unknown mode {s:?} (expected inproc or proc)")),
        }
    }
}

impl Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::InProc => "inproc",
            Self::Proc => "proc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSection {
    /// Bundled names (`nsfnet`, `geant2`, `triangle`) or topology file paths.
    /// Several entries train one policy on all of them, round-robin.
    pub topologies: Vec<String>,
    pub k_paths: usize,
    pub demand_bandwidths: Vec<f64>,
    pub demand_seed: u64,
    pub max_episode_steps: Option<u64>,
    /// Replaces every link capacity when set.
    pub link_capacity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub mode: Mode,
    pub workers: usize,
    pub out: PathBuf,
    /// Iterations between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub iter_timeout_secs: f64,
    /// Listen address of the coordinator in multi-process mode.
    pub endpoint: String,
    /// In multi-process mode, launch local worker processes. When false the
    /// coordinator waits for externally started `worker` processes.
    pub spawn_workers: bool,
    pub eval_episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub workers: Vec<usize>,
    pub iterations: u64,
    /// Replaces rollouts with a fixed sleep per fitness evaluation.
    pub synthetic_eval_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvSection,
    pub policy: PolicyConfig,
    pub init_seed: u64,
    pub es: EsConfig,
    pub run: RunSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvSection {
                topologies: vec!["nsfnet".into()],
                k_paths: 4,
                demand_bandwidths: DEFAULT_BANDWIDTHS.to_vec(),
                demand_seed: 0,
                max_episode_steps: Some(DEFAULT_MAX_STEPS),
                link_capacity: None,
            },
            policy: PolicyConfig::default(),
            init_seed: 0,
            es: EsConfig::default(),
            run: RunSection {
                mode: Mode::InProc,
                workers: 1,
                out: PathBuf::from("runs/latest"),
                checkpoint_interval: 50,
                iter_timeout_secs: 300.0,
                endpoint: "127.0.0.1:0".into(),
                spawn_workers: true,
                eval_episodes: 100,
            },
            bench: BenchSection { workers: vec![1, 2, 4, 8], iterations: 10, synthetic_eval_ms: None },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Type { key: key.into(), value: value.into(), expected })
}

fn parse_opt<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<Option<T>, ConfigError> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value, expected).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<Vec<T>, ConfigError> {
    value.split(',').map(|v| parse(key, v.trim(), expected)).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), T::to_string)
}

impl RunConfig {
    /// Reads `path` (or starts from defaults when `None`) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| ConfigError::Io { path: p.display().to_string(), message: e.to_string() })?;
                Self::from_text(&text)?
            }
            None => Self::default(),
        };
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { key: key.into(), line: i + 1 });
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        const INT: &str = "a non-negative integer";
        const FLOAT: &str = "a number";
        const BOOL: &str = "true or false";
        match key {
            "env.topology" => {
                self.env.topologies = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "env.k_paths" => self.env.k_paths = parse(key, v, INT)?,
            "env.demand_bandwidths" => self.env.demand_bandwidths = parse_list(key, v, "a comma-separated list of numbers")?,
            "env.demand_seed" => self.env.demand_seed = parse(key, v, INT)?,
            "env.max_episode_steps" => self.env.max_episode_steps = parse_opt(key, v, "an integer or none")?,
            "env.link_capacity" => self.env.link_capacity = parse_opt(key, v, "a number or none")?,
            "policy.hidden_dim" => self.policy.hidden_dim = parse(key, v, INT)?,
            "policy.message_passing_steps" => self.policy.message_passing_steps = parse(key, v, INT)?,
            "policy.action_noise_epsilon" => self.policy.action_noise_epsilon = parse(key, v, FLOAT)?,
            "policy.deterministic_eval" => self.policy.deterministic_eval = parse(key, v, BOOL)?,
            "policy.mask_infeasible" => self.policy.mask_infeasible = parse(key, v, BOOL)?,
            "policy.init_seed" => self.init_seed = parse(key, v, INT)?,
            "es.alpha" => self.es.alpha = parse(key, v, FLOAT)?,
            "es.sigma" => self.es.sigma = parse(key, v, FLOAT)?,
            "es.num_mutations" => self.es.num_mutations = parse(key, v, INT)?,
            "es.mirrored" => self.es.mirrored = parse(key, v, BOOL)?,
            "es.episodes_per_eval" => self.es.episodes_per_eval = parse(key, v, INT)?,
            "es.iterations" => self.es.iterations = parse(key, v, INT)?,
            "es.global_seed" => self.es.global_seed = parse(key, v, INT)?,
            "es.failure_fitness" => self.es.failure_fitness = parse_opt(key, v, "a number or none")?,
            "es.shaping" => {
                self.es.shaping = match v {
                    "rank" => Shaping::Rank,
                    "identity" => Shaping::Identity,
                    _ => return Err(ConfigError::Type { key: key.into(), value: v.into(), expected: "rank or identity" }),
                }
            }
            "run.mode" => self.run.mode = parse(key, v, "inproc or proc")?,
            "run.workers" => self.run.workers = parse(key, v, INT)?,
            "run.out" => self.run.out = PathBuf::from(v),
            "run.checkpoint_interval" => self.run.checkpoint_interval = parse(key, v, INT)?,
            "run.iter_timeout_secs" => self.run.iter_timeout_secs = parse(key, v, FLOAT)?,
            "run.endpoint" => self.run.endpoint = v.to_string(),
            "run.spawn_workers" => self.run.spawn_workers = parse(key, v, BOOL)?,
            "run.eval_episodes" => self.run.eval_episodes = parse(key, v, INT)?,
            "bench.workers" => self.bench.workers = parse_list(key, v, "a comma-separated list of integers")?,
            "bench.iterations" => self.bench.iterations = parse(key, v, INT)?,
            "bench.synthetic_eval_ms" => self.bench.synthetic_eval_ms = parse_opt(key, v, "a number or none")?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Every key with its effective value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let shaping = match self.es.shaping {
            Shaping::Rank => "rank",
            Shaping::Identity => "identity",
        };
        vec![
            ("env.topology", self.env.topologies.join(",")),
            ("env.k_paths", self.env.k_paths.to_string()),
            ("env.demand_bandwidths", join(&self.env.demand_bandwidths)),
            ("env.demand_seed", self.env.demand_seed.to_string()),
            ("env.max_episode_steps", opt(&self.env.max_episode_steps)),
            ("env.link_capacity", opt(&self.env.link_capacity)),
            ("policy.hidden_dim", self.policy.hidden_dim.to_string()),
            ("policy.message_passing_steps", self.policy.message_passing_steps.to_string()),
            ("policy.action_noise_epsilon", self.policy.action_noise_epsilon.to_string()),
            ("policy.deterministic_eval", self.policy.deterministic_eval.to_string()),
            ("policy.mask_infeasible", self.policy.mask_infeasible.to_string()),
            ("policy.init_seed", self.init_seed.to_string()),
            ("es.alpha", self.es.alpha.to_string()),
            ("es.sigma", self.es.sigma.to_string()),
            ("es.num_mutations", self.es.num_mutations.to_string()),
            ("es.mirrored", self.es.mirrored.to_string()),
            ("es.episodes_per_eval", self.es.episodes_per_eval.to_string()),
            ("es.iterations", self.es.iterations.to_string()),
            ("es.global_seed", self.es.global_seed.to_string()),
            ("es.failure_fitness", opt(&self.es.failure_fitness)),
            ("es.shaping", shaping.to_string()),
            ("run.mode", self.run.mode.to_string()),
            ("run.workers", self.run.workers.to_string()),
            ("run.out", self.run.out.display().to_string()),
            ("run.checkpoint_interval", self.run.checkpoint_interval.to_string()),
            ("run.iter_timeout_secs", self.run.iter_timeout_secs.to_string()),
            ("run.endpoint", self.run.endpoint.clone()),
            ("run.spawn_workers", self.run.spawn_workers.to_string()),
            ("run.eval_episodes", self.run.eval_episodes.to_string()),
            ("bench.workers", join(&self.bench.workers)),
            ("bench.iterations", self.bench.iterations.to_string()),
            ("bench.synthetic_eval_ms", opt(&self.bench.synthetic_eval_ms)),
        ]
    }

    /// The effective configuration in the file format; parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.run.iter_timeout_secs)
    }

    /// Builds one environment per listed topology.
    pub fn env_configs(&self) -> Result<Vec<EnvConfig>, ConfigError> {
        let invalid = |key, e: &dyn Display| ConfigError::Invalid { key, message: e.to_string() };
        if self.env.topologies.is_empty() {
            return Err(ConfigError::Invalid { key: "env.topology", message: "no topology given".into() });
        }
        if self.env.k_paths == 0 {
            return Err(ConfigError::Invalid { key: "env.k_paths", message: "must be positive".into() });
        }
        self.env
            .topologies
            .iter()
            .map(|name| {
                let mut topo = resolve_topology(name).map_err(|e| invalid("env.topology", &e))?;
                if let Some(c) = self.env.link_capacity {
                    topo = topo.with_uniform_capacity(c).map_err(|e| invalid("env.link_capacity", &e))?;
                }
                EnvConfig::new(
                    topo,
                    self.env.k_paths,
                    self.env.demand_bandwidths.clone(),
                    self.env.demand_seed,
                    self.env.max_episode_steps,
                )
                .map_err(|e| invalid("env.demand_bandwidths", &e))
            })
            .collect()
    }

    /// Checks everything that does not need the environment built.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, e: &dyn Display| ConfigError::Invalid { key, message: e.to_string() };
        self.policy.validate().map_err(|e| invalid("policy", &e))?;
        self.es.validate().map_err(|e| invalid("es", &e))?;
        if self.run.workers == 0 {
            return Err(ConfigError::Invalid { key: "run.workers", message: "must be at least 1".into() });
        }
        partition_mutations(self.es.num_mutations, self.run.workers, self.es.mirrored)
            .map_err(|e| invalid("run.workers", &e))?;
        if !(self.run.iter_timeout_secs > 0.0 && self.run.iter_timeout_secs.is_finite()) {
            return Err(ConfigError::Invalid { key: "run.iter_timeout_secs", message: "must be positive".into() });
        }
        if self.run.eval_episodes == 0 {
            return Err(ConfigError::Invalid { key: "run.eval_episodes", message: "must be positive".into() });
        }
        if let Some(ms) = self.bench.synthetic_eval_ms {
            if !(ms >= 0.0 && ms.is_finite()) {
                return Err(ConfigError::Invalid { key: "bench.synthetic_eval_ms", message: "must be non-negative".into() });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_text("# nothing\n\n   \n").unwrap(), RunConfig::default());
    }

    #[test]
    fn override_beats_file() {
        let mut cfg = RunConfig::from_text("es.sigma = 0.05\n").unwrap();
        cfg.set("es.sigma", "0.1").unwrap();
        assert_eq!(cfg.es.sigma, 0.1);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("es.sgima = 0.1").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("es.sgima".into()));
        assert!(err.to_string().contains("sgima"));
    }

    #[test]
    fn type_mismatch_and_syntax() {
        assert!(matches!(RunConfig::from_text("es.num_mutations = many"), Err(ConfigError::Type { .. })));
        assert!(matches!(RunConfig::from_text("es.mirrored = yes"), Err(ConfigError::Type { .. })));
        assert!(matches!(RunConfig::from_text("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            RunConfig::from_text("es.sigma = 1\nes.sigma = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn comments_lists_and_options() {
        let cfg = RunConfig::from_text(
            "env.topology = nsfnet, geant2 # mixed\nenv.max_episode_steps = none\nes.failure_fitness = -5\n",
        )
        .unwrap();
        assert_eq!(cfg.env.topologies, vec!["nsfnet", "geant2"]);
        assert_eq!(cfg.env.max_episode_steps, None);
        assert_eq!(cfg.es.failure_fitness, Some(-5.0));
        assert_eq!(cfg.env_configs().unwrap().len(), 2);
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("es.sigma", "0.1234567890123").unwrap();
        cfg.set("bench.synthetic_eval_ms", "2.5").unwrap();
        cfg.set("es.shaping", "identity").unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        for (key, value) in cfg.entries() {
            RunConfig::default().set(key, &value).unwrap();
        }
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = RunConfig::default();
        cfg.run.workers = 40;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { key: "run.workers", .. })));
        let mut cfg = RunConfig::default();
        cfg.es.sigma = -1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("sigma"));
        let mut cfg = RunConfig::default();
        cfg.env.topologies = vec!["atlantis".into()];
        assert!(matches!(cfg.env_configs(), Err(ConfigError::Invalid { key: "env.topology", .. })));
        assert!(RunConfig::default().validate().is_ok());
    }
}
