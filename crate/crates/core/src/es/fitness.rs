use thiserror::Error;

use crate::env::{run_episode, EnvConfig, EpisodeSummary};
use crate::policy::{NetPolicy, PolicyNet};
use crate::rng::{derive_seed, domain, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct FitnessError(pub String);

/// A black-box objective to maximize.
pub trait Fitness: Sync {
    fn evaluate(&self, params: &[f64], iteration: u64) -> Result<f64, FitnessError>;
}

/// Episode seeds are shared by all mutations of an iteration and rotate with it.
pub fn episode_seed(global_seed: u64, t: u64, episode: usize) -> u64 {
    derive_seed(&[domain::EPISODE, global_seed, t, episode as u64])
}

fn action_rng(episode_seed: u64) -> StreamRng {
    StreamRng::new(derive_seed(&[domain::ACTION, episode_seed]))
}

/// Mean return of the routing policy over `episodes` episodes. With several
/// environments, episodes are dealt round-robin across them.
pub struct RoutingFitness {
    pub net: PolicyNet,
    pub envs: Vec<EnvConfig>,
    pub episodes: usize,
    pub global_seed: u64,
}

impl RoutingFitness {
    /// Runs one episode with the training-time noisy policy.
    pub fn episode(&self, params: &[f64], t: u64, e: usize) -> Result<EpisodeSummary, FitnessError> {
        let env = &self.envs[e % self.envs.len()];
        let seed = episode_seed(self.global_seed, t, e);
        let mut policy = NetPolicy::new(&self.net, params, false, action_rng(seed));
        run_episode(&mut policy, env, seed, None).map_err(|err| FitnessError(err.to_string()))
    }
}

impl Fitness for RoutingFitness {
    fn evaluate(&self, params: &[f64], t: u64) -> Result<f64, FitnessError> {
        let mut total = 0.0;
        for e in 0..self.episodes {
            total += self.episode(params, t, e)?.total_reward;
        }
        Ok(total / self.episodes as f64)
    }
}

/// Rollouts of a fixed parameter vector over explicit seeds, one environment
/// per seed chosen round-robin.
pub fn rollout_summaries(
    net: &PolicyNet,
    params: &[f64],
    envs: &[EnvConfig],
    seeds: &[u64],
    deterministic: bool,
) -> Result<Vec<EpisodeSummary>, FitnessError> {
    seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let env = &envs[i % envs.len()];
            let mut policy = NetPolicy::new(net, params, deterministic, action_rng(seed));
            run_episode(&mut policy, env, seed, None).map_err(|e| FitnessError(e.to_string()))
        })
        .collect()
}
