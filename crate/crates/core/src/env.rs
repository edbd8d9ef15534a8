//! Sequential traffic-demand allocation environment.
//!
//! Each step presents one demand `{src, dst, bandwidth}`. The agent picks one
//! of the candidate paths for that pair; if every link on it has enough
//! residual capacity the bandwidth is committed for the rest of the episode.
//! The episode ends when the next demand fits on no candidate path, when the
//! agent picks a path that cannot carry the demand, or at the step bound.

use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::paths::{compute_candidate_paths, CandidatePathTable, Path};
use crate::rng::{derive_seed, domain, value_at, below};
use crate::topology::{LinkId, NodeId, Topology};

pub const DEFAULT_BANDWIDTHS: [f64; 3] = [8.0, 32.0, 64.0];
pub const DEFAULT_CAPACITY: f64 = 200.0;
pub const DEFAULT_MAX_STEPS: u64 = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("action {action} out of range: pair ({src},{dst}) has {available} candidate paths")]
    ActionOutOfRange { action: usize, src: NodeId, dst: NodeId, available: usize },
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("policy failed: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Demand {
    pub src: NodeId,
    pub dst: NodeId,
    pub bandwidth: f64,
}

/// Position in the demand stream of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DemandStream {
    key: u64,
    index: u64,
}

impl DemandStream {
    pub fn new(demand_rng_seed: u64, episode_seed: u64) -> Self {
        Self { key: derive_seed(&[domain::DEMAND, demand_rng_seed, episode_seed]), index: 0 }
    }

    pub fn draws(&self) -> u64 {
        self.index
    }
}

/// Draws the next demand: ordered pair uniform over `src != dst`, bandwidth
/// uniform over `bandwidths`. Draw `i` reads counters `3i..3i+3`.
pub fn sample_demand(stream: &mut DemandStream, node_count: usize, bandwidths: &[f64]) -> Demand {
    let base = 3 * stream.index;
    stream.index += 1;
    let n = node_count as u64;
    let src = below(value_at(stream.key, base), n);
    let mut dst = below(value_at(stream.key, base + 1), n - 1);
    if dst >= src {
        dst += 1;
    }
    let bw = below(value_at(stream.key, base + 2), bandwidths.len() as u64);
    Demand { src: src as NodeId, dst: dst as NodeId, bandwidth: bandwidths[bw as usize] }
}

#[derive(Debug, Clone)]
pub struct EnvConfig {
    topology: Arc<Topology>,
    paths: Arc<CandidatePathTable>,
    link_adjacency: Arc<Vec<Vec<LinkId>>>,
    demand_bandwidths: Vec<f64>,
    max_bandwidth: f64,
    max_capacity: f64,
    pub demand_rng_seed: u64,
    pub max_episode_steps: Option<u64>,
}

impl EnvConfig {
    pub fn new(
        topology: Topology,
        k_paths: usize,
        demand_bandwidths: Vec<f64>,
        demand_rng_seed: u64,
        max_episode_steps: Option<u64>,
    ) -> Result<Self, EnvError> {
        let paths = compute_candidate_paths(&topology, k_paths);
        Self::with_paths(topology, paths, demand_bandwidths, demand_rng_seed, max_episode_steps)
    }

    pub fn with_paths(
        topology: Topology,
        paths: CandidatePathTable,
        demand_bandwidths: Vec<f64>,
        demand_rng_seed: u64,
        max_episode_steps: Option<u64>,
    ) -> Result<Self, EnvError> {
        if demand_bandwidths.is_empty() {
            return Err(EnvError::Config("demand_bandwidths must be nonempty".into()));
        }
        let min_cap = topology.min_capacity();
        if let Some(bad) =
            demand_bandwidths.iter().find(|&&b| !(b > 0.0 && b.is_finite() && b <= min_cap))
        {
            return Err(EnvError::Config(format!(
                "demand bandwidth {bad} must be positive and at most the minimum link capacity {min_cap}"
            )));
        }
        if max_episode_steps == Some(0) {
            return Err(EnvError::Config("max_episode_steps must be positive".into()));
        }
        if paths.node_count() != topology.node_count() {
            return Err(EnvError::Config("path table does not match topology".into()));
        }
        let max_bandwidth = demand_bandwidths.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            link_adjacency: Arc::new(topology.link_adjacency()),
            max_capacity: topology.max_capacity(),
            topology: Arc::new(topology),
            paths: Arc::new(paths),
            demand_bandwidths,
            max_bandwidth,
            demand_rng_seed,
            max_episode_steps,
        })
    }

    /// Bundled defaults: capacity 200, bandwidths {8, 32, 64}, k = 4.
    pub fn default_for(topology: Topology) -> Result<Self, EnvError> {
        Self::new(topology, 4, DEFAULT_BANDWIDTHS.to_vec(), 0, Some(DEFAULT_MAX_STEPS))
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn paths(&self) -> &CandidatePathTable {
        &self.paths
    }

    pub fn link_adjacency(&self) -> &[Vec<LinkId>] {
        &self.link_adjacency
    }

    pub fn demand_bandwidths(&self) -> &[f64] {
        &self.demand_bandwidths
    }

    pub fn max_bandwidth(&self) -> f64 {
        self.max_bandwidth
    }

    pub fn max_capacity(&self) -> f64 {
        self.max_capacity
    }

    pub fn candidates(&self, demand: &Demand) -> &[Path] {
        self.paths.paths(demand.src, demand.dst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub residual: Vec<f64>,
    pub pending: Demand,
    pub allocated_total: f64,
    pub step_count: u64,
    pub done: bool,
    demands: DemandStream,
}

impl EnvState {
    pub fn demand_stream(&self) -> DemandStream {
        self.demands
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    /// Whether the chosen path carried the demand.
    pub allocated: bool,
}

pub fn reset(config: &EnvConfig, episode_seed: u64) -> EnvState {
    let mut demands = DemandStream::new(config.demand_rng_seed, episode_seed);
    let pending = sample_demand(&mut demands, config.topology.node_count(), &config.demand_bandwidths);
    EnvState {
        residual: config.topology.capacities(),
        pending,
        allocated_total: 0.0,
        step_count: 0,
        done: false,
        demands,
    }
}

fn path_fits(residual: &[f64], path: &Path, bandwidth: f64) -> bool {
    path.links.iter().all(|&l| residual[l] >= bandwidth)
}

/// `mask[i]` is true iff candidate `i` of the pending pair can carry the demand.
pub fn feasible_actions(state: &EnvState, config: &EnvConfig) -> Vec<bool> {
    config
        .candidates(&state.pending)
        .iter()
        .map(|p| path_fits(&state.residual, p, state.pending.bandwidth))
        .collect()
}

pub fn step(config: &EnvConfig, state: &mut EnvState, action: usize) -> Result<StepOutcome, EnvError> {
    if state.done {
        return Err(EnvError::EpisodeDone);
    }
    let demand = state.pending;
    let candidates = config.candidates(&demand);
    let path = candidates.get(action).ok_or(EnvError::ActionOutOfRange {
        action,
        src: demand.src,
        dst: demand.dst,
        available: candidates.len(),
    })?;
    state.step_count += 1;

    if !path_fits(&state.residual, path, demand.bandwidth) {
        state.done = true;
        return Ok(StepOutcome { reward: 0.0, done: true, allocated: false });
    }
    for &l in &path.links {
        state.residual[l] -= demand.bandwidth;
    }
    state.allocated_total += demand.bandwidth;
    state.pending =
        sample_demand(&mut state.demands, config.topology.node_count(), &config.demand_bandwidths);

    let step_limit = config.max_episode_steps.is_some_and(|m| state.step_count >= m);
    let blocked = !feasible_actions(state, config).iter().any(|&f| f);
    state.done = step_limit || blocked;
    Ok(StepOutcome { reward: demand.bandwidth / config.max_bandwidth, done: state.done, allocated: true })
}

/// Anything that maps an observation to a candidate-path index.
pub trait Policy {
    fn act(&mut self, config: &EnvConfig, state: &EnvState) -> Result<usize, EnvError>;
}

impl<F> Policy for F
where
    F: FnMut(&EnvConfig, &EnvState) -> Result<usize, EnvError>,
{
    fn act(&mut self, config: &EnvConfig, state: &EnvState) -> Result<usize, EnvError> {
        self(config, state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub demand: Demand,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub total_reward: f64,
    pub allocated: f64,
    pub steps: u64,
}

/// Runs one episode to termination, optionally recording every step.
pub fn run_episode<P: Policy + ?Sized>(
    policy: &mut P,
    config: &EnvConfig,
    episode_seed: u64,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<EpisodeSummary, EnvError> {
    let mut state = reset(config, episode_seed);
    let mut total = 0.0;
    while !state.done {
        let demand = state.pending;
        let action = policy.act(config, &state)?;
        let out = step(config, &mut state, action)?;
        total += out.reward;
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow { step: state.step_count, demand, action, reward: out.reward, done: out.done });
        }
    }
    Ok(EpisodeSummary { total_reward: total, allocated: state.allocated_total, steps: state.step_count })
}

/// Undiscounted sum of rewards of one episode.
pub fn episode_return<P: Policy + ?Sized>(
    policy: &mut P,
    config: &EnvConfig,
    episode_seed: u64,
) -> Result<f64, EnvError> {
    run_episode(policy, config, episode_seed, None).map(|s| s.total_reward)
}

pub fn write_trace_csv<W: Write>(mut w: W, rows: &[TraceRow]) -> io::Result<()> {
    writeln!(w, "step,src,dst,bandwidth,action,reward,done")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step, r.demand.src, r.demand.dst, r.demand.bandwidth, r.action, r.reward, r.done
        )?;
    }
    Ok(())
}
