//! Evolution strategies: seed-derived Gaussian perturbations with mirrored
//! sampling, rank-based fitness shaping and the plain gradient-ascent update
//!
//! ```text
//! delta = alpha / (k * sigma) * sum_j u_j * eps_j
//! ```
//!
//! A perturbation is never stored or sent anywhere. It is identified by its
//! `(seed, sign)` pair and regenerated on demand, one at a time.

mod fitness;
mod stats;

use std::time::Instant;

use thiserror::Error;

use crate::rng::{derive_seed, domain, fill_normal};

pub use fitness::{episode_seed, rollout_summaries, Fitness, FitnessError, RoutingFitness};
pub use stats::{IterationStats, StatsWriter, STATS_HEADER};

#[derive(Debug, Error, PartialEq)]
pub enum EsError {
    #[error("vector length {got} does not match parameter dimension {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("iteration {iteration}: missing record for mutation {index}")]
    MissingRecord { iteration: u64, index: usize },
    #[error("iteration {iteration}: duplicate record for mutation {index}")]
    DuplicateRecord { iteration: u64, index: usize },
    #[error("iteration {iteration}: record {index} out of range for {k} mutations")]
    RecordOutOfRange { iteration: u64, index: usize, k: usize },
    #[error("iteration {iteration}: record {index} has seed/sign inconsistent with derivation")]
    InconsistentRecord { iteration: u64, index: usize },
    #[error("record from iteration {got} supplied to iteration {expected}")]
    WrongIteration { expected: u64, got: u64 },
    #[error("invalid ES config: {0}")]
    Config(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shaping {
    /// Centered rank utilities.
    Rank,
    /// Raw returns minus their mean. Test mode for gradient checks.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsConfig {
    pub alpha: f64,
    pub sigma: f64,
    pub num_mutations: usize,
    pub mirrored: bool,
    pub episodes_per_eval: usize,
    pub iterations: u64,
    pub global_seed: u64,
    /// Fitness assigned to failed evaluations. `None` means one below the
    /// worst finite return of the iteration.
    pub failure_fitness: Option<f64>,
    pub shaping: Shaping,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            sigma: 0.05,
            num_mutations: 64,
            mirrored: true,
            episodes_per_eval: 3,
            iterations: 300,
            global_seed: 0,
            failure_fitness: None,
            shaping: Shaping::Rank,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<(), EsError> {
        let bad = |m: String| Err(EsError::Config(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.num_mutations == 0 {
            return bad("num_mutations must be positive".into());
        }
        if self.mirrored && self.num_mutations % 2 != 0 {
            return bad(format!("num_mutations must be even when mirrored, got {}", self.num_mutations));
        }
        if self.episodes_per_eval == 0 {
            return bad("episodes_per_eval must be positive".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if let Some(f) = self.failure_fitness {
            if !f.is_finite() {
                return bad("failure_fitness must be finite".into());
            }
        }
        Ok(())
    }

    /// Perturbation identity of mutation `j` at iteration `t`. Mirrored
    /// partners `2p` and `2p + 1` share the seed of pair `p`.
    pub fn mutation(&self, t: u64, j: usize) -> (u64, f64) {
        let (slot, sign) = if self.mirrored {
            (j / 2, if j % 2 == 0 { 1.0 } else { -1.0 })
        } else {
            (j, 1.0)
        };
        (derive_seed(&[domain::PERTURBATION, self.global_seed, t, slot as u64]), sign)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutationRecord {
    pub iteration: u64,
    pub index: usize,
    pub seed: u64,
    pub sign: f64,
    pub raw_return: f64,
}

impl MutationRecord {
    pub fn new(config: &EsConfig, iteration: u64, index: usize, raw_return: f64) -> Self {
        let (seed, sign) = config.mutation(iteration, index);
        Self { iteration, index, seed, sign, raw_return }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapedFitness {
    pub utilities: Vec<f64>,
}

/// `sign * g(seed)` where `g` yields `dim` i.i.d. standard normals.
pub fn derive_perturbation(dim: usize, seed: u64, sign: f64) -> Vec<f64> {
    let mut eps = vec![0.0; dim];
    fill_normal(seed, &mut eps);
    if sign < 0.0 {
        eps.iter_mut().for_each(|e| *e = -*e);
    }
    eps
}

/// `theta + sigma * eps`.
pub fn mutate(theta: &[f64], eps: &[f64], sigma: f64) -> Result<Vec<f64>, EsError> {
    if theta.len() != eps.len() {
        return Err(EsError::LengthMismatch { expected: theta.len(), got: eps.len() });
    }
    Ok(theta.iter().zip(eps).map(|(t, e)| t + sigma * e).collect())
}

/// Centered log-rank utilities. Rank 1 is the best return; ties go to the
/// lower mutation index.
pub fn shape_fitness(raw_returns: &[f64]) -> ShapedFitness {
    let k = raw_returns.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| raw_returns[b].total_cmp(&raw_returns[a]).then(a.cmp(&b)));
    let cutoff = (k as f64 / 2.0 + 1.0).ln();
    let mut raw_util = vec![0.0; k];
    for (pos, &j) in order.iter().enumerate() {
        raw_util[j] = (cutoff - ((pos + 1) as f64).ln()).max(0.0);
    }
    let total: f64 = raw_util.iter().sum();
    let inv_k = 1.0 / k as f64;
    ShapedFitness { utilities: raw_util.into_iter().map(|u| u / total - inv_k).collect() }
}

/// Raw returns minus their mean.
pub fn identity_shaping(raw_returns: &[f64]) -> ShapedFitness {
    let mean = raw_returns.iter().sum::<f64>() / raw_returns.len() as f64;
    ShapedFitness { utilities: raw_returns.iter().map(|r| r - mean).collect() }
}

/// Replaces non-finite returns with the failure fitness. Returns how many
/// were replaced.
pub fn resolve_failures(raw_returns: &mut [f64], failure_fitness: Option<f64>) -> usize {
    let failed = raw_returns.iter().filter(|r| !r.is_finite()).count();
    if failed == 0 {
        return 0;
    }
    let fill = failure_fitness.unwrap_or_else(|| {
        let worst = raw_returns.iter().filter(|r| r.is_finite()).cloned().fold(f64::INFINITY, f64::min);
        if worst.is_finite() {
            worst - 1.0
        } else {
            0.0
        }
    });
    raw_returns.iter_mut().filter(|r| !r.is_finite()).for_each(|r| *r = fill);
    failed
}

/// Checks that `records` are exactly mutations `0..k` of iteration `t` with
/// the derived seeds, and returns their raw returns in index order.
pub fn collate_records(records: &[MutationRecord], config: &EsConfig, t: u64) -> Result<Vec<f64>, EsError> {
    let k = config.num_mutations;
    let mut out: Vec<Option<f64>> = vec![None; k];
    for r in records {
        if r.iteration != t {
            return Err(EsError::WrongIteration { expected: t, got: r.iteration });
        }
        if r.index >= k {
            return Err(EsError::RecordOutOfRange { iteration: t, index: r.index, k });
        }
        if (r.seed, r.sign) != config.mutation(t, r.index) {
            return Err(EsError::InconsistentRecord { iteration: t, index: r.index });
        }
        if out[r.index].replace(r.raw_return).is_some() {
            return Err(EsError::DuplicateRecord { iteration: t, index: r.index });
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(index, v)| v.ok_or(EsError::MissingRecord { iteration: t, index }))
        .collect()
}

/// `alpha / (k * sigma) * sum_j u_j * eps_j`, regenerating each perturbation
/// in turn. Mirrored partners are folded into one signed coefficient so each
/// seed is expanded once.
pub fn compute_update(
    records: &[MutationRecord],
    utilities: &ShapedFitness,
    config: &EsConfig,
    dim: usize,
) -> Result<Vec<f64>, EsError> {
    accumulate_update(records, utilities, config, dim, fill_normal)
}

/// [`compute_update`] with a caller-supplied expansion from seed to the
/// unsigned perturbation.
pub fn accumulate_update(
    records: &[MutationRecord],
    utilities: &ShapedFitness,
    config: &EsConfig,
    dim: usize,
    mut expand: impl FnMut(u64, &mut [f64]),
) -> Result<Vec<f64>, EsError> {
    let k = records.len();
    if utilities.utilities.len() != k {
        return Err(EsError::LengthMismatch { expected: k, got: utilities.utilities.len() });
    }
    let mut delta = vec![0.0; dim];
    let mut eps = vec![0.0; dim];
    let mut j = 0;
    while j < k {
        let seed = records[j].seed;
        let mut coeff = 0.0;
        while j < k && records[j].seed == seed {
            coeff += utilities.utilities[j] * records[j].sign;
            j += 1;
        }
        if coeff == 0.0 {
            continue;
        }
        expand(seed, &mut eps);
        for (d, e) in delta.iter_mut().zip(&eps) {
            *d += coeff * e;
        }
    }
    let scale = config.alpha / (k as f64 * config.sigma);
    delta.iter_mut().for_each(|d| *d *= scale);
    Ok(delta)
}

/// Fitness evaluation of one mutation. Failures come back as `NaN` and are
/// resolved by [`resolve_failures`] once the whole iteration is in.
pub fn evaluate_mutation<F: Fitness + ?Sized>(
    fitness: &F,
    theta: &[f64],
    config: &EsConfig,
    t: u64,
    j: usize,
) -> f64 {
    let (seed, sign) = config.mutation(t, j);
    let eps = derive_perturbation(theta.len(), seed, sign);
    let candidate: Vec<f64> = theta.iter().zip(&eps).map(|(p, e)| p + config.sigma * e).collect();
    match fitness.evaluate(&candidate, t) {
        Ok(v) if v.is_finite() => v,
        _ => f64::NAN,
    }
}

/// The part of an iteration that follows evaluation: shaping and the update.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationUpdate {
    pub delta: Vec<f64>,
    pub raw_returns: Vec<f64>,
    pub failures: usize,
}

pub fn build_update(
    mut raw_returns: Vec<f64>,
    config: &EsConfig,
    t: u64,
    dim: usize,
) -> Result<IterationUpdate, EsError> {
    if raw_returns.len() != config.num_mutations {
        return Err(EsError::LengthMismatch { expected: config.num_mutations, got: raw_returns.len() });
    }
    let failures = resolve_failures(&mut raw_returns, config.failure_fitness);
    let records: Vec<MutationRecord> = raw_returns
        .iter()
        .enumerate()
        .map(|(j, &r)| MutationRecord::new(config, t, j, r))
        .collect();
    let delta = if failures == raw_returns.len() {
        vec![0.0; dim]
    } else {
        let utilities = match config.shaping {
            Shaping::Rank => shape_fitness(&raw_returns),
            Shaping::Identity => identity_shaping(&raw_returns),
        };
        compute_update(&records, &utilities, config, dim)?
    };
    Ok(IterationUpdate { delta, raw_returns, failures })
}

pub fn apply_update(theta: &mut [f64], delta: &[f64]) {
    for (p, d) in theta.iter_mut().zip(delta) {
        *p += d;
    }
}

/// Produces raw returns (index order) for every mutation of iteration `t`.
pub trait MutationEvaluator {
    fn evaluate_all(&mut self, theta: &[f64], config: &EsConfig, t: u64) -> Result<Vec<f64>, EsError>;
}

/// Evaluates every mutation in turn on the calling thread.
pub struct SequentialEvaluator<'a, F: Fitness + ?Sized>(pub &'a F);

impl<F: Fitness + ?Sized> MutationEvaluator for SequentialEvaluator<'_, F> {
    fn evaluate_all(&mut self, theta: &[f64], config: &EsConfig, t: u64) -> Result<Vec<f64>, EsError> {
        Ok((0..config.num_mutations).map(|j| evaluate_mutation(self.0, theta, config, t, j)).collect())
    }
}

/// One full iteration: evaluate, shape, update.
pub fn train_iteration<E: MutationEvaluator + ?Sized>(
    theta: &[f64],
    config: &EsConfig,
    t: u64,
    evaluator: &mut E,
) -> Result<(Vec<f64>, IterationStats), EsError> {
    let start = Instant::now();
    let raw = evaluator.evaluate_all(theta, config, t)?;
    let eval_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let update = build_update(raw, config, t, theta.len())?;
    let mut next = theta.to_vec();
    apply_update(&mut next, &update.delta);
    let update_seconds = start.elapsed().as_secs_f64();

    let stats = IterationStats::from_returns(t, &update.raw_returns, update.failures, eval_seconds, update_seconds, &next);
    Ok((next, stats))
}
