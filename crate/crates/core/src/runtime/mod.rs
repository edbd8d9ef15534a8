//! Lock-step coordinator/worker execution of ES iterations.
//!
//! Worker 0 is the coordinator. Every iteration it announces the work,
//! evaluates its own share, waits for all other reports, computes the update
//! and broadcasts it. Each party holds a replica of theta and applies the
//! same `delta` with the same arithmetic, so replicas stay bit-identical.
//! Perturbations never cross the wire: every party re-derives them from the
//! shared seed schedule.

mod coordinator;
pub mod protocol;
pub mod transport;
mod worker;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::es::{EsConfig, EsError, Fitness, IterationStats};

pub use coordinator::{Coordinator, RunOutcome, WireCounters};
pub use protocol::{ProtocolMessage, WorkerAssignment};
pub use worker::{run_worker, WorkerOutcome};

pub const DEFAULT_ITER_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("iteration {iteration}: worker {worker} did not report within {timeout:?}")]
    Timeout { iteration: u64, worker: usize, timeout: Duration },
    #[error("iteration {iteration}: worker {worker} link failed: {reason}")]
    WorkerLost { iteration: u64, worker: usize, reason: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("resync error at iteration {iteration}: local theta version {local:#018x}, coordinator sent {remote:#018x}")]
    Resync { iteration: u64, local: u64, remote: u64 },
    #[error(transparent)]
    Es(#[from] EsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Observer(String),
}

/// Balanced contiguous partition of `k` mutations over `n` workers. When
/// `mirrored`, whole pairs are dealt so partners never split.
pub fn partition_mutations(k: usize, n: usize, mirrored: bool) -> Result<Vec<WorkerAssignment>, RuntimeError> {
    if n == 0 {
        return Err(RuntimeError::Config("need at least one worker".into()));
    }
    let unit = if mirrored { 2 } else { 1 };
    if mirrored && k % 2 != 0 {
        return Err(RuntimeError::Config(format!("mirrored sampling needs an even mutation count, got {k}")));
    }
    let units = k / unit;
    if n > units {
        return Err(RuntimeError::Config(format!(
            "{n} workers exceed the {units} {} available",
            if mirrored { "mirrored pairs" } else { "mutations" }
        )));
    }
    let base = units / n;
    let extra = units % n;
    let mut start = 0;
    Ok((0..n)
        .map(|worker| {
            let size = (base + usize::from(worker < extra)) * unit;
            let a = WorkerAssignment { worker, mutations: start..start + size };
            start += size;
            a
        })
        .collect())
}

/// Per-iteration timing as seen by the coordinator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationTiming {
    /// Max over workers of evaluation time within the iteration.
    pub eval_seconds: f64,
    pub update_seconds: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub iterations: Vec<IterationTiming>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeBreakdown {
    pub eval_fraction: f64,
    pub update_fraction: f64,
    pub comm_fraction: f64,
}

/// Splits total wall time into evaluation, update and the remainder
/// (messaging, waiting and bookkeeping).
pub fn wall_time_breakdown(stats: &RunStats) -> TimeBreakdown {
    let (mut eval, mut update, mut wall) = (0.0, 0.0, 0.0);
    for it in &stats.iterations {
        let e = it.eval_seconds.min(it.wall_seconds);
        let u = it.update_seconds.min(it.wall_seconds - e);
        eval += e;
        update += u;
        wall += it.wall_seconds;
    }
    if wall <= 0.0 {
        return TimeBreakdown { eval_fraction: 0.0, update_fraction: 0.0, comm_fraction: 1.0 };
    }
    let eval_fraction = eval / wall;
    let update_fraction = update / wall;
    TimeBreakdown { eval_fraction, update_fraction, comm_fraction: 1.0 - eval_fraction - update_fraction }
}

/// Runs a full training loop with `workers` in-process lanes.
pub fn run_inproc<F, O>(
    config: EsConfig,
    fitness: Arc<F>,
    theta0: Vec<f64>,
    workers: usize,
    timeout: Duration,
    observer: O,
) -> Result<RunOutcome, RuntimeError>
where
    F: Fitness + Send + 'static + ?Sized,
    O: FnMut(&IterationStats, &[f64]) -> Result<(), RuntimeError>,
{
    let mut coordinator = Coordinator::new(config, fitness.clone(), workers, timeout)?;
    let mut handles = Vec::new();
    for id in 1..workers {
        let (coord_half, worker_half) = transport::channel_link();
        coordinator.attach(id, coord_half.0, coord_half.1);
        let fitness = fitness.clone();
        let theta = theta0.clone();
        handles.push(
            thread::Builder::new()
                .name(format!("esotn-worker-{id}"))
                .spawn(move || run_worker(config, &*fitness, theta, worker_half))
                .expect("spawning worker thread"),
        );
    }
    let outcome = coordinator.run(theta0, observer);
    for h in handles {
        // Worker errors after a coordinator failure are consequences, not causes.
        let worker_result = h.join().map_err(|_| RuntimeError::Protocol("worker thread panicked".into()))?;
        if outcome.is_ok() {
            worker_result?;
        }
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sizes(k: usize, n: usize, m: bool) -> Vec<usize> {
        partition_mutations(k, n, m).unwrap().iter().map(|a| a.len()).collect()
    }

    #[test]
    fn partition_examples() {
        assert_eq!(sizes(10, 4, false), vec![3, 3, 2, 2]);
        assert_eq!(sizes(8, 2, true), vec![4, 4]);
        let one = partition_mutations(12, 1, true).unwrap();
        assert_eq!(one, vec![WorkerAssignment { worker: 0, mutations: 0..12 }]);
        assert!(partition_mutations(4, 5, false).is_err());
        assert!(partition_mutations(4, 3, true).is_err());
        assert!(partition_mutations(4, 0, false).is_err());
    }

    #[test]
    fn breakdown_sums_to_one() {
        let stats = RunStats {
            iterations: vec![
                IterationTiming { eval_seconds: 0.9, update_seconds: 0.05, wall_seconds: 1.0 },
                IterationTiming { eval_seconds: 2.0, update_seconds: 0.5, wall_seconds: 1.5 },
            ],
        };
        let b = wall_time_breakdown(&stats);
        assert!((b.eval_fraction + b.update_fraction + b.comm_fraction - 1.0).abs() < 1e-12);
        assert!((b.eval_fraction - 2.4 / 2.5).abs() < 1e-12);
        assert!(b.comm_fraction >= 0.0);
    }

    proptest! {
        #[test]
        fn partition_covers_disjointly(units in 1usize..200, n in 1usize..40, mirrored in any::<bool>()) {
            let k = if mirrored { 2 * units } else { units };
            prop_assume!(n <= units);
            let parts = partition_mutations(k, n, mirrored).unwrap();
            prop_assert_eq!(parts.len(), n);
            let mut next = 0;
            for (i, p) in parts.iter().enumerate() {
                prop_assert_eq!(p.worker, i);
                prop_assert_eq!(p.mutations.start, next);
                if mirrored {
                    prop_assert!(p.mutations.start % 2 == 0 && p.len() % 2 == 0);
                }
                next = p.mutations.end;
            }
            prop_assert_eq!(next, k);
            let unit = if mirrored { 2 } else { 1 };
            let max = parts.iter().map(|p| p.len() / unit).max().unwrap();
            let min = parts.iter().map(|p| p.len() / unit).min().unwrap();
            prop_assert!(max - min <= 1);
        }
    }
}
