use std::time::Instant;

use super::protocol::{theta_version, ProtocolMessage};
use super::transport::WorkerLink;
use super::RuntimeError;
use crate::es::{apply_update, evaluate_mutation, EsConfig, Fitness};

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerOutcome {
    pub iterations: u64,
    pub theta: Vec<f64>,
}

fn lost(t: u64, e: std::io::Error) -> RuntimeError {
    RuntimeError::Protocol(format!("iteration {t}: coordinator link failed: {e}"))
}

/// Serves iterations until the coordinator sends `Shutdown`. `theta` must be
/// the same initial vector the coordinator starts from.
pub fn run_worker<F: Fitness + ?Sized>(
    config: EsConfig,
    fitness: &F,
    mut theta: Vec<f64>,
    mut link: WorkerLink,
) -> Result<WorkerOutcome, RuntimeError> {
    let mut next_t = 0u64;
    loop {
        let (t, assignment) = match link.recv().map_err(|e| lost(next_t, e))? {
            ProtocolMessage::Shutdown => return Ok(WorkerOutcome { iterations: next_t, theta }),
            ProtocolMessage::IterationBegin { t, theta_version: remote, assignment } => {
                if t != next_t {
                    return Err(RuntimeError::Protocol(format!("expected iteration {next_t}, coordinator began {t}")));
                }
                let local = theta_version(t, &theta);
                if local != remote {
                    return Err(RuntimeError::Resync { iteration: t, local, remote });
                }
                (t, assignment)
            }
            other => {
                return Err(RuntimeError::Protocol(format!("iteration {next_t}: unexpected {}", other.name())));
            }
        };
        if assignment.mutations.end > config.num_mutations {
            return Err(RuntimeError::Protocol(format!(
                "assignment {:?} exceeds {} mutations",
                assignment.mutations, config.num_mutations
            )));
        }

        let start = Instant::now();
        let returns: Vec<(usize, f64)> = assignment
            .mutations
            .clone()
            .map(|j| (j, evaluate_mutation(fitness, &theta, &config, t, j)))
            .collect();
        let eval_seconds = start.elapsed().as_secs_f64();
        let report = ProtocolMessage::ReturnsReport { t, worker: assignment.worker, eval_seconds, returns };
        link.send(&report).map_err(|e| lost(t, e))?;

        match link.recv().map_err(|e| lost(t, e))? {
            ProtocolMessage::UpdateBroadcast { t: ut, delta } if ut == t && delta.len() == theta.len() => {
                apply_update(&mut theta, &delta);
            }
            ProtocolMessage::Shutdown => return Ok(WorkerOutcome { iterations: t, theta }),
            ProtocolMessage::UpdateBroadcast { t: ut, delta } => {
                return Err(RuntimeError::Protocol(format!(
                    "iteration {t}: update for iteration {ut} with {} entries, theta has {}",
                    delta.len(),
                    theta.len()
                )));
            }
            other => {
                return Err(RuntimeError::Protocol(format!("iteration {t}: expected UpdateBroadcast, got {}", other.name())));
            }
        }
        next_t = t + 1;
    }
}
