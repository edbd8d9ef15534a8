use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::protocol::{encode, theta_version, ProtocolMessage, WorkerAssignment};
use super::transport::{spawn_reader, FrameSink, FrameSource, Inbound};
use super::{partition_mutations, IterationTiming, RunStats, RuntimeError};
use crate::es::{apply_update, build_update, evaluate_mutation, EsConfig, Fitness, IterationStats};

/// Message accounting on the coordinator side of the wire.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WireCounters {
    pub begins_sent: u64,
    pub reports_received: u64,
    pub broadcasts_sent: u64,
    /// Total bytes of received report frames, length prefix included.
    pub report_bytes: u64,
    pub broadcast_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub theta: Vec<f64>,
    pub history: Vec<IterationStats>,
    pub timing: RunStats,
    pub wire: WireCounters,
}

/// Worker 0: owns the iteration loop, evaluates its own share of mutations
/// and computes every update.
pub struct Coordinator<F: Fitness + ?Sized> {
    config: EsConfig,
    fitness: Arc<F>,
    workers: usize,
    timeout: Duration,
    sinks: Vec<Option<Box<dyn FrameSink>>>,
    inbox_tx: Sender<Inbound>,
    inbox: Receiver<Inbound>,
}

impl<F: Fitness + ?Sized> Coordinator<F> {
    pub fn new(config: EsConfig, fitness: Arc<F>, workers: usize, timeout: Duration) -> Result<Self, RuntimeError> {
        config.validate()?;
        partition_mutations(config.num_mutations, workers, config.mirrored)?;
        if timeout.is_zero() {
            return Err(RuntimeError::Config("iteration timeout must be positive".into()));
        }
        let (inbox_tx, inbox) = mpsc::channel();
        Ok(Self {
            config,
            fitness,
            workers,
            timeout,
            sinks: (0..workers).map(|_| None).collect(),
            inbox_tx,
            inbox,
        })
    }

    /// Registers the link to worker `id` (1-based; 0 is the coordinator).
    pub fn attach(&mut self, id: usize, sink: Box<dyn FrameSink>, source: Box<dyn FrameSource>) {
        assert!(id >= 1 && id < self.workers, "worker id {id} out of range");
        self.sinks[id] = Some(sink);
        spawn_reader(id, source, self.inbox_tx.clone());
    }

    fn send(&mut self, id: usize, msg: &ProtocolMessage, t: u64) -> Result<usize, RuntimeError> {
        let frame = encode(msg);
        let sink = self.sinks[id]
            .as_mut()
            .ok_or_else(|| RuntimeError::Config(format!("worker {id} was never attached")))?;
        sink.send_frame(&frame)
            .map_err(|e| RuntimeError::WorkerLost { iteration: t, worker: id, reason: e.to_string() })?;
        Ok(frame.len())
    }

    fn shutdown_all(&mut self) {
        let frame = encode(&ProtocolMessage::Shutdown);
        for sink in self.sinks.iter_mut().flatten() {
            let _ = sink.send_frame(&frame);
        }
    }

    /// Runs `config.iterations` lock-step iterations from `theta`. The
    /// observer sees the stats and updated theta after every iteration; an
    /// error from it stops the run.
    pub fn run<O>(mut self, theta: Vec<f64>, observer: O) -> Result<RunOutcome, RuntimeError>
    where
        O: FnMut(&IterationStats, &[f64]) -> Result<(), RuntimeError>,
    {
        let result = self.run_loop(theta, observer);
        self.shutdown_all();
        result
    }

    fn run_loop<O>(&mut self, mut theta: Vec<f64>, mut observer: O) -> Result<RunOutcome, RuntimeError>
    where
        O: FnMut(&IterationStats, &[f64]) -> Result<(), RuntimeError>,
    {
        if let Some(id) = (1..self.workers).find(|&i| self.sinks[i].is_none()) {
            return Err(RuntimeError::Config(format!("worker {id} was never attached")));
        }
        let config = self.config;
        let parts = partition_mutations(config.num_mutations, self.workers, config.mirrored)?;
        let mut wire = WireCounters::default();
        let mut timing = RunStats::default();
        let mut history = Vec::with_capacity(config.iterations as usize);

        for t in 0..config.iterations {
            let wall = Instant::now();
            let version = theta_version(t, &theta);
            for part in &parts[1..] {
                let msg = ProtocolMessage::IterationBegin { t, theta_version: version, assignment: part.clone() };
                self.send(part.worker, &msg, t)?;
                wire.begins_sent += 1;
            }

            let mut raw = vec![f64::NAN; config.num_mutations];
            let local = Instant::now();
            for j in parts[0].mutations.clone() {
                raw[j] = evaluate_mutation(&*self.fitness, &theta, &config, t, j);
            }
            let mut max_eval = local.elapsed().as_secs_f64();
            self.gather(t, &parts, wall + self.timeout, &mut raw, &mut max_eval, &mut wire)?;
            let eval_seconds = wall.elapsed().as_secs_f64();

            let upd = Instant::now();
            let update = build_update(raw, &config, t, theta.len())?;
            let update_seconds = upd.elapsed().as_secs_f64();

            let msg = ProtocolMessage::UpdateBroadcast { t, delta: update.delta };
            for id in 1..self.workers {
                wire.broadcast_bytes += self.send(id, &msg, t)? as u64;
                wire.broadcasts_sent += 1;
            }
            let ProtocolMessage::UpdateBroadcast { delta, .. } = msg else { unreachable!() };
            apply_update(&mut theta, &delta);

            let stats =
                IterationStats::from_returns(t, &update.raw_returns, update.failures, eval_seconds, update_seconds, &theta);
            observer(&stats, &theta)?;
            timing.iterations.push(IterationTiming {
                eval_seconds: max_eval,
                update_seconds,
                wall_seconds: wall.elapsed().as_secs_f64(),
            });
            history.push(stats);
        }
        Ok(RunOutcome { theta, history, timing, wire })
    }

    /// Collects exactly one well-formed report from every non-coordinator worker.
    fn gather(
        &mut self,
        t: u64,
        parts: &[WorkerAssignment],
        deadline: Instant,
        raw: &mut [f64],
        max_eval: &mut f64,
        wire: &mut WireCounters,
    ) -> Result<(), RuntimeError> {
        let mut pending: Vec<bool> = (0..self.workers).map(|w| w != 0).collect();
        let mut left = self.workers - 1;
        while left > 0 {
            let wait = deadline.saturating_duration_since(Instant::now());
            let inbound = match self.inbox.recv_timeout(wait) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => {
                    let worker = pending.iter().position(|&p| p).unwrap_or(0);
                    return Err(RuntimeError::Timeout { iteration: t, worker, timeout: self.timeout });
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(RuntimeError::Protocol("all worker links closed".into()));
                }
            };
            let from = inbound.worker;
            let msg = inbound
                .message
                .map_err(|reason| RuntimeError::WorkerLost { iteration: t, worker: from, reason })?;
            let ProtocolMessage::ReturnsReport { t: rt, worker, eval_seconds, returns } = msg else {
                return Err(RuntimeError::Protocol(format!(
                    "iteration {t}: worker {from} sent unexpected {}",
                    msg.name()
                )));
            };
            if rt != t || worker != from {
                return Err(RuntimeError::Protocol(format!(
                    "iteration {t}: link {from} delivered a report for iteration {rt} from worker {worker}"
                )));
            }
            if !pending[from] {
                return Err(RuntimeError::Protocol(format!("iteration {t}: worker {from} reported twice")));
            }
            let range = &parts[from].mutations;
            if returns.len() != range.len() || returns.iter().zip(range.clone()).any(|(&(j, _), want)| j != want) {
                return Err(RuntimeError::Protocol(format!(
                    "iteration {t}: worker {from} reported indices other than its assignment {range:?}"
                )));
            }
            for (j, r) in returns {
                raw[j] = r;
            }
            pending[from] = false;
            left -= 1;
            *max_eval = max_eval.max(eval_seconds);
            wire.reports_received += 1;
            wire.report_bytes += inbound.frame_bytes as u64;
        }
        Ok(())
    }
}
