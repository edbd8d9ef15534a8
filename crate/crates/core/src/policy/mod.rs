//! Routing policy: a message-passing network over links that scores the
//! candidate paths of the pending demand.
//!
//! All weights live in one flat `f64` vector described by a
//! [`ParamManifest`]. Evolution strategies only ever see that vector.

mod checkpoint;
mod net;

use std::sync::Arc;

use thiserror::Error;

use crate::rng::{derive_seed, domain, StreamRng};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, MAGIC};
pub use net::{sample_action, NetPolicy, PolicyNet};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("parameter vector has length {got}, manifest expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value in {stage}")]
    NonFinite { stage: &'static str },
    #[error("no candidate paths to score")]
    NoCandidates,
    #[error("invalid policy config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: &str, shape: &[usize]) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec() }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }
}

/// Ordered tensor layout of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamManifest {
    tensors: Vec<TensorSpec>,
    offsets: Vec<usize>,
    total_dim: usize,
}

impl ParamManifest {
    pub fn new(tensors: Vec<TensorSpec>) -> Result<Self, PolicyError> {
        let mut offsets = Vec::with_capacity(tensors.len());
        let mut total = 0;
        for t in &tensors {
            offsets.push(total);
            total += t.numel();
        }
        if total == 0 {
            return Err(PolicyError::Config("manifest has no parameters".into()));
        }
        Ok(Self { tensors, offsets, total_dim: total })
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Flat range occupied by tensor `name`.
    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let i = self.tensors.iter().position(|t| t.name == name)?;
        Some(self.offsets[i]..self.offsets[i] + self.tensors[i].numel())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub hidden_dim: usize,
    pub message_passing_steps: usize,
    pub action_noise_epsilon: f64,
    pub deterministic_eval: bool,
    /// Renormalize action probabilities over feasible paths only.
    pub mask_infeasible: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            message_passing_steps: 4,
            action_noise_epsilon: 0.05,
            deterministic_eval: true,
            mask_infeasible: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.hidden_dim == 0 {
            return Err(PolicyError::Config("hidden_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.action_noise_epsilon) {
            return Err(PolicyError::Config(format!(
                "action_noise_epsilon {} must lie in [0, 1)",
                self.action_noise_epsilon
            )));
        }
        Ok(())
    }

    /// Tensor layout. Link features are `[residual/capacity, capacity/max_capacity, on_path]`.
    pub fn manifest(&self) -> ParamManifest {
        let h = self.hidden_dim;
        ParamManifest::new(vec![
            TensorSpec::new("embed.weight", &[h, net::LINK_FEATURES]),
            TensorSpec::new("embed.bias", &[h]),
            TensorSpec::new("message.weight", &[h, 2 * h]),
            TensorSpec::new("message.bias", &[h]),
            TensorSpec::new("demand.weight", &[h, 1]),
            TensorSpec::new("demand.bias", &[h]),
            TensorSpec::new("readout.weight", &[h, h]),
            TensorSpec::new("readout.bias", &[h]),
            TensorSpec::new("score.weight", &[1, h]),
            TensorSpec::new("score.bias", &[1]),
        ])
        .expect("hidden_dim > 0 gives a nonempty manifest")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    manifest: Arc<ParamManifest>,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(manifest: Arc<ParamManifest>) -> Self {
        let values = vec![0.0; manifest.total_dim()];
        Self { manifest, values }
    }

    pub fn manifest(&self) -> &Arc<ParamManifest> {
        &self.manifest
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.manifest.range(name).map(|r| &self.values[r])
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn flatten(params: &PolicyParams) -> Vec<f64> {
    params.values.clone()
}

pub fn unflatten(manifest: Arc<ParamManifest>, values: Vec<f64>) -> Result<PolicyParams, PolicyError> {
    if values.len() != manifest.total_dim() {
        return Err(PolicyError::LengthMismatch { expected: manifest.total_dim(), got: values.len() });
    }
    Ok(PolicyParams { manifest, values })
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(config: &PolicyConfig, init_seed: u64) -> PolicyParams {
    let manifest = Arc::new(config.manifest());
    let mut params = PolicyParams::zeros(manifest.clone());
    for (i, t) in manifest.tensors().iter().enumerate() {
        if t.is_bias() {
            continue;
        }
        let (fan_out, fan_in) = (t.shape[0], t.shape[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = StreamRng::new(derive_seed(&[domain::INIT, init_seed, i as u64]));
        let range = manifest.range(&t.name).unwrap();
        for v in &mut params.values[range] {
            *v = (2.0 * rng.next_f64() - 1.0) * limit;
        }
    }
    params
}
