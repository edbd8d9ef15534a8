use std::ops::Range;
use std::sync::Arc;

use super::{ParamManifest, PolicyConfig, PolicyError, PolicyParams};
use crate::env::{feasible_actions, EnvConfig, EnvError, EnvState, Policy};
use crate::paths::Path;
use crate::rng::StreamRng;

pub(crate) const LINK_FEATURES: usize = 3;

#[derive(Debug, Clone)]
struct Layout {
    embed_w: Range<usize>,
    embed_b: Range<usize>,
    msg_w: Range<usize>,
    msg_b: Range<usize>,
    demand_w: Range<usize>,
    demand_b: Range<usize>,
    readout_w: Range<usize>,
    readout_b: Range<usize>,
    score_w: Range<usize>,
    score_b: Range<usize>,
}

/// The network definition. Parameters are passed in per call, so one
/// `PolicyNet` serves every mutation of a run.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    config: PolicyConfig,
    manifest: Arc<ParamManifest>,
    layout: Layout,
}

/// `out = tanh(W x + b)` for a row-major `W` of shape `(out.len(), x.len())`.
#[inline]
fn affine_tanh(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n).zip(b)) {
        let mut acc = *bias;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc.tanh();
    }
}

impl PolicyNet {
    pub fn new(config: PolicyConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let manifest = Arc::new(config.manifest());
        let r = |name: &str| manifest.range(name).unwrap();
        let layout = Layout {
            embed_w: r("embed.weight"),
            embed_b: r("embed.bias"),
            msg_w: r("message.weight"),
            msg_b: r("message.bias"),
            demand_w: r("demand.weight"),
            demand_b: r("demand.bias"),
            readout_w: r("readout.weight"),
            readout_b: r("readout.bias"),
            score_w: r("score.weight"),
            score_b: r("score.bias"),
        };
        Ok(Self { config, manifest, layout })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Arc<ParamManifest> {
        &self.manifest
    }

    /// Action probabilities over the candidate paths of the pending demand.
    pub fn forward(&self, params: &[f64], env: &EnvConfig, state: &EnvState) -> Result<Vec<f64>, PolicyError> {
        let candidates = env.candidates(&state.pending);
        let mut probs = self.forward_candidates(params, env, state, candidates)?;
        if self.config.mask_infeasible {
            let mask = feasible_actions(state, env);
            let kept: f64 = probs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| p).sum();
            if kept > 0.0 {
                for (p, m) in probs.iter_mut().zip(mask) {
                    *p = if m { *p / kept } else { 0.0 };
                }
            }
        }
        Ok(probs)
    }

    /// Scores an explicit candidate list. Each candidate gets its own pass
    /// because the on-path indicator is part of the link input.
    pub fn forward_candidates(
        &self,
        params: &[f64],
        env: &EnvConfig,
        state: &EnvState,
        candidates: &[Path],
    ) -> Result<Vec<f64>, PolicyError> {
        if params.len() != self.manifest.total_dim() {
            return Err(PolicyError::LengthMismatch { expected: self.manifest.total_dim(), got: params.len() });
        }
        if candidates.is_empty() {
            return Err(PolicyError::NoCandidates);
        }
        let h = self.config.hidden_dim;
        let topo = env.topology();
        let links = topo.link_count();
        let max_cap = env.max_capacity();
        let lay = &self.layout;

        // Demand embedding is shared by every candidate.
        let d = state.pending.bandwidth / env.max_bandwidth();
        let mut demand = vec![0.0; h];
        affine_tanh(&params[lay.demand_w.clone()], &params[lay.demand_b.clone()], &[d], &mut demand);

        let mut hidden = vec![0.0; links * h];
        let mut next = vec![0.0; links * h];
        let mut concat = vec![0.0; 2 * h];
        let mut pooled = vec![0.0; h];
        let mut readout = vec![0.0; h];
        let mut on_path = vec![false; links];
        let mut scores = Vec::with_capacity(candidates.len());

        for path in candidates {
            on_path.iter_mut().for_each(|x| *x = false);
            for &l in &path.links {
                on_path[l] = true;
            }
            for l in 0..links {
                let cap = topo.link(l).capacity;
                let x = [state.residual[l] / cap, cap / max_cap, if on_path[l] { 1.0 } else { 0.0 }];
                affine_tanh(
                    &params[lay.embed_w.clone()],
                    &params[lay.embed_b.clone()],
                    &x,
                    &mut hidden[l * h..(l + 1) * h],
                );
            }
            for _ in 0..self.config.message_passing_steps {
                for (l, adj) in env.link_adjacency().iter().enumerate() {
                    let (own, msg) = concat.split_at_mut(h);
                    own.copy_from_slice(&hidden[l * h..(l + 1) * h]);
                    msg.iter_mut().for_each(|m| *m = 0.0);
                    for &n in adj {
                        for (m, v) in msg.iter_mut().zip(&hidden[n * h..(n + 1) * h]) {
                            *m += v;
                        }
                    }
                    affine_tanh(
                        &params[lay.msg_w.clone()],
                        &params[lay.msg_b.clone()],
                        &concat,
                        &mut next[l * h..(l + 1) * h],
                    );
                }
                std::mem::swap(&mut hidden, &mut next);
            }
            pooled.copy_from_slice(&demand);
            for &l in &path.links {
                for (p, v) in pooled.iter_mut().zip(&hidden[l * h..(l + 1) * h]) {
                    *p += v;
                }
            }
            affine_tanh(&params[lay.readout_w.clone()], &params[lay.readout_b.clone()], &pooled, &mut readout);
            let score = params[lay.score_b.start]
                + params[lay.score_w.clone()].iter().zip(&readout).map(|(w, r)| w * r).sum::<f64>();
            if !score.is_finite() {
                return Err(PolicyError::NonFinite { stage: "path score" });
            }
            scores.push(score);
        }
        Ok(softmax(&scores))
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Argmax when `deterministic` (ties go to the lowest index), otherwise a
/// draw from `(1 - eps) * probs + eps * uniform`.
pub fn sample_action(probs: &[f64], epsilon: f64, deterministic: bool, rng: &mut StreamRng) -> usize {
    if deterministic {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        return best;
    }
    let n = probs.len() as f64;
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += (1.0 - epsilon) * p + epsilon / n;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// A [`Policy`] binding one parameter vector to the network.
pub struct NetPolicy<'a> {
    net: &'a PolicyNet,
    params: &'a [f64],
    deterministic: bool,
    rng: StreamRng,
}

impl<'a> NetPolicy<'a> {
    pub fn new(net: &'a PolicyNet, params: &'a [f64], deterministic: bool, rng: StreamRng) -> Self {
        Self { net, params, deterministic, rng }
    }

    pub fn from_params(net: &'a PolicyNet, params: &'a PolicyParams, deterministic: bool, rng: StreamRng) -> Self {
        Self::new(net, params.values(), deterministic, rng)
    }
}

impl Policy for NetPolicy<'_> {
    fn act(&mut self, config: &EnvConfig, state: &EnvState) -> Result<usize, EnvError> {
        let probs = self
            .net
            .forward(self.params, config, state)
            .map_err(|e| EnvError::Policy(e.to_string()))?;
        Ok(sample_action(&probs, self.net.config.action_noise_epsilon, self.deterministic, &mut self.rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, Demand};
    use crate::policy::init_params;
    use crate::topology::{load_topology, resolve_topology};
    use proptest::prelude::*;

    fn nsf_env() -> EnvConfig {
        EnvConfig::default_for(resolve_topology("nsfnet").unwrap()).unwrap()
    }

    #[test]
    fn zero_params_give_uniform() {
        let env = nsf_env();
        let net = PolicyNet::new(PolicyConfig::default()).unwrap();
        let zeros = vec![0.0; net.manifest().total_dim()];
        let state = reset(&env, 0);
        let probs = net.forward(&zeros, &env, &state).unwrap();
        assert_eq!(probs, vec![0.25; 4]);
    }

    #[test]
    fn single_candidate_gets_all_mass() {
        let t = load_topology("p", "nodes 3\nlink 0 1 64\nlink 1 2 64\n").unwrap();
        let env = EnvConfig::default_for(t).unwrap();
        let net = PolicyNet::new(PolicyConfig::default()).unwrap();
        let p = init_params(net.config(), 1);
        let mut state = reset(&env, 0);
        state.pending = Demand { src: 0, dst: 2, bandwidth: 8.0 };
        assert_eq!(net.forward(p.values(), &env, &state).unwrap(), vec![1.0]);
    }

    #[test]
    fn symmetric_diamond_gives_equal_probabilities() {
        // 0-1-3 and 0-2-3 are swapped by the automorphism 1 <-> 2.
        let t = load_topology("diamond", "nodes 4\nlink 0 1 100\nlink 0 2 100\nlink 1 3 100\nlink 2 3 100\n").unwrap();
        let env = EnvConfig::new(t, 2, vec![8.0, 32.0], 0, None).unwrap();
        let net = PolicyNet::new(PolicyConfig::default()).unwrap();
        let mut state = reset(&env, 0);
        state.pending = Demand { src: 0, dst: 3, bandwidth: 32.0 };
        state.residual = vec![60.0, 60.0, 20.0, 20.0];
        for seed in 0..5 {
            let p = init_params(net.config(), seed);
            let probs = net.forward(p.values(), &env, &state).unwrap();
            assert_eq!(probs.len(), 2);
            assert!((probs[0] - probs[1]).abs() < 1e-6, "{probs:?}");
        }
    }

    #[test]
    fn masking_renormalizes_over_feasible() {
        let env = nsf_env();
        let cfg = PolicyConfig { mask_infeasible: true, ..Default::default() };
        let net = PolicyNet::new(cfg).unwrap();
        let zeros = vec![0.0; net.manifest().total_dim()];
        let mut state = reset(&env, 0);
        let first = env.candidates(&state.pending)[0].links[0];
        state.residual[first] = 0.0;
        let probs = net.forward(&zeros, &env, &state).unwrap();
        assert_eq!(probs[0], 0.0);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_params_are_errors() {
        let env = nsf_env();
        let net = PolicyNet::new(PolicyConfig::default()).unwrap();
        let mut p = init_params(net.config(), 0);
        let score_bias = net.manifest().range("score.bias").unwrap().start;
        p.values_mut()[score_bias] = f64::NAN;
        let state = reset(&env, 0);
        assert_eq!(
            net.forward(p.values(), &env, &state),
            Err(PolicyError::NonFinite { stage: "path score" })
        );
        assert!(matches!(net.forward(&[0.0; 2], &env, &state), Err(PolicyError::LengthMismatch { .. })));
    }

    #[test]
    fn argmax_and_degenerate_mixture() {
        let mut rng = StreamRng::new(0);
        assert_eq!(sample_action(&[0.2, 0.8], 0.05, true, &mut rng), 1);
        assert_eq!(sample_action(&[0.5, 0.5], 0.05, true, &mut rng), 0);
        assert_eq!(rng.position(), 0);
        // eps = 0 samples from probs exactly: a zero-mass index never appears
        for _ in 0..10_000 {
            assert_eq!(sample_action(&[0.0, 1.0, 0.0], 0.0, false, &mut rng), 1);
        }
    }

    #[test]
    fn mixture_frequency_matches_formula() {
        let mut rng = StreamRng::new(11);
        let hits = (0..100_000).filter(|_| sample_action(&[1.0, 0.0], 0.1, false, &mut rng) == 1).count();
        let freq = hits as f64 / 1e5;
        // (1 - 0.1) * 0 + 0.1 / 2
        assert!((freq - 0.05).abs() < 0.005, "{freq}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn forward_is_a_distribution(seed in any::<u64>(), scale in 0.0f64..10.0, ep in 0u64..1000, geant in any::<bool>()) {
            let env = EnvConfig::default_for(resolve_topology(if geant { "geant2" } else { "nsfnet" }).unwrap()).unwrap();
            let net = PolicyNet::new(PolicyConfig::default()).unwrap();
            let mut p = init_params(net.config(), seed);
            // rescale so the max-norm is `scale`
            let max = p.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            p.values_mut().iter_mut().for_each(|v| *v *= scale / max);
            let state = reset(&env, ep);
            let probs = net.forward(p.values(), &env, &state).unwrap();
            prop_assert!(probs.iter().all(|&x| x >= 0.0 && x.is_finite()));
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn candidate_permutation_permutes_output(seed in any::<u64>(), ep in 0u64..1000, rot in 1usize..4) {
            let env = nsf_env();
            let net = PolicyNet::new(PolicyConfig::default()).unwrap();
            let p = init_params(net.config(), seed);
            let state = reset(&env, ep);
            let cands = env.candidates(&state.pending).to_vec();
            let base = net.forward_candidates(p.values(), &env, &state, &cands).unwrap();
            let mut rotated = cands.clone();
            rotated.rotate_left(rot);
            let shuffled = net.forward_candidates(p.values(), &env, &state, &rotated).unwrap();
            for i in 0..cands.len() {
                prop_assert!((shuffled[i] - base[(i + rot) % cands.len()]).abs() < 1e-12);
            }
        }
    }
}
