//! Residual adaptation: a shared Gaussian residual actor over the frozen
//! diffusion prior, one privileged critic per embodiment, GAE, and
//! multi-critic PPO with a KL-adaptive learning rate.

mod gae;
mod harness;
mod ppo;
mod train;

pub use gae::{gae, gae_brute_force};
pub use harness::{EnvHarness, EpisodeStats};
pub use ppo::{ppo_update, PpoStats};
pub use train::{train_residual, IterationLog, ResidualModel, ResidualTrainConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edm::EdmError;
use crate::envsim::EnvError;
use crate::numcore::{seeded_rng, Graph, Mlp, NumError, ParamSet, Tensor, Var};

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Edm(#[from] EdmError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{0}")]
    Invalid(String),
}

pub const LOG_STD_MIN: f32 = -20.0;
pub const LOG_STD_MAX: f32 = 4.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// PPO hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PpoConfig {
    pub desired_kl: f64,
    pub lr0: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub minibatches: usize,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub clip: f64,
    pub residual_coef: f64,
    pub rollout_len: usize,
    pub max_iterations: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            desired_kl: 0.01,
            lr0: 4e-4,
            gamma: 0.99,
            lambda: 0.95,
            minibatches: 4,
            epochs: 5,
            entropy_coef: 0.001,
            clip: 0.2,
            residual_coef: 0.2,
            rollout_len: 24,
            max_iterations: 200,
        }
    }
}

/// Shared residual actor: MLP mean head over concat(condition, prior
/// action) plus a state-independent log-std vector.
#[derive(Debug, Clone)]
pub struct ResidualActor {
    pub mlp: Mlp,
    pub log_std: String,
    pub cond_dim: usize,
    pub action_dim: usize,
}

pub const ACTOR_HIDDEN: [usize; 3] = [512, 256, 128];

impl ResidualActor {
    /// Zero-initialized mean head and std 1.0: the composed policy starts
    /// exactly at the frozen prior.
    pub fn init(cond_dim: usize, action_dim: usize, seed: u64, params: &mut ParamSet) -> Self {
        let mut rng = seeded_rng(seed);
        let mut dims = vec![cond_dim + action_dim];
        dims.extend(ACTOR_HIDDEN);
        dims.push(action_dim);
        let mlp = Mlp::init("actor", &dims, true, &mut rng, params);
        params.insert("actor.log_std", Tensor::zeros(&[action_dim]));
        ResidualActor { mlp, log_std: "actor.log_std".into(), cond_dim, action_dim }
    }

    /// Mean head and the clamped log-std node.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, input: Var) -> (Var, Var) {
        assert_eq!(g.value(input).last_dim(), self.cond_dim + self.action_dim);
        let mean = self.mlp.forward(g, params, input);
        let raw = g.param(&self.log_std, params);
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        (mean, log_std)
    }

    /// Host-side mean/std evaluation for one batch of inputs.
    pub fn mean_std(&self, params: &ParamSet, inputs: &Tensor) -> (Vec<f32>, Vec<f32>) {
        let mut g = Graph::new();
        let x = g.constant(inputs.clone());
        let (mean, log_std) = self.forward(&mut g, params, x);
        let std = g.value(log_std).data().iter().map(|v| v.exp()).collect();
        (g.value(mean).data().to_vec(), std)
    }
}

/// One privileged critic per embodiment. Critic k only ever evaluates
/// states of embodiment slot k.
#[derive(Debug, Clone)]
pub struct CriticBank {
    pub critics: Vec<Critic>,
}

#[derive(Debug, Clone)]
pub struct Critic {
    pub mlp: Mlp,
    pub embodiment_id: u32,
    pub privileged_dim: usize,
}

impl CriticBank {
    pub fn init(privileged_dims: &[(u32, usize)], seed: u64, params: &mut ParamSet) -> Self {
        let critics = privileged_dims
            .iter()
            .enumerate()
            .map(|(k, &(id, dim))| {
                let mut rng = seeded_rng(crate::util::derive_seed(seed, "critic", k as u64));
                let mut dims = vec![dim];
                dims.extend(ACTOR_HIDDEN);
                dims.push(1);
                Critic {
                    mlp: Mlp::init(&format!("critic{k}"), &dims, false, &mut rng, params),
                    embodiment_id: id,
                    privileged_dim: dim,
                }
            })
            .collect();
        CriticBank { critics }
    }

    /// Values for one embodiment slot's batch of privileged states.
    pub fn values(&self, params: &ParamSet, slot: usize, states: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(states.clone());
        let v = self.critics[slot].mlp.forward(&mut g, params, x);
        g.value(v).data().iter().map(|&x| x as f64).collect()
    }
}

/// a = prior + residual_coef·Δa (padded dims of Δa must already be zero).
pub fn compose_action(prior: &[f32], residual: &[f32], residual_coef: f32) -> Vec<f32> {
    assert_eq!(prior.len(), residual.len(), "compose_action length mismatch");
    prior.iter().zip(residual).map(|(&p, &r)| p + residual_coef * r).collect()
}

/// Diagonal-Gaussian log density over the valid dims only.
pub fn masked_log_prob(x: &[f32], mean: &[f32], log_std: &[f32], mask: &[f32]) -> f64 {
    let mut lp = 0.0;
    for j in 0..x.len() {
        if mask[j] == 1.0 {
            let ls = log_std[j] as f64;
            let z = (x[j] as f64 - mean[j] as f64) / ls.exp();
            lp += -0.5 * z * z - ls - HALF_LN_2PI;
        }
    }
    lp
}

/// KL-adaptive learning-rate rule: shrink by 1.5 above 2·desired, grow by
/// 1.5 below desired/2, clamped to [1e−6, 1e−2].
pub fn kl_adaptive_lr(approx_kl: f64, lr: f64, desired_kl: f64) -> f64 {
    let next = if approx_kl > 2.0 * desired_kl {
        lr / 1.5
    } else if approx_kl < desired_kl / 2.0 && approx_kl > 0.0 {
        lr * 1.5
    } else {
        lr
    };
    next.clamp(1e-6, 1e-2)
}

/// On-policy rollout storage, laid out step-major: index (t, env) at
/// t·n_envs + env.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub steps: usize,
    pub cond_dim: usize,
    pub action_dim: usize,
    pub conds: Vec<f32>,
    pub priors: Vec<f32>,
    pub residuals: Vec<f32>,
    pub old_means: Vec<f32>,
    pub old_log_std: Vec<f32>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Per-env embodiment slot (constant across steps).
    pub env_slot: Vec<usize>,
    /// Per-env action mask.
    pub env_mask: Vec<f32>,
    /// Per (t, env) privileged state, ragged across slots.
    pub privileged: Vec<Vec<f32>>,
    pub bootstrap_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.steps * self.n_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// GAE per environment stream, then per-embodiment advantage
    /// normalization. Returns the slots excluded for having fewer than two
    /// samples (callers may warn).
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64, n_slots: usize) -> Vec<usize> {
        let (t_len, n) = (self.steps, self.n_envs);
        self.advantages = vec![0.0; t_len * n];
        self.returns = vec![0.0; t_len * n];
        for e in 0..n {
            let rewards: Vec<f64> = (0..t_len).map(|t| self.rewards[t * n + e]).collect();
            let mut values: Vec<f64> = (0..t_len).map(|t| self.values[t * n + e]).collect();
            values.push(self.bootstrap_values[e]);
            let dones: Vec<bool> = (0..t_len).map(|t| self.dones[t * n + e]).collect();
            let (a, r) = gae(&rewards, &values, &dones, gamma, lambda);
            for t in 0..t_len {
                self.advantages[t * n + e] = a[t];
                self.returns[t * n + e] = r[t];
            }
        }
        normalize_advantages_per_embodiment(
            &mut self.advantages,
            &(0..t_len * n).map(|i| self.env_slot[i % n]).collect::<Vec<_>>(),
            n_slots,
        )
    }
}

/// Within each embodiment group: A ← (A − mean)/(std + 1e−8). Groups with
/// fewer than two samples are left untouched and reported.
pub fn normalize_advantages_per_embodiment(
    advantages: &mut [f64],
    slots: &[usize],
    n_slots: usize,
) -> Vec<usize> {
    assert_eq!(advantages.len(), slots.len());
    let mut excluded = Vec::new();
    for k in 0..n_slots {
        let idx: Vec<usize> = (0..slots.len()).filter(|&i| slots[i] == k).collect();
        if idx.len() < 2 {
            if !idx.is_empty() {
                excluded.push(k);
            }
            continue;
        }
        let mean: f64 = idx.iter().map(|&i| advantages[i]).sum::<f64>() / idx.len() as f64;
        let var: f64 =
            idx.iter().map(|&i| (advantages[i] - mean).powi(2)).sum::<f64>() / idx.len() as f64;
        let std = var.sqrt();
        for &i in &idx {
            advantages[i] = (advantages[i] - mean) / (std + 1e-8);
        }
    }
    excluded
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_init_actor_outputs_zero_mean_unit_std() {
        let mut params = ParamSet::new();
        let actor = ResidualActor::init(10, 4, 0, &mut params);
        let inputs = Tensor::from_vec(vec![3, 14], (0..42).map(|i| i as f32 * 0.1).collect());
        let (mean, std) = actor.mean_std(&params, &inputs);
        assert!(mean.iter().all(|&m| m == 0.0));
        assert!(std.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn log_std_clamps_at_four() {
        let mut params = ParamSet::new();
        let actor = ResidualActor::init(4, 2, 0, &mut params);
        *params.get_mut("actor.log_std").unwrap() = Tensor::from_vec(vec![2], vec![10.0, -30.0]);
        let inputs = Tensor::from_vec(vec![1, 6], vec![0.0; 6]);
        let (_, std) = actor.mean_std(&params, &inputs);
        assert!((std[0] - 4.0f32.exp()).abs() < 1e-3, "clamped at e^4, got {}", std[0]);
        assert!((std[1] - (-20.0f32).exp()).abs() < 1e-12);
    }

    #[test]
    fn actor_is_a_pure_function() {
        let mut params = ParamSet::new();
        let actor = ResidualActor::init(6, 3, 1, &mut params);
        let inputs = Tensor::from_vec(vec![2, 9], (0..18).map(|i| (i as f32).sin()).collect());
        assert_eq!(actor.mean_std(&params, &inputs), actor.mean_std(&params, &inputs));
    }

    #[test]
    fn compose_action_values() {
        assert_eq!(compose_action(&[0.1], &[0.5], 0.2), vec![0.2]);
        assert_eq!(compose_action(&[0.1, -0.3], &[0.0, 0.0], 0.2), vec![0.1, -0.3]);
        // Masked dim: a zero residual leaves the (zero) prior untouched.
        assert_eq!(compose_action(&[0.0], &[0.0], 0.2), vec![0.0]);
    }

    #[test]
    fn kl_rule_values() {
        let shrunk = kl_adaptive_lr(0.03, 4e-4, 0.01);
        assert!((shrunk - 2.6667e-4).abs() < 1e-8, "got {shrunk}");
        assert_eq!(kl_adaptive_lr(0.01, 4e-4, 0.01), 4e-4);
        let mut lr = 4e-4;
        for _ in 0..40 {
            lr = kl_adaptive_lr(1.0, lr, 0.01);
        }
        assert_eq!(lr, 1e-6);
        let mut lr = 4e-4;
        for _ in 0..40 {
            lr = kl_adaptive_lr(1e-9, lr, 0.01);
        }
        assert_eq!(lr, 1e-2);
    }

    #[test]
    fn advantage_normalization_groups() {
        // Single group: plain z-score.
        let mut a: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0];
        normalize_advantages_per_embodiment(&mut a, &[0, 0, 0, 0], 1);
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        let std: f64 = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-6);

        // Two groups with very different scales each normalize on their own.
        let mut a = vec![100.0, 300.0, -0.1, 0.1];
        normalize_advantages_per_embodiment(&mut a, &[0, 0, 1, 1], 2);
        assert!((a[0] + 1.0).abs() < 1e-6 && (a[1] - 1.0).abs() < 1e-6);
        assert!((a[2] + 1.0).abs() < 1e-6 && (a[3] - 1.0).abs() < 1e-6);

        // Constant group goes to zeros under the ε guard.
        let mut a = vec![5.0, 5.0, 5.0];
        normalize_advantages_per_embodiment(&mut a, &[0, 0, 0], 1);
        assert!(a.iter().all(|&v| v == 0.0));

        // A one-sample group is excluded and untouched.
        let mut a = vec![7.0, 1.0, 2.0];
        let excluded = normalize_advantages_per_embodiment(&mut a, &[1, 0, 0], 2);
        assert_eq!(excluded, vec![1]);
        assert_eq!(a[0], 7.0);
    }

    #[test]
    fn masked_log_prob_ignores_padded_dims() {
        let lp = masked_log_prob(&[0.5, 99.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]);
        let expect = -0.5 * 0.25 - HALF_LN_2PI;
        assert!((lp - expect).abs() < 1e-9, "{lp} vs {expect}");
    }
}
