//! Receding-horizon control harness: owns one environment, its observation
//! window (bootstrapped by repeating the first observation), its episode
//! RNG stream, and per-episode metric accumulators.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::alignment::{build_condition, pad, NormStats};
use crate::envsim::{CommandRanges, Env, EnvError, RewardTerm, CONTROL_HZ};
use crate::numcore::seeded_rng;
use crate::util::derive_seed;

/// Completed-episode metrics. LVT/AVT are per-step means of the weighted
/// tracking terms; MEL is seconds survived.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeStats {
    pub slot: usize,
    pub ar: f64,
    pub mel: f64,
    pub lvt: f64,
    pub avt: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ApplyResult {
    pub step_reward: f64,
    pub done: bool,
    pub finished: Option<EpisodeStats>,
}

#[derive(Debug, Clone)]
pub struct EnvHarness {
    pub env: Env,
    pub slot: usize,
    pub mask_bits: Vec<f32>,
    pub h_obs: usize,
    pub ranges: CommandRanges,
    pub perturbation: f64,
    base_seed: u64,
    episode_counter: u64,
    window: VecDeque<Vec<f32>>,
    pub rng: ChaCha8Rng,
    ep_return: f64,
    ep_lvt: f64,
    ep_avt: f64,
    ep_steps: u32,
}

impl EnvHarness {
    pub fn new(
        env: Env,
        slot: usize,
        mask_bits: Vec<f32>,
        h_obs: usize,
        ranges: CommandRanges,
        perturbation: f64,
        base_seed: u64,
    ) -> Self {
        let mut h = EnvHarness {
            env,
            slot,
            mask_bits,
            h_obs,
            ranges,
            perturbation,
            base_seed,
            episode_counter: 0,
            window: VecDeque::new(),
            rng: seeded_rng(derive_seed(base_seed, "noise", 0)),
            ep_return: 0.0,
            ep_lvt: 0.0,
            ep_avt: 0.0,
            ep_steps: 0,
        };
        h.start_episode();
        h
    }

    fn start_episode(&mut self) {
        let seed = derive_seed(self.base_seed, "episode", self.episode_counter);
        let mut cmd_rng = seeded_rng(derive_seed(seed, "command", 0));
        let command = self.ranges.sample(&mut cmd_rng);
        let first = self.env.reset(seed, command, self.perturbation);
        self.window = VecDeque::with_capacity(self.h_obs);
        for _ in 0..self.h_obs {
            self.window.push_back(first.clone());
        }
        self.ep_return = 0.0;
        self.ep_lvt = 0.0;
        self.ep_avt = 0.0;
        self.ep_steps = 0;
        self.episode_counter += 1;
    }

    /// Condition vector over the padded, normalized window plus command.
    pub fn condition(&self, unified_obs_dim: usize, stats: &NormStats) -> Vec<f32> {
        let mut window = Vec::with_capacity(self.h_obs * unified_obs_dim);
        for obs in &self.window {
            window.extend(pad(obs, unified_obs_dim).expect("obs fits unified dim"));
        }
        let cmd: Vec<f32> = self.env.state.command.iter().map(|&v| v as f32).collect();
        build_condition(&window, &cmd, stats).expect("condition dims match stats")
    }

    /// Standard-normal start noise for one prior sample, from this
    /// environment's own stream so batching layout cannot change behavior.
    pub fn draw_prior_noise(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }

    /// Step under a native action. On episode end the harness records the
    /// finished episode's stats and immediately starts the next episode.
    pub fn apply(&mut self, native_action: &[f64], residual: &[f64]) -> Result<ApplyResult, EnvError> {
        let r = self.env.step(native_action, residual)?;
        self.ep_return += r.step_reward;
        self.ep_lvt += r.reward.weighted(RewardTerm::TrackingLinVel);
        self.ep_avt += r.reward.weighted(RewardTerm::TrackingAngVel);
        self.ep_steps += 1;
        if r.done {
            let stats = EpisodeStats {
                slot: self.slot,
                ar: self.ep_return,
                mel: self.ep_steps as f64 / CONTROL_HZ as f64,
                lvt: self.ep_lvt / self.ep_steps as f64,
                avt: self.ep_avt / self.ep_steps as f64,
            };
            self.start_episode();
            Ok(ApplyResult { step_reward: r.step_reward, done: true, finished: Some(stats) })
        } else {
            self.window.pop_front();
            self.window.push_back(r.obs);
            Ok(ApplyResult { step_reward: r.step_reward, done: false, finished: None })
        }
    }

    pub fn episodes_started(&self) -> u64 {
        self.episode_counter
    }
}
