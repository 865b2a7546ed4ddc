//! Cross-embodiment locomotion learning at desk scale.
//!
//! A masked elucidated-diffusion policy is trained on demonstration data
//! pooled from several toy embodiments with differing observation/action
//! dimensions, then refined online by a shared residual policy trained
//! with multi-critic PPO. Everything runs on CPU over a small f32 tensor
//! engine with reverse-mode autodiff.
//!
//! Module map:
//! - [`numcore`]: tensors, the autodiff tape, Adam/EMA/cosine-LR.
//! - [`alignment`]: zero-padding into unified spaces, validity masks,
//!   quantile MinMax normalization.
//! - [`denoiser`]: the conditional transformer denoiser and its
//!   condition/noise-level encoders.
//! - [`edm`]: elucidated-diffusion preconditioning, masked score-matching
//!   training, Karras schedule, Euler probability-flow sampling.
//! - [`envsim`]: deterministic toy embodiments, reward-term library,
//!   scripted experts, dataset generation.
//! - [`rladapt`]: residual Gaussian actor, per-embodiment critics, GAE,
//!   multi-critic PPO with KL-adaptive learning rate.
//! - [`store`]: bit-exact dataset and checkpoint files.
//! - [`pipeline`]: run configuration and the end-to-end commands the CLI
//!   exposes (data generation, training, evaluation, ablations).

pub mod alignment;
pub mod denoiser;
pub mod edm;
pub mod envsim;
pub mod numcore;
pub mod par;
pub mod pipeline;
pub mod rladapt;
pub mod store;
pub mod util;
