//! Clipped-surrogate PPO over the rollout batch: the shared actor trains
//! on every sample; each critic regresses returns of its own embodiment.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{CriticBank, PpoConfig, ResidualActor, RlError, RolloutBatch, HALF_LN_2PI};
use crate::numcore::{adam_step, forward_backward, AdamConfig, Graph, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, Default)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

/// `epochs`×`minibatches` clipped-PPO passes over the batch with Adam at a
/// fixed `lr`. Advantages must already be normalized.
pub fn ppo_update(
    batch: &RolloutBatch,
    actor: &ResidualActor,
    critics: &CriticBank,
    params: &mut ParamSet,
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats, RlError> {
    let n = batch.len();
    if n == 0 {
        return Err(RlError::Invalid("empty rollout batch".into()));
    }
    let a_dim = batch.action_dim;
    let in_dim = batch.cond_dim + a_dim;
    let adam = AdamConfig::default();
    let mut indices: Vec<usize> = (0..n).collect();
    let mb_size = n.div_ceil(cfg.minibatches);

    let mut acc = PpoStats::default();
    let mut passes = 0usize;

    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for mb in indices.chunks(mb_size) {
            let m = mb.len();
            // Gather minibatch tensors.
            let mut input = Vec::with_capacity(m * in_dim);
            let mut residual = Vec::with_capacity(m * a_dim);
            let mut mask = Vec::with_capacity(m * a_dim);
            let mut adv = Vec::with_capacity(m);
            let mut logp_old = Vec::with_capacity(m);
            for &i in mb {
                let env = i % batch.n_envs;
                input.extend_from_slice(&batch.conds[i * batch.cond_dim..(i + 1) * batch.cond_dim]);
                input.extend_from_slice(&batch.priors[i * a_dim..(i + 1) * a_dim]);
                residual.extend_from_slice(&batch.residuals[i * a_dim..(i + 1) * a_dim]);
                mask.extend_from_slice(&batch.env_mask[env * a_dim..(env + 1) * a_dim]);
                adv.push(batch.advantages[i] as f32);
                logp_old.push(batch.log_probs[i] as f32);
            }

            let mut g = Graph::new();
            let x = g.constant(Tensor::from_vec(vec![m, in_dim], input));
            let (mean, log_std) = actor.forward(&mut g, params, x);
            let res = g.constant(Tensor::from_vec(vec![m, a_dim], residual));
            let mask_t = g.constant(Tensor::from_vec(vec![m, a_dim], mask.clone()));

            let diff = g.sub(res, mean);
            let neg_ls = g.neg(log_std);
            let inv_std = g.exp(neg_ls);
            let z = g.mul(diff, inv_std);
            let z2 = g.mul(z, z);
            let half_z2 = g.scale(z2, -0.5);
            let per_dim = g.sub(half_z2, log_std);
            let per_dim = g.add_scalar(per_dim, -(HALF_LN_2PI as f32));
            let per_dim = g.mul(per_dim, mask_t);
            let logp = g.sum_axis(per_dim, 1);

            let old = g.constant(Tensor::from_vec(vec![m], logp_old));
            let delta = g.sub(logp, old);
            let ratio = g.exp(delta);
            let adv_t = g.constant(Tensor::from_vec(vec![m], adv));
            let surr1 = g.mul(ratio, adv_t);
            let clipped = g.clamp(ratio, 1.0 - cfg.clip as f32, 1.0 + cfg.clip as f32);
            let surr2 = g.mul(clipped, adv_t);
            let obj = g.min_elem(surr1, surr2);
            let mean_obj = g.mean_all(obj);
            let policy_loss = g.neg(mean_obj);

            // Gaussian entropy over valid dims: Σ mask·(log σ + ½(1 + ln 2π)).
            let ent_dim = g.add_scalar(log_std, (0.5 + HALF_LN_2PI) as f32);
            let ent_masked = g.mul(mask_t, ent_dim);
            let ent_rows = g.sum_axis(ent_masked, 1);
            let entropy = g.mean_all(ent_rows);
            let ent_term = g.scale(entropy, cfg.entropy_coef as f32);
            let mut total = g.sub(policy_loss, ent_term);

            // Per-embodiment critic regression on this minibatch's samples.
            let mut value_loss_val = 0.0f64;
            for (k, critic) in critics.critics.iter().enumerate() {
                let rows: Vec<usize> = mb
                    .iter()
                    .copied()
                    .filter(|&i| batch.env_slot[i % batch.n_envs] == k)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let dim = critic.privileged_dim;
                let mut states = Vec::with_capacity(rows.len() * dim);
                let mut rets = Vec::with_capacity(rows.len());
                for &i in &rows {
                    states.extend_from_slice(&batch.privileged[i]);
                    rets.push(batch.returns[i] as f32);
                }
                let s = g.constant(Tensor::from_vec(vec![rows.len(), dim], states));
                let v = critic.mlp.forward(&mut g, params, s);
                let v = g.reshape(v, vec![rows.len()]);
                let r = g.constant(Tensor::from_vec(vec![rows.len()], rets));
                let vd = g.sub(v, r);
                let vsq = g.mul(vd, vd);
                let vloss = g.mean_all(vsq);
                value_loss_val += g.value(vloss).item() as f64;
                total = g.add(total, vloss);
            }

            let loss_val = g.value(total).item() as f64;
            if !loss_val.is_finite() {
                return Err(RlError::Invalid("PPO loss became non-finite".into()));
            }

            // Analytic Gaussian KL(old ‖ new) over valid dims, evaluated at
            // the pre-step parameters of this pass.
            let new_mean = g.value(mean).data().to_vec();
            let new_ls = g.value(log_std).data().to_vec();
            let mut kl_sum = 0.0f64;
            for (row, &i) in mb.iter().enumerate() {
                let mut kl = 0.0f64;
                for j in 0..a_dim {
                    if mask[row * a_dim + j] != 1.0 {
                        continue;
                    }
                    let lso = batch.old_log_std[j] as f64;
                    let lsn = new_ls[j] as f64;
                    let so2 = (2.0 * lso).exp();
                    let sn2 = (2.0 * lsn).exp();
                    let dm = batch.old_means[i * a_dim + j] as f64 - new_mean[row * a_dim + j] as f64;
                    kl += lsn - lso + (so2 + dm * dm) / (2.0 * sn2) - 0.5;
                }
                kl_sum += kl;
            }

            let grads = forward_backward(&g, total, params)?;
            adam_step(params, &grads, lr as f32, &adam)?;

            acc.policy_loss += g.value(policy_loss).item() as f64;
            acc.value_loss += value_loss_val;
            acc.entropy += g.value(entropy).item() as f64;
            acc.approx_kl += kl_sum / m as f64;
            passes += 1;
        }
    }

    let p = passes as f64;
    Ok(PpoStats {
        policy_loss: acc.policy_loss / p,
        value_loss: acc.value_loss / p,
        entropy: acc.entropy / p,
        approx_kl: acc.approx_kl / p,
    })
}
