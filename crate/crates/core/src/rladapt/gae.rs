//! Generalized advantage estimation, computed in f64.

/// Backward GAE recursion.
///
/// `values` carries one bootstrap entry beyond the last step (len T+1);
/// `dones[t]` zeroes both the bootstrap value and the advantage tail at t.
/// Returns (advantages, returns) with returns = A + V.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    assert_eq!(values.len(), t_len + 1, "values must include the bootstrap entry");
    assert_eq!(dones.len(), t_len);
    let mut advantages = vec![0.0; t_len];
    let mut tail = 0.0;
    for t in (0..t_len).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * not_done - values[t];
        tail = delta + gamma * lambda * not_done * tail;
        advantages[t] = tail;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// O(T²) reference: A_t = Σ_l (γλ)^l δ_{t+l}, truncating at episode ends.
/// Test oracle; kept independent of the recursion above.
pub fn gae_brute_force(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let t_len = rewards.len();
    let delta: Vec<f64> = (0..t_len)
        .map(|t| {
            let not_done = if dones[t] { 0.0 } else { 1.0 };
            rewards[t] + gamma * values[t + 1] * not_done - values[t]
        })
        .collect();
    (0..t_len)
        .map(|t| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t..t_len {
                acc += w * delta[l];
                if dones[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn hand_computed_three_step_terminal() {
        // rewards [1,1,1], values 0, terminal at the last step, γ=0.99 λ=0.95.
        let (a, r) = gae(&[1.0, 1.0, 1.0], &[0.0; 4], &[false, false, true], 0.99, 0.95);
        assert!((a[2] - 1.0).abs() < 1e-12);
        assert!((a[1] - 1.94050).abs() < 1e-5, "a1 = {}", a[1]);
        assert!((a[0] - 2.82504).abs() < 1e-5, "a0 = {}", a[0]);
        assert_eq!(a, r, "zero values make returns equal advantages");
    }

    #[test]
    fn lambda_zero_collapses_to_td_errors() {
        let rewards = [0.5, -0.25, 1.5];
        let values = [0.2, 0.4, -0.1, 0.3];
        let dones = [false, false, false];
        let (a, _) = gae(&rewards, &values, &dones, 0.9, 0.0);
        for t in 0..3 {
            let delta = rewards[t] + 0.9 * values[t + 1] - values[t];
            assert!((a[t] - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = crate::numcore::seeded_rng(99);
        for _ in 0..200 {
            let t_len = rng.random_range(1..=10usize);
            let rewards: Vec<f64> = (0..t_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..=t_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dones: Vec<bool> = (0..t_len).map(|_| rng.random_range(0.0..1.0) < 0.2).collect();
            let gamma = rng.random_range(0.5..1.0);
            let lambda = rng.random_range(0.0..1.0);
            let (a, r) = gae(&rewards, &values, &dones, gamma, lambda);
            let oracle = gae_brute_force(&rewards, &values, &dones, gamma, lambda);
            for t in 0..t_len {
                assert!((a[t] - oracle[t]).abs() < 1e-10, "t={t}: {} vs {}", a[t], oracle[t]);
                assert!((r[t] - (a[t] + values[t])).abs() < 1e-12);
            }
        }
    }
}
