//! Reward-term library: every term is a pure function of its inputs, so
//! terms that a toy dynamics kind cannot produce (contacts, feet, tilt)
//! are still fully exercisable in tests with synthetic inputs while the
//! environments pass zeros.

use serde::{Deserialize, Serialize};

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// exp(−‖v_des − v‖·σ)
pub fn tracking_linear_velocity(v_des: &[f64], v: &[f64], sigma: f64) -> f64 {
    let diff: Vec<f64> = v_des.iter().zip(v).map(|(a, b)| a - b).collect();
    (-norm2(&diff) * sigma).exp()
}

/// exp(−|ω_des − ω|·σ)
pub fn tracking_angular_velocity(omega_des: f64, omega: f64, sigma: f64) -> f64 {
    (-(omega_des - omega).abs() * sigma).exp()
}

/// exp(−|h_des − h|·100)
pub fn base_height(h_des: f64, h: f64) -> f64 {
    (-(h_des - h).abs() * 100.0).exp()
}

/// exp(−|θ_des − θ|·10)
pub fn orientation(theta_des: f64, theta: f64) -> f64 {
    (-(theta_des - theta).abs() * 10.0).exp()
}

/// ‖τ‖²
pub fn joint_torque(tau: &[f64]) -> f64 {
    sq_norm(tau)
}

/// |τ·q̇|
pub fn power(tau: &[f64], qd: &[f64]) -> f64 {
    tau.iter().zip(qd).map(|(t, v)| t * v).sum::<f64>().abs()
}

/// ‖q̇‖²
pub fn joint_vel(qd: &[f64]) -> f64 {
    sq_norm(qd)
}

/// ‖q̈‖²
pub fn joint_acc(qdd: &[f64]) -> f64 {
    sq_norm(qdd)
}

/// ‖v_z‖²
pub fn lin_vel_z(v_z: f64) -> f64 {
    v_z * v_z
}

/// ‖Ω_xy‖²
pub fn ang_vel_xy(omega_xy: &[f64; 2]) -> f64 {
    sq_norm(omega_xy)
}

/// ‖a_{k+1} + a_{k−1} − 2·a_k‖²
pub fn action_smoothness(a_next: &[f64], a: &[f64], a_prev: &[f64]) -> f64 {
    a_next
        .iter()
        .zip(a.iter().zip(a_prev))
        .map(|(&n, (&c, &p))| {
            let d = n + p - 2.0 * c;
            d * d
        })
        .sum()
}

/// ‖a_{k+1} − a_k‖²
pub fn action_rate(a_next: &[f64], a: &[f64]) -> f64 {
    a_next.iter().zip(a).map(|(&n, &c)| (n - c) * (n - c)).sum()
}

/// 1 if any collision force is present.
pub fn collision(contact_force_norm: f64) -> f64 {
    if contact_force_norm > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// clip(‖F_l‖ + ‖F_r‖ − F_max, 0, 400)
pub fn contact_force(f_left: f64, f_right: f64, f_max: f64) -> f64 {
    (f_left + f_right - f_max).clamp(0.0, 400.0)
}

/// ‖q − q₀‖
pub fn default_joint_position(q: &[f64], q0: &[f64]) -> f64 {
    let diff: Vec<f64> = q.iter().zip(q0).map(|(a, b)| a - b).collect();
    norm2(&diff)
}

/// clip(d_min − d, ≥0): penalizes feet closer than the minimum distance.
pub fn foot_distance(d_min: f64, d: f64) -> f64 {
    (d_min - d).max(0.0)
}

/// exp(−‖h_des − h‖²·200)
pub fn nominal_foot_height(h_des: f64, h: f64) -> f64 {
    let d = h_des - h;
    (-d * d * 200.0).exp()
}

/// α·‖Δa‖₁ — the full residual penalty including its coefficient.
pub fn residual_penalty(delta_a: &[f64], alpha: f64) -> f64 {
    alpha * delta_a.iter().map(|v| v.abs()).sum::<f64>()
}

// ------------------------------------------------------------ coefficients

/// Per-term coefficients plus the scales the expressions need. Terms whose
/// toy inputs are identically zero default to coefficient 0 so the return
/// signal stays sensitive to behavior; all values are config-overridable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RewardCoeffs {
    pub tracking_lin: f64,
    pub tracking_ang: f64,
    pub base_height: f64,
    pub orientation: f64,
    pub joint_torque: f64,
    pub power: f64,
    pub joint_vel: f64,
    pub joint_acc: f64,
    pub lin_vel_z: f64,
    pub ang_vel_xy: f64,
    pub action_smoothness: f64,
    pub action_rate: f64,
    pub collision: f64,
    pub contact_force: f64,
    pub default_joint_pos: f64,
    pub foot_distance: f64,
    pub nominal_foot_height: f64,
    /// α of the residual penalty (the term's coefficient is 1).
    pub residual_alpha: f64,
    /// σ in both tracking exponents.
    pub sigma_tracking: f64,
    pub h_des: f64,
    pub theta_des: f64,
    pub f_max: f64,
    pub d_foot_min: f64,
    pub foot_height_des: f64,
}

impl Default for RewardCoeffs {
    fn default() -> Self {
        RewardCoeffs {
            tracking_lin: 6.0,
            tracking_ang: 5.0,
            base_height: 0.0,
            orientation: 0.0,
            joint_torque: -2e-4,
            power: -5e-4,
            joint_vel: 0.0,
            joint_acc: -2.5e-7,
            lin_vel_z: -2.0,
            ang_vel_xy: -0.1,
            action_smoothness: -0.02,
            action_rate: -0.02,
            collision: 0.0,
            contact_force: 0.0,
            default_joint_pos: -0.05,
            foot_distance: 0.0,
            nominal_foot_height: 0.0,
            residual_alpha: -0.01,
            sigma_tracking: 4.0,
            h_des: 0.0,
            theta_des: 0.0,
            f_max: 400.0,
            d_foot_min: 0.1,
            foot_height_des: 0.0,
        }
    }
}

// -------------------------------------------------------------- breakdown

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardTerm {
    TrackingLinVel,
    TrackingAngVel,
    BaseHeight,
    Orientation,
    JointTorque,
    Power,
    JointVel,
    JointAcc,
    LinVelZ,
    AngVelXy,
    ActionSmoothness,
    ActionRate,
    Collision,
    ContactForce,
    DefaultJointPos,
    FootDistance,
    NominalFootHeight,
    ResidualPenalty,
}

impl RewardTerm {
    pub fn name(&self) -> &'static str {
        match self {
            RewardTerm::TrackingLinVel => "tracking_lin_vel",
            RewardTerm::TrackingAngVel => "tracking_ang_vel",
            RewardTerm::BaseHeight => "base_height",
            RewardTerm::Orientation => "orientation",
            RewardTerm::JointTorque => "joint_torque",
            RewardTerm::Power => "power",
            RewardTerm::JointVel => "joint_vel",
            RewardTerm::JointAcc => "joint_acc",
            RewardTerm::LinVelZ => "lin_vel_z",
            RewardTerm::AngVelXy => "ang_vel_xy",
            RewardTerm::ActionSmoothness => "action_smoothness",
            RewardTerm::ActionRate => "action_rate",
            RewardTerm::Collision => "collision",
            RewardTerm::ContactForce => "contact_force",
            RewardTerm::DefaultJointPos => "default_joint_pos",
            RewardTerm::FootDistance => "foot_distance",
            RewardTerm::NominalFootHeight => "nominal_foot_height",
            RewardTerm::ResidualPenalty => "residual_penalty",
        }
    }
}

/// Everything the term library needs for one step. Histories are zeros at
/// episode start; contact/foot fields stay zero for the toy kinds.
#[derive(Debug, Clone, Default)]
pub struct RewardInputs {
    pub v_des: [f64; 2],
    pub v: [f64; 2],
    pub omega_des: f64,
    pub omega: f64,
    pub h: f64,
    pub theta: f64,
    pub tau: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
    pub v_z: f64,
    pub omega_xy: [f64; 2],
    /// a_{k+1}, a_k, a_{k−1} in the smoothness/rate expressions.
    pub action: Vec<f64>,
    pub action_prev: Vec<f64>,
    pub action_prev2: Vec<f64>,
    pub collision_force: f64,
    pub contact_left: f64,
    pub contact_right: f64,
    pub q: Vec<f64>,
    pub q_default: Vec<f64>,
    pub foot_dist: f64,
    pub foot_height: f64,
    /// Residual action Δa (normalized space); empty when no residual runs.
    pub residual: Vec<f64>,
}

/// Named per-term values and the coefficient-weighted total.
#[derive(Debug, Clone)]
pub struct RewardBreakdown {
    pub terms: Vec<(RewardTerm, f64, f64)>, // (term, value, coefficient)
    pub total: f64,
}

impl RewardBreakdown {
    pub fn value(&self, term: RewardTerm) -> f64 {
        self.terms.iter().find(|(t, _, _)| *t == term).map(|(_, v, _)| *v).unwrap_or(0.0)
    }

    pub fn weighted(&self, term: RewardTerm) -> f64 {
        self.terms
            .iter()
            .find(|(t, _, _)| *t == term)
            .map(|(_, v, c)| v * c)
            .unwrap_or(0.0)
    }
}

/// Evaluate every term and the weighted total.
pub fn reward_terms(inputs: &RewardInputs, c: &RewardCoeffs) -> RewardBreakdown {
    let sigma = c.sigma_tracking;
    let terms = vec![
        (
            RewardTerm::TrackingLinVel,
            tracking_linear_velocity(&inputs.v_des, &inputs.v, sigma),
            c.tracking_lin,
        ),
        (
            RewardTerm::TrackingAngVel,
            tracking_angular_velocity(inputs.omega_des, inputs.omega, sigma),
            c.tracking_ang,
        ),
        (RewardTerm::BaseHeight, base_height(c.h_des, inputs.h), c.base_height),
        (RewardTerm::Orientation, orientation(c.theta_des, inputs.theta), c.orientation),
        (RewardTerm::JointTorque, joint_torque(&inputs.tau), c.joint_torque),
        (RewardTerm::Power, power(&inputs.tau, &inputs.qd), c.power),
        (RewardTerm::JointVel, joint_vel(&inputs.qd), c.joint_vel),
        (RewardTerm::JointAcc, joint_acc(&inputs.qdd), c.joint_acc),
        (RewardTerm::LinVelZ, lin_vel_z(inputs.v_z), c.lin_vel_z),
        (RewardTerm::AngVelXy, ang_vel_xy(&inputs.omega_xy), c.ang_vel_xy),
        (
            RewardTerm::ActionSmoothness,
            action_smoothness(&inputs.action, &inputs.action_prev, &inputs.action_prev2),
            c.action_smoothness,
        ),
        (RewardTerm::ActionRate, action_rate(&inputs.action, &inputs.action_prev), c.action_rate),
        (RewardTerm::Collision, collision(inputs.collision_force), c.collision),
        (
            RewardTerm::ContactForce,
            contact_force(inputs.contact_left, inputs.contact_right, c.f_max),
            c.contact_force,
        ),
        (
            RewardTerm::DefaultJointPos,
            default_joint_position(&inputs.q, &inputs.q_default),
            c.default_joint_pos,
        ),
        (RewardTerm::FootDistance, foot_distance(c.d_foot_min, inputs.foot_dist), c.foot_distance),
        (
            RewardTerm::NominalFootHeight,
            nominal_foot_height(c.foot_height_des, inputs.foot_height),
            c.nominal_foot_height,
        ),
        (
            RewardTerm::ResidualPenalty,
            inputs.residual.iter().map(|v| v.abs()).sum::<f64>(),
            c.residual_alpha,
        ),
    ];
    let total = terms.iter().map(|(_, v, w)| v * w).sum();
    RewardBreakdown { terms, total }
}

/// Per-step upper bound of the weighted total: positive coefficients of
/// bounded (≤1) terms, everything else at its best value of 0. Coefficients
/// on unbounded expressions are assumed non-positive.
pub fn reward_upper_bound_per_step(c: &RewardCoeffs) -> f64 {
    [c.tracking_lin, c.tracking_ang, c.base_height, c.orientation, c.nominal_foot_height]
        .iter()
        .map(|&v| v.max(0.0))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracking_terms_hand_values() {
        // Perfect tracking gives exactly 1 before the coefficient.
        assert_eq!(tracking_linear_velocity(&[1.0, -0.5], &[1.0, -0.5], 4.0), 1.0);
        assert_eq!(tracking_angular_velocity(0.7, 0.7, 4.0), 1.0);
        // ‖(1,0)−(0,0)‖ = 1, σ = 4 → e^{−4}.
        let v = tracking_linear_velocity(&[1.0, 0.0], &[0.0, 0.0], 4.0);
        assert!((v - (-4.0f64).exp()).abs() < 1e-12);
        // |0.5 − 0.2|·2 = 0.6 → e^{−0.6}.
        let w = tracking_angular_velocity(0.5, 0.2, 2.0);
        assert!((w - (-0.6f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn exponential_terms_hand_values() {
        // |0.32 − 0.30|·100 = 2 → e^{−2}.
        assert!((base_height(0.32, 0.30) - (-2.0f64).exp()).abs() < 1e-12);
        // |0.1|·10 = 1 → e^{−1}.
        assert!((orientation(0.0, 0.1) - (-1.0f64).exp()).abs() < 1e-12);
        // (0.05−0.0)²·200 = 0.5 → e^{−0.5}.
        assert!((nominal_foot_height(0.05, 0.0) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn quadratic_terms_hand_values() {
        assert_eq!(joint_torque(&[1.0, -2.0, 2.0]), 9.0);
        assert_eq!(power(&[2.0, -1.0], &[0.5, 1.0]), 0.0); // 1.0 − 1.0
        assert_eq!(power(&[2.0, 1.0], &[0.5, 1.0]), 2.0);
        assert_eq!(joint_vel(&[3.0, 4.0]), 25.0);
        assert_eq!(joint_acc(&[0.5]), 0.25);
        assert_eq!(lin_vel_z(-0.3), 0.09);
        assert_eq!(ang_vel_xy(&[0.1, -0.2]), 0.05000000000000001);
    }

    #[test]
    fn action_history_terms() {
        let a2 = [0.1, 0.2];
        // Constant action: both terms are exactly 0.
        assert_eq!(action_smoothness(&a2, &a2, &a2), 0.0);
        assert_eq!(action_rate(&a2, &a2), 0.0);
        // a_{k+1}=[1,0], a_k=[0,0], a_{k−1}=[−1,0] → ‖(0,0)‖² = 0 (linear ramp).
        assert_eq!(action_smoothness(&[1.0, 0.0], &[0.0, 0.0], &[-1.0, 0.0]), 0.0);
        // a_{k+1}=[1], a_k=[0], a_{k−1}=[0] → ‖1‖² = 1.
        assert_eq!(action_smoothness(&[1.0], &[0.0], &[0.0]), 1.0);
        assert_eq!(action_rate(&[1.0, 1.0], &[0.5, 0.0]), 1.25);
    }

    #[test]
    fn contact_terms_hand_values() {
        assert_eq!(collision(0.0), 0.0);
        assert_eq!(collision(3.5), 1.0);
        // 250 + 250 − 400 = 100.
        assert_eq!(contact_force(250.0, 250.0, 400.0), 100.0);
        // Below threshold clips to 0; far above clips to 400.
        assert_eq!(contact_force(100.0, 100.0, 400.0), 0.0);
        assert_eq!(contact_force(600.0, 600.0, 400.0), 400.0);
    }

    #[test]
    fn posture_terms_hand_values() {
        assert_eq!(default_joint_position(&[1.0, 1.0], &[1.0, 0.0]), 1.0);
        assert!((foot_distance(0.1, 0.05) - 0.05).abs() < 1e-12);
        assert_eq!(foot_distance(0.1, 0.2), 0.0);
    }

    #[test]
    fn residual_penalty_hand_value() {
        // Δa = [0.1, −0.2], α = −0.01 → −0.003.
        let v = residual_penalty(&[0.1, -0.2], -0.01);
        assert!((v - (-0.003)).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let c = RewardCoeffs { tracking_ang: 5.0, base_height: 2.0, ..Default::default() };
        let inputs = RewardInputs {
            v_des: [1.0, 0.0],
            v: [0.9, 0.05],
            omega_des: 0.3,
            omega: 0.2,
            tau: vec![0.5, -0.5],
            qd: vec![0.1, 0.1],
            qdd: vec![1.0, -1.0],
            action: vec![0.5, 0.5],
            action_prev: vec![0.4, 0.6],
            action_prev2: vec![0.3, 0.7],
            q: vec![0.2],
            q_default: vec![0.0],
            residual: vec![0.05, -0.05],
            ..Default::default()
        };
        let b = reward_terms(&inputs, &c);
        let manual: f64 = b.terms.iter().map(|(_, v, w)| v * w).sum();
        assert!((b.total - manual).abs() < 1e-6);
        assert_eq!(b.terms.len(), 18);
    }

    #[test]
    fn upper_bound_counts_only_positive_bounded_terms() {
        let c = RewardCoeffs::default();
        assert_eq!(reward_upper_bound_per_step(&c), 11.0); // 6 + 5
        let c2 = RewardCoeffs { tracking_ang: 0.0, base_height: 2.0, ..Default::default() };
        assert_eq!(reward_upper_bound_per_step(&c2), 8.0);
    }
}
