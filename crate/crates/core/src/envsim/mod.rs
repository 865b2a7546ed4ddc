//! Deterministic toy multi-embodiment environments with scripted experts.
//!
//! Four planar dynamics kinds with action dims {2, 3, 3, 6} stand in for
//! four robot morphologies and force nontrivial padding into the 6-wide
//! unified action space. Integration is semi-implicit Euler at 50 Hz;
//! every step is a pure function of (state, action), so trajectories are
//! bit-exact given a seed and action sequence.

pub mod rewards;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{make_mask, pad, EmbodimentSpec, UnifiedSample};
use crate::numcore::seeded_rng;
use crate::par;
use crate::util::derive_seed;
pub use rewards::{reward_terms, RewardBreakdown, RewardCoeffs, RewardInputs, RewardTerm};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action has {got} dims, embodiment needs {need}")]
    ActionDim { got: usize, need: usize },
    #[error("non-finite action")]
    NanAction,
    #[error("episode of {steps} steps too short for h_obs {h_obs} + h_pred {h_pred}")]
    EpisodeTooShort { steps: usize, h_obs: usize, h_pred: usize },
}

/// Control rate and integration step. dt = 1/CONTROL_HZ = 0.02 s; the
/// 1000-step horizon is the 20-second episode analog.
pub const CONTROL_HZ: u32 = 50;
pub const DEFAULT_HORIZON: u32 = 1000;
pub const DEFAULT_GAIT_PERIOD: f64 = 0.8;
pub const DIVERGENCE_SPEED: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsKind {
    /// 2-D point mass, force-controlled: action = [fx, fy].
    PointMass2,
    /// Point mass with a brake channel: action = [fx, fy, brake].
    PointMassBrake3,
    /// Heading/forward-speed vehicle: action = [thrust, yaw torque, brake].
    Unicycle3,
    /// Omnidirectional base plus three driven joints:
    /// action = [fx, fy, yaw, τ₀, τ₁, τ₂] through a leverage constant.
    Chain6,
}

impl DynamicsKind {
    pub fn all() -> [DynamicsKind; 4] {
        [
            DynamicsKind::PointMass2,
            DynamicsKind::PointMassBrake3,
            DynamicsKind::Unicycle3,
            DynamicsKind::Chain6,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            DynamicsKind::PointMass2 => "point_mass_2",
            DynamicsKind::PointMassBrake3 => "point_mass_brake_3",
            DynamicsKind::Unicycle3 => "unicycle_3",
            DynamicsKind::Chain6 => "chain_6",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        DynamicsKind::all().into_iter().find(|k| k.name() == s)
    }

    pub fn action_dim(&self) -> usize {
        match self {
            DynamicsKind::PointMass2 => 2,
            DynamicsKind::PointMassBrake3 => 3,
            DynamicsKind::Unicycle3 => 3,
            DynamicsKind::Chain6 => 6,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            DynamicsKind::PointMass2 => 4,      // vx, vy, gait sin/cos
            DynamicsKind::PointMassBrake3 => 5, // vx, vy, speed, gait sin/cos
            DynamicsKind::Unicycle3 => 4,       // v, ω, heading sin/cos (no gait)
            DynamicsKind::Chain6 => 13,         // base vel+heading+ω, q, q̇, gait
        }
    }

    /// The gait-phase clock is observed by every kind except the wheeled
    /// analog.
    pub fn observes_gait(&self) -> bool {
        !matches!(self, DynamicsKind::Unicycle3)
    }

    pub fn joint_count(&self) -> usize {
        match self {
            DynamicsKind::Chain6 => 3,
            _ => 0,
        }
    }

    fn privileged_dim(&self) -> usize {
        match self {
            DynamicsKind::PointMass2 => 9,      // vel 2, cmd 3, gait 2, m, d
            DynamicsKind::PointMassBrake3 => 10, // + brake damping
            DynamicsKind::Unicycle3 => 12,      // heading 2, v, ω, cmd 3, m, I, d, dw, db
            DynamicsKind::Chain6 => 22,         // vel 2, heading 2, ω, q 3, q̇ 3, cmd 3, gait 2, 6 params
        }
    }
}

/// Physical parameters. Only the fields a kind uses matter to it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DynParams {
    pub mass: f64,
    pub damping: f64,
    pub brake_damping: f64,
    pub inertia: f64,
    pub yaw_damping: f64,
    pub link_length: f64,
    pub joint_stiffness: f64,
    pub joint_damping: f64,
    pub joint_inertia: f64,
}

impl Default for DynParams {
    fn default() -> Self {
        DynParams {
            mass: 1.0,
            damping: 2.0,
            brake_damping: 6.0,
            inertia: 0.5,
            yaw_damping: 2.0,
            link_length: 0.5,
            joint_stiffness: 8.0,
            joint_damping: 1.0,
            joint_inertia: 0.1,
        }
    }
}

/// Per-episode command sampling ranges.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CommandRanges {
    pub vx: (f64, f64),
    pub vy: (f64, f64),
    pub yaw: (f64, f64),
}

impl Default for CommandRanges {
    fn default() -> Self {
        CommandRanges { vx: (-1.0, 1.0), vy: (-1.0, 1.0), yaw: (-1.0, 1.0) }
    }
}

impl CommandRanges {
    pub fn for_kind(kind: DynamicsKind) -> Self {
        match kind {
            // No yaw degree of freedom: ω_des pinned to zero.
            DynamicsKind::PointMass2 | DynamicsKind::PointMassBrake3 => {
                CommandRanges { vx: (-1.0, 1.0), vy: (-1.0, 1.0), yaw: (0.0, 0.0) }
            }
            // Forward-speed command only; lateral pinned to zero.
            DynamicsKind::Unicycle3 => {
                CommandRanges { vx: (-0.5, 1.5), vy: (0.0, 0.0), yaw: (-1.0, 1.0) }
            }
            DynamicsKind::Chain6 => CommandRanges::default(),
        }
    }

    pub fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> [f64; 3] {
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        };
        [draw(rng, self.vx), draw(rng, self.vy), draw(rng, self.yaw)]
    }
}

/// An embodiment: spec + dynamics kind + physical parameters.
#[derive(Debug, Clone)]
pub struct ToyEmbodiment {
    pub spec: EmbodimentSpec,
    pub kind: DynamicsKind,
    pub dt: f64,
    pub params: DynParams,
}

impl ToyEmbodiment {
    pub fn new(kind: DynamicsKind, id: u32) -> Self {
        Self::with_params(kind, id, DynParams::default())
    }

    pub fn with_params(kind: DynamicsKind, id: u32, params: DynParams) -> Self {
        ToyEmbodiment {
            spec: EmbodimentSpec {
                id,
                name: kind.name().to_string(),
                obs_dim: kind.obs_dim(),
                action_dim: kind.action_dim(),
                command_dim: 3,
                privileged_dim: kind.privileged_dim(),
            },
            kind,
            dt: 1.0 / CONTROL_HZ as f64,
            params,
        }
    }

    /// Default joint posture the chain's springs pull toward.
    pub fn q_default(&self) -> Vec<f64> {
        vec![0.0; self.kind.joint_count()]
    }
}

/// Full simulator state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub pos: [f64; 2],
    /// World-frame velocity; for the unicycle, vel[0] is forward speed and
    /// vel[1] stays 0.
    pub vel: [f64; 2],
    pub heading: f64,
    pub yaw_rate: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub command: [f64; 3],
    /// Gait clock in seconds, wrapped to [0, gait_period).
    pub phase: f64,
    pub step_count: u32,
    pub reset_seed: u64,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Vec<f32>,
    pub reward: RewardBreakdown,
    /// dt-scaled total; episode return is the sum of these.
    pub step_reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct Env {
    pub emb: ToyEmbodiment,
    pub coeffs: RewardCoeffs,
    pub gait_period: f64,
    pub horizon: u32,
    pub state: EnvState,
    prev_action: Vec<f64>,
    prev_action2: Vec<f64>,
    prev_qd: Vec<f64>,
}

/// Per-kind reward coefficients: kinds without a yaw degree of freedom do
/// not earn the angular tracking term.
pub fn default_coeffs(kind: DynamicsKind) -> RewardCoeffs {
    let mut c = RewardCoeffs::default();
    if matches!(kind, DynamicsKind::PointMass2 | DynamicsKind::PointMassBrake3) {
        c.tracking_ang = 0.0;
    }
    c
}

impl Env {
    pub fn new(emb: ToyEmbodiment, coeffs: RewardCoeffs) -> Self {
        let nq = emb.kind.joint_count();
        let na = emb.kind.action_dim();
        Env {
            state: EnvState {
                pos: [0.0; 2],
                vel: [0.0; 2],
                heading: 0.0,
                yaw_rate: 0.0,
                q: vec![0.0; nq],
                qd: vec![0.0; nq],
                command: [0.0; 3],
                phase: 0.0,
                step_count: 0,
                reset_seed: 0,
            },
            prev_action: vec![0.0; na],
            prev_action2: vec![0.0; na],
            prev_qd: vec![0.0; nq],
            emb,
            coeffs,
            gait_period: DEFAULT_GAIT_PERIOD,
            horizon: DEFAULT_HORIZON,
        }
    }

    /// Nominal pose plus a small seeded perturbation of the velocities,
    /// heading, and joints. Returns the initial native observation.
    pub fn reset(&mut self, seed: u64, command: [f64; 3], perturbation: f64) -> Vec<f32> {
        let mut rng = seeded_rng(seed);
        let mut draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            if perturbation == 0.0 {
                0.0
            } else {
                rng.random_range(-perturbation..perturbation)
            }
        };
        let nq = self.emb.kind.joint_count();
        let na = self.emb.kind.action_dim();
        self.state = EnvState {
            pos: [0.0, 0.0],
            vel: [draw(&mut rng), if self.emb.kind == DynamicsKind::Unicycle3 { 0.0 } else { draw(&mut rng) }],
            heading: draw(&mut rng),
            yaw_rate: draw(&mut rng),
            q: (0..nq).map(|_| draw(&mut rng)).collect(),
            qd: (0..nq).map(|_| draw(&mut rng)).collect(),
            command,
            phase: 0.0,
            step_count: 0,
            reset_seed: seed,
        };
        self.prev_action = vec![0.0; na];
        self.prev_action2 = vec![0.0; na];
        self.prev_qd = self.state.qd.clone();
        self.observe()
    }

    pub fn observe(&self) -> Vec<f32> {
        let s = &self.state;
        let gait = 2.0 * std::f64::consts::PI * s.phase / self.gait_period;
        let mut obs: Vec<f64> = match self.emb.kind {
            DynamicsKind::PointMass2 => vec![s.vel[0], s.vel[1], gait.sin(), gait.cos()],
            DynamicsKind::PointMassBrake3 => {
                let speed = (s.vel[0] * s.vel[0] + s.vel[1] * s.vel[1]).sqrt();
                vec![s.vel[0], s.vel[1], speed, gait.sin(), gait.cos()]
            }
            DynamicsKind::Unicycle3 => {
                vec![s.vel[0], s.yaw_rate, s.heading.sin(), s.heading.cos()]
            }
            DynamicsKind::Chain6 => {
                let mut o = vec![s.vel[0], s.vel[1], s.yaw_rate, s.heading.sin(), s.heading.cos()];
                o.extend(&s.q);
                o.extend(&s.qd);
                o.push(gait.sin());
                o.push(gait.cos());
                o
            }
        };
        debug_assert_eq!(obs.len(), self.emb.spec.obs_dim);
        obs.drain(..).map(|v| v as f32).collect()
    }

    /// Simulator state + true dynamics parameters for the critic. Absolute
    /// position is excluded: rewards are position-independent and its
    /// unbounded growth would dominate the critic's inputs.
    pub fn privileged_state(&self) -> Vec<f32> {
        let s = &self.state;
        let p = &self.emb.params;
        let gait = 2.0 * std::f64::consts::PI * s.phase / self.gait_period;
        let mut out: Vec<f64> = match self.emb.kind {
            DynamicsKind::PointMass2 => vec![
                s.vel[0], s.vel[1], s.command[0], s.command[1], s.command[2], gait.sin(), gait.cos(),
                p.mass, p.damping,
            ],
            DynamicsKind::PointMassBrake3 => vec![
                s.vel[0], s.vel[1], s.command[0], s.command[1], s.command[2], gait.sin(), gait.cos(),
                p.mass, p.damping, p.brake_damping,
            ],
            DynamicsKind::Unicycle3 => vec![
                s.heading.sin(), s.heading.cos(), s.vel[0], s.yaw_rate,
                s.command[0], s.command[1], s.command[2],
                p.mass, p.inertia, p.damping, p.yaw_damping, p.brake_damping,
            ],
            DynamicsKind::Chain6 => {
                let mut o = vec![s.vel[0], s.vel[1], s.heading.sin(), s.heading.cos(), s.yaw_rate];
                o.extend(&s.q);
                o.extend(&s.qd);
                o.extend_from_slice(&[s.command[0], s.command[1], s.command[2], gait.sin(), gait.cos()]);
                o.extend_from_slice(&[p.mass, p.inertia, p.link_length, p.damping, p.joint_stiffness, p.joint_damping]);
                o
            }
        };
        debug_assert_eq!(out.len(), self.emb.spec.privileged_dim);
        out.drain(..).map(|v| v as f32).collect()
    }

    /// Advance one step under a native action. `residual` is the residual
    /// policy's Δa (normalized space) for the penalty term; empty when the
    /// action came straight from an expert or the prior.
    pub fn step(&mut self, action: &[f64], residual: &[f64]) -> Result<StepResult, EnvError> {
        let na = self.emb.kind.action_dim();
        if action.len() != na {
            return Err(EnvError::ActionDim { got: action.len(), need: na });
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::NanAction);
        }
        let dt = self.emb.dt;
        let p = self.emb.params.clone();
        let qd_before = self.state.qd.clone();
        {
            let s = &mut self.state;
            match self.emb.kind {
                DynamicsKind::PointMass2 => {
                    for i in 0..2 {
                        s.vel[i] += dt * (action[i] / p.mass - p.damping * s.vel[i]);
                        s.pos[i] += dt * s.vel[i];
                    }
                }
                DynamicsKind::PointMassBrake3 => {
                    let brake = action[2].clamp(0.0, 1.0);
                    let d_eff = p.damping + p.brake_damping * brake;
                    for i in 0..2 {
                        s.vel[i] += dt * (action[i] / p.mass - d_eff * s.vel[i]);
                        s.pos[i] += dt * s.vel[i];
                    }
                }
                DynamicsKind::Unicycle3 => {
                    let brake = action[2].clamp(0.0, 1.0);
                    s.vel[0] += dt * (action[0] / p.mass - (p.damping + p.brake_damping * brake) * s.vel[0]);
                    s.yaw_rate +=
                        dt * (action[1] / p.inertia - (p.yaw_damping + p.brake_damping * brake) * s.yaw_rate);
                    s.heading += dt * s.yaw_rate;
                    s.pos[0] += dt * s.vel[0] * s.heading.cos();
                    s.pos[1] += dt * s.vel[0] * s.heading.sin();
                }
                DynamicsKind::Chain6 => {
                    let l = p.link_length;
                    for i in 0..2 {
                        s.vel[i] += dt * (l * action[i] / p.mass - p.damping * s.vel[i]);
                        s.pos[i] += dt * s.vel[i];
                    }
                    s.yaw_rate += dt * (l * action[2] / p.inertia - p.yaw_damping * s.yaw_rate);
                    s.heading += dt * s.yaw_rate;
                    for j in 0..3 {
                        let spring = -p.joint_stiffness * s.q[j] - p.joint_damping * s.qd[j];
                        s.qd[j] += dt * (action[3 + j] + spring) / p.joint_inertia;
                        s.q[j] += dt * s.qd[j];
                    }
                }
            }
            s.phase = (s.phase + dt) % self.gait_period;
            s.step_count += 1;
        }

        let inputs = self.reward_inputs(action, &qd_before, residual);
        let reward = reward_terms(&inputs, &self.coeffs);
        let step_reward = reward.total * dt;

        self.prev_action2 = std::mem::replace(&mut self.prev_action, action.to_vec());
        self.prev_qd = qd_before;

        let s = &self.state;
        let speed = match self.emb.kind {
            DynamicsKind::Unicycle3 => s.vel[0].abs().max(s.yaw_rate.abs()),
            _ => (s.vel[0] * s.vel[0] + s.vel[1] * s.vel[1]).sqrt().max(s.yaw_rate.abs()),
        };
        let done = s.step_count >= self.horizon || speed > DIVERGENCE_SPEED;

        Ok(StepResult { obs: self.observe(), reward, step_reward, done })
    }

    fn reward_inputs(&self, action: &[f64], qd_before: &[f64], residual: &[f64]) -> RewardInputs {
        let s = &self.state;
        let dt = self.emb.dt;
        let (v_des, v) = match self.emb.kind {
            DynamicsKind::Unicycle3 => ([s.command[0], 0.0], [s.vel[0], 0.0]),
            _ => ([s.command[0], s.command[1]], [s.vel[0], s.vel[1]]),
        };
        let qdd: Vec<f64> =
            s.qd.iter().zip(qd_before).map(|(now, before)| (now - before) / dt).collect();
        RewardInputs {
            v_des,
            v,
            omega_des: s.command[2],
            omega: s.yaw_rate,
            h: self.coeffs.h_des,
            theta: self.coeffs.theta_des,
            tau: action.to_vec(),
            qd: s.qd.clone(),
            qdd,
            v_z: 0.0,
            omega_xy: [0.0, 0.0],
            action: action.to_vec(),
            action_prev: self.prev_action.clone(),
            action_prev2: self.prev_action2.clone(),
            collision_force: 0.0,
            contact_left: 0.0,
            contact_right: 0.0,
            q: s.q.clone(),
            q_default: self.emb.q_default(),
            foot_dist: self.coeffs.d_foot_min,
            foot_height: self.coeffs.foot_height_des,
            residual: residual.to_vec(),
        }
    }
}

// ------------------------------------------------------------------ expert

/// Analytic tracking controller per kind: damping/spring feedforward plus
/// proportional feedback on the commanded velocities; the chain also swings
/// its joints along a gait-locked reference.
pub fn expert_action(env: &Env) -> Vec<f64> {
    let s = &env.state;
    let p = &env.emb.params;
    let kp = 20.0;
    match env.emb.kind {
        DynamicsKind::PointMass2 => (0..2)
            .map(|i| p.mass * (p.damping * s.command[i] + kp * (s.command[i] - s.vel[i])))
            .collect(),
        DynamicsKind::PointMassBrake3 => {
            let mut a: Vec<f64> = (0..2)
                .map(|i| p.mass * (p.damping * s.command[i] + kp * (s.command[i] - s.vel[i])))
                .collect();
            let speed = (s.vel[0] * s.vel[0] + s.vel[1] * s.vel[1]).sqrt();
            let speed_des = (s.command[0] * s.command[0] + s.command[1] * s.command[1]).sqrt();
            a.push((2.0 * (speed - speed_des)).clamp(0.0, 1.0));
            a
        }
        DynamicsKind::Unicycle3 => {
            let f = p.mass * (p.damping * s.command[0] + kp * (s.command[0] - s.vel[0]));
            let tau = p.inertia * (p.yaw_damping * s.command[2] + kp * (s.command[2] - s.yaw_rate));
            vec![f, tau, 0.0]
        }
        DynamicsKind::Chain6 => {
            let l = p.link_length;
            let fx = p.mass * (p.damping * s.command[0] + kp * (s.command[0] - s.vel[0]));
            let fy = p.mass * (p.damping * s.command[1] + kp * (s.command[1] - s.vel[1]));
            let tau = p.inertia * (p.yaw_damping * s.command[2] + kp * (s.command[2] - s.yaw_rate));
            let mut a = vec![fx / l, fy / l, tau / l];
            // Joints track a gait-locked swing: q_des = A·sin(2πt/T + ψ_j).
            let omega = 2.0 * std::f64::consts::PI / env.gait_period;
            let amp = 0.3;
            for j in 0..3 {
                let phase = omega * s.phase + j as f64 * (2.0 * std::f64::consts::PI / 3.0);
                let q_des = amp * phase.sin();
                let qd_des = amp * omega * phase.cos();
                let qdd_des = -amp * omega * omega * phase.sin();
                let ff = p.joint_stiffness * q_des + p.joint_damping * qd_des + p.joint_inertia * qdd_des;
                let fb = 4.0 * (q_des - s.q[j]) + 0.8 * (qd_des - s.qd[j]);
                a.push(ff + fb);
            }
            a
        }
    }
}

// ------------------------------------------------------------ dataset gen

#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub obs: Vec<Vec<f32>>,
    pub actions: Vec<Vec<f64>>,
    pub return_sum: f64,
    pub steps: u32,
}

/// Roll the expert for `steps` control steps from a seeded reset.
pub fn rollout_expert(
    emb: &ToyEmbodiment,
    coeffs: &RewardCoeffs,
    ranges: &CommandRanges,
    seed: u64,
    steps: u32,
    perturbation: f64,
) -> EpisodeTrace {
    let mut env = Env::new(emb.clone(), coeffs.clone());
    let mut rng = seeded_rng(derive_seed(seed, "command", 0));
    let command = ranges.sample(&mut rng);
    let first = env.reset(seed, command, perturbation);
    let mut obs = vec![first];
    let mut actions = Vec::with_capacity(steps as usize);
    let mut ret = 0.0;
    let mut taken = 0;
    for _ in 0..steps {
        let a = expert_action(&env);
        let r = env.step(&a, &[]).expect("expert action is finite");
        actions.push(a);
        ret += r.step_reward;
        taken += 1;
        if r.done {
            break;
        }
        obs.push(r.obs);
    }
    // Keep obs and actions the same length: one observation per action.
    obs.truncate(actions.len());
    EpisodeTrace { obs, actions, return_sum: ret, steps: taken }
}

/// Slice an episode into overlapping (obs window, action chunk) samples.
/// The chunk's first action is the one taken at the window's last step.
/// An episode of L steps yields L − h_obs − h_pred + 1 samples.
pub fn slice_episode(
    trace: &EpisodeTrace,
    emb: &ToyEmbodiment,
    unified_obs_dim: usize,
    unified_action_dim: usize,
    h_obs: usize,
    h_pred: usize,
    command: [f64; 3],
) -> Result<Vec<UnifiedSample>, EnvError> {
    let l = trace.actions.len();
    if l < h_obs + h_pred {
        return Err(EnvError::EpisodeTooShort { steps: l, h_obs, h_pred });
    }
    let mask = make_mask(&emb.spec, unified_action_dim).expect("unified dims cover embodiment");
    let count = l - h_obs - h_pred + 1;
    let mut out = Vec::with_capacity(count);
    let cmd: Vec<f32> = command.iter().map(|&v| v as f32).collect();
    for t in 0..count {
        let mut window = Vec::with_capacity(h_obs * unified_obs_dim);
        for k in 0..h_obs {
            window.extend(pad(&trace.obs[t + k], unified_obs_dim).expect("obs fits unified dim"));
        }
        let mut chunk = Vec::with_capacity(h_pred * unified_action_dim);
        for k in 0..h_pred {
            let native: Vec<f32> =
                trace.actions[t + h_obs - 1 + k].iter().map(|&v| v as f32).collect();
            chunk.extend(pad(&native, unified_action_dim).expect("action fits unified dim"));
        }
        out.push(UnifiedSample {
            obs_window: window,
            action_chunk: chunk,
            command: cmd.clone(),
            embodiment_id: emb.spec.id,
            mask: mask.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GenDatasetConfig {
    pub episodes: usize,
    pub episode_steps: u32,
    pub cap: Option<usize>,
    pub h_obs: usize,
    pub h_pred: usize,
    pub perturbation: f64,
    pub seed: u64,
}

/// Expert rollouts sliced into unified samples, episodes in parallel.
/// The per-embodiment cap keeps a seeded uniform subsample in trace order.
pub fn gen_dataset(
    emb: &ToyEmbodiment,
    coeffs: &RewardCoeffs,
    ranges: &CommandRanges,
    unified_obs_dim: usize,
    unified_action_dim: usize,
    cfg: &GenDatasetConfig,
) -> Result<Vec<UnifiedSample>, EnvError> {
    let per_episode: Vec<Result<Vec<UnifiedSample>, EnvError>> = par::map_indexed(cfg.episodes, |ep| {
        let seed = derive_seed(cfg.seed, emb.spec.name.as_str(), ep as u64);
        let mut rng = seeded_rng(derive_seed(seed, "command", 0));
        let command = ranges.sample(&mut rng);
        let trace = rollout_expert(emb, coeffs, ranges, seed, cfg.episode_steps, cfg.perturbation);
        slice_episode(&trace, emb, unified_obs_dim, unified_action_dim, cfg.h_obs, cfg.h_pred, command)
    });
    let mut samples = Vec::new();
    for r in per_episode {
        samples.extend(r?);
    }
    if let Some(cap) = cfg.cap {
        samples = subsample(samples, cap, derive_seed(cfg.seed, "cap", emb.spec.id as u64));
    }
    Ok(samples)
}

/// Seeded uniform subsample of exactly `cap` items (identity when the set
/// is not larger than the cap), preserving original order.
pub fn subsample<T>(items: Vec<T>, cap: usize, seed: u64) -> Vec<T> {
    if items.len() <= cap {
        return items;
    }
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    let mut rng = seeded_rng(seed);
    idx.shuffle(&mut rng);
    let mut keep: Vec<usize> = idx[..cap].to_vec();
    keep.sort_unstable();
    let keep_set: std::collections::HashSet<usize> = keep.iter().copied().collect();
    items
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| keep_set.contains(&i).then_some(s))
        .collect()
}
