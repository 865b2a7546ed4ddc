//! Conditional denoiser network: a small pre-norm transformer over the
//! H_pred action-chunk tokens, conditioned by additive injection of a
//! Fourier noise-level embedding plus an MLP-encoded observation/command
//! condition vector.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numcore::{seeded_rng, Graph, Linear, Mlp, NumError, ParamSet, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenoiserConfig {
    /// Per-token dimension (the unified action dimension).
    pub input_dim: usize,
    /// Condition vector length: H_obs·unified_obs_dim + command_dim.
    pub cond_dim: usize,
    /// Number of action-chunk tokens.
    pub h_pred: usize,
    pub emb_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub cond_hidden_dims: Vec<usize>,
    pub fourier_bank_size: usize,
    /// Learned positional embeddings over the chunk tokens.
    pub positional_embedding: bool,
    pub seed: u64,
}

impl DenoiserConfig {
    /// Full-size configuration: 20-dim tokens, 683-dim condition,
    /// emb 128 / d_model 256 / 8 heads / depth 3, condition MLP [512, 256].
    pub fn full(cond_dim: usize) -> Self {
        DenoiserConfig {
            input_dim: 20,
            cond_dim,
            h_pred: 4,
            emb_dim: 128,
            d_model: 256,
            n_heads: 8,
            depth: 3,
            cond_hidden_dims: vec![512, 256],
            fourier_bank_size: 64,
            positional_embedding: true,
            seed: 3407,
        }
    }

    /// Desk-scale configuration used by the toy pipeline.
    pub fn desk(input_dim: usize, cond_dim: usize, h_pred: usize) -> Self {
        DenoiserConfig {
            input_dim,
            cond_dim,
            h_pred,
            emb_dim: 32,
            d_model: 64,
            n_heads: 4,
            depth: 2,
            cond_hidden_dims: vec![128, 64],
            fourier_bank_size: 16,
            positional_embedding: true,
            seed: 3407,
        }
    }

    /// Minimal configuration for gradient checks and fast tests.
    pub fn tiny(input_dim: usize, cond_dim: usize, h_pred: usize) -> Self {
        DenoiserConfig {
            input_dim,
            cond_dim,
            h_pred,
            emb_dim: 16,
            d_model: 32,
            n_heads: 2,
            depth: 1,
            cond_hidden_dims: vec![16],
            fourier_bank_size: 8,
            positional_embedding: true,
            seed: 3407,
        }
    }

    pub fn validate(&self) -> Result<(), NumError> {
        if self.d_model % self.n_heads != 0 {
            return Err(NumError::Invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.depth == 0 || self.h_pred == 0 || self.input_dim == 0 {
            return Err(NumError::Invalid("depth, h_pred and input_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Frequency scale of the noise-level Fourier bank.
pub const FOURIER_SCALE: f32 = 16.0;

struct Block {
    ln1_gamma: String,
    ln1_beta: String,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2_gamma: String,
    ln2_beta: String,
    mlp_in: Linear,
    mlp_out: Linear,
}

/// The denoiser's structure. Parameters live in a separate [`ParamSet`]
/// keyed by the names this struct holds; the frozen Fourier frequency bank
/// is stored there too (it never receives gradients).
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    cond_mlp: Mlp,
    fourier_proj: Linear,
    token_embed: Linear,
    inject: Linear,
    pos_embed: Option<String>,
    blocks: Vec<Block>,
    final_gamma: String,
    final_beta: String,
    head: Linear,
}

pub const FOURIER_BANK_PARAM: &str = "fourier.freqs";

impl Denoiser {
    pub fn init(cfg: DenoiserConfig) -> (Self, ParamSet) {
        cfg.validate().expect("invalid denoiser config");
        let mut params = ParamSet::new();
        let mut rng = seeded_rng(cfg.seed);

        // Frozen frequency bank ~ scale · N(0, 1).
        let freqs: Vec<f32> = {
            use rand_distr::{Distribution, StandardNormal};
            (0..cfg.fourier_bank_size)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z * FOURIER_SCALE
                })
                .collect()
        };
        params.insert(FOURIER_BANK_PARAM, Tensor::from_vec(vec![cfg.fourier_bank_size], freqs));

        let fourier_proj =
            Linear::init("fourier.proj", 2 * cfg.fourier_bank_size, cfg.emb_dim, &mut rng, &mut params);
        let mut cond_dims = vec![cfg.cond_dim];
        cond_dims.extend(&cfg.cond_hidden_dims);
        cond_dims.push(cfg.emb_dim);
        let cond_mlp = Mlp::init("cond", &cond_dims, false, &mut rng, &mut params);
        let inject = Linear::init("inject", cfg.emb_dim, cfg.d_model, &mut rng, &mut params);
        let token_embed = Linear::init("token_embed", cfg.input_dim, cfg.d_model, &mut rng, &mut params);

        let pos_embed = cfg.positional_embedding.then(|| {
            let bound = 1.0 / (cfg.d_model as f32).sqrt();
            use rand::Rng;
            let data: Vec<f32> =
                (0..cfg.h_pred * cfg.d_model).map(|_| rng.random_range(-bound..bound)).collect();
            params.insert("pos_embed", Tensor::from_vec(vec![cfg.h_pred, cfg.d_model], data));
            "pos_embed".to_string()
        });

        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("block{i}");
            let mk_ln = |params: &mut ParamSet, name: String| -> (String, String) {
                let gamma = format!("{name}.gamma");
                let beta = format!("{name}.beta");
                params.insert(&gamma, Tensor::full(&[cfg.d_model], 1.0));
                params.insert(&beta, Tensor::zeros(&[cfg.d_model]));
                (gamma, beta)
            };
            let (ln1_gamma, ln1_beta) = mk_ln(&mut params, format!("{p}.ln1"));
            let wq = Linear::init(&format!("{p}.attn.wq"), cfg.d_model, cfg.d_model, &mut rng, &mut params);
            let wk = Linear::init(&format!("{p}.attn.wk"), cfg.d_model, cfg.d_model, &mut rng, &mut params);
            let wv = Linear::init(&format!("{p}.attn.wv"), cfg.d_model, cfg.d_model, &mut rng, &mut params);
            let wo = Linear::init(&format!("{p}.attn.wo"), cfg.d_model, cfg.d_model, &mut rng, &mut params);
            let (ln2_gamma, ln2_beta) = mk_ln(&mut params, format!("{p}.ln2"));
            let mlp_in = Linear::init(&format!("{p}.mlp.in"), cfg.d_model, 4 * cfg.d_model, &mut rng, &mut params);
            let mlp_out = Linear::init(&format!("{p}.mlp.out"), 4 * cfg.d_model, cfg.d_model, &mut rng, &mut params);
            blocks.push(Block { ln1_gamma, ln1_beta, wq, wk, wv, wo, ln2_gamma, ln2_beta, mlp_in, mlp_out });
        }

        let final_gamma = "final_ln.gamma".to_string();
        let final_beta = "final_ln.beta".to_string();
        params.insert(&final_gamma, Tensor::full(&[cfg.d_model], 1.0));
        params.insert(&final_beta, Tensor::zeros(&[cfg.d_model]));
        // Zero head: the initial raw output is identically zero, so the
        // preconditioned denoiser starts as pure c_skip·input.
        let head = Linear::init_zero("head", cfg.d_model, cfg.input_dim, &mut params);

        let denoiser = Denoiser {
            cfg,
            cond_mlp,
            fourier_proj,
            token_embed,
            inject,
            pos_embed,
            blocks,
            final_gamma,
            final_beta,
            head,
        };
        (denoiser, params)
    }

    /// Rebuild with the same structure and load checkpointed values.
    /// The value set must cover the structure's parameters exactly.
    pub fn from_values(
        cfg: DenoiserConfig,
        values: &BTreeMap<String, Tensor>,
    ) -> Result<(Self, ParamSet), NumError> {
        let (denoiser, mut params) = Self::init(cfg);
        if params.len() != values.len() {
            return Err(NumError::Invalid(format!(
                "checkpoint has {} tensors, structure needs {}",
                values.len(),
                params.len()
            )));
        }
        params.load_values(values)?;
        Ok((denoiser, params))
    }

    /// Raw Fourier features for a batch of c_noise scalars:
    /// [cos(2π f·c) ‖ sin(2π f·c)] per row, before the learned projection.
    pub fn fourier_features(&self, params: &ParamSet, c_noise: &[f32]) -> Tensor {
        let freqs = params.get(FOURIER_BANK_PARAM).expect("fourier bank");
        let k = freqs.numel();
        let mut data = Vec::with_capacity(c_noise.len() * 2 * k);
        for &c in c_noise {
            for &f in freqs.data() {
                let arg = 2.0 * std::f64::consts::PI * f as f64 * c as f64;
                data.push(arg.cos() as f32);
            }
            for &f in freqs.data() {
                let arg = 2.0 * std::f64::consts::PI * f as f64 * c as f64;
                data.push(arg.sin() as f32);
            }
        }
        Tensor::from_vec(vec![c_noise.len(), 2 * k], data)
    }

    /// Noise-level embedding: Fourier features projected to emb_dim.
    pub fn embed_noise(&self, g: &mut Graph, params: &ParamSet, c_noise: &[f32]) -> Var {
        let feats = g.constant(self.fourier_features(params, c_noise));
        self.fourier_proj.forward(g, params, feats)
    }

    /// Condition encoder g(·): MLP with ELU hidden activations.
    pub fn encode_condition(&self, g: &mut Graph, params: &ParamSet, cond: Var) -> Var {
        assert_eq!(
            g.value(cond).last_dim(),
            self.cfg.cond_dim,
            "condition length mismatch"
        );
        self.cond_mlp.forward(g, params, cond)
    }

    fn affine_ln(&self, g: &mut Graph, params: &ParamSet, x: Var, gamma: &str, beta: &str) -> Var {
        let normed = g.layer_norm(x, 1e-5);
        let ga = g.param(gamma, params);
        let be = g.param(beta, params);
        let scaled = g.mul(normed, ga);
        g.add(scaled, be)
    }

    /// Raw denoiser F: tokens [B, T, input_dim] plus per-sample noise and
    /// condition embeddings [B, emb_dim] -> [B, T, input_dim].
    pub fn denoise_raw(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        a_in: Var,
        noise_emb: Var,
        cond_emb: Var,
    ) -> Var {
        let shape = g.value(a_in).shape().to_vec();
        assert_eq!(shape.len(), 3, "a_in must be [batch, h_pred, input_dim]");
        let (batch, t, a_dim) = (shape[0], shape[1], shape[2]);
        assert_eq!(t, self.cfg.h_pred, "token count mismatch");
        assert_eq!(a_dim, self.cfg.input_dim, "token dim mismatch");
        let d = self.cfg.d_model;

        let flat = g.reshape(a_in, vec![batch * t, a_dim]);
        let tok = self.token_embed.forward(g, params, flat);
        let mut x = g.reshape(tok, vec![batch, t, d]);
        if let Some(pe) = &self.pos_embed {
            let pe = g.param(pe, params);
            x = g.add(x, pe);
        }

        let cond_sum = g.add(noise_emb, cond_emb);
        let inj = self.inject.forward(g, params, cond_sum);
        let inj = g.reshape(inj, vec![batch, 1, d]);
        x = g.add(x, inj);

        for block in &self.blocks {
            // Pre-norm attention sub-layer.
            let h = self.affine_ln(g, params, x, &block.ln1_gamma, &block.ln1_beta);
            let heads = self.cfg.n_heads;
            let dh = d / heads;
            let flat_h = g.reshape(h, vec![batch * t, d]);
            let q = block.wq.forward(g, params, flat_h);
            let k = block.wk.forward(g, params, flat_h);
            let v = block.wv.forward(g, params, flat_h);
            let split = |g: &mut Graph, x: Var| -> Var {
                let x = g.reshape(x, vec![batch, t, heads, dh]);
                let x = g.permute(x, vec![0, 2, 1, 3]);
                g.reshape(x, vec![batch * heads, t, dh])
            };
            let qh = split(g, q);
            let vh = split(g, v);
            let kh = {
                let y = g.reshape(k, vec![batch, t, heads, dh]);
                let y = g.permute(y, vec![0, 2, 3, 1]);
                g.reshape(y, vec![batch * heads, dh, t])
            };
            let scores = g.bmm(qh, kh);
            let scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
            let attn = g.softmax(scores);
            let mixed = g.bmm(attn, vh);
            let mixed = g.reshape(mixed, vec![batch, heads, t, dh]);
            let mixed = g.permute(mixed, vec![0, 2, 1, 3]);
            let mixed = g.reshape(mixed, vec![batch * t, d]);
            let proj = block.wo.forward(g, params, mixed);
            let proj = g.reshape(proj, vec![batch, t, d]);
            x = g.add(x, proj);

            // Pre-norm MLP sub-layer.
            let h2 = self.affine_ln(g, params, x, &block.ln2_gamma, &block.ln2_beta);
            let flat2 = g.reshape(h2, vec![batch * t, d]);
            let m = block.mlp_in.forward(g, params, flat2);
            let m = g.elu(m);
            let m = block.mlp_out.forward(g, params, m);
            let m = g.reshape(m, vec![batch, t, d]);
            x = g.add(x, m);
        }

        let xf = self.affine_ln(g, params, x, &self.final_gamma, &self.final_beta);
        let flat = g.reshape(xf, vec![batch * t, d]);
        let out = self.head.forward(g, params, flat);
        g.reshape(out, vec![batch, t, a_dim])
    }

    /// Full raw network: embeds c_noise and the condition, then denoises.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        a_in: Var,
        c_noise: &[f32],
        cond: Var,
    ) -> Result<Var, NumError> {
        let noise_emb = self.embed_noise(g, params, c_noise);
        let cond_emb = self.encode_condition(g, params, cond);
        let out = self.denoise_raw(g, params, a_in, noise_emb, cond_emb);
        g.check_finite(out, "denoiser output")?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Denoiser, ParamSet) {
        Denoiser::init(DenoiserConfig::tiny(3, 7, 2))
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let (_, p1) = tiny();
        let (_, p2) = tiny();
        assert_eq!(p1.numel(), p2.numel());
        assert_eq!(p1.to_bytes(), p2.to_bytes());
    }

    #[test]
    fn fourier_features_at_zero() {
        let (d, p) = tiny();
        let feats = d.fourier_features(&p, &[0.0]);
        let k = d.cfg.fourier_bank_size;
        assert!(feats.data()[..k].iter().all(|&v| v == 1.0), "cos part at 0");
        assert!(feats.data()[k..].iter().all(|&v| v == 0.0), "sin part at 0");
    }

    #[test]
    fn fourier_features_are_deterministic_and_periodic() {
        let (d, p) = tiny();
        let a = d.fourier_features(&p, &[0.37]);
        let b = d.fourier_features(&p, &[0.37]);
        assert_eq!(a.data(), b.data());

        // Shifting c by 1/f_j moves component j through a full period.
        let freqs = p.get(FOURIER_BANK_PARAM).unwrap().data().to_vec();
        let k = freqs.len();
        for (j, &f) in freqs.iter().enumerate() {
            let shifted = d.fourier_features(&p, &[0.37 + 1.0 / f]);
            assert!((shifted.data()[j] - a.data()[j]).abs() < 1e-3, "cos period j={j}");
            assert!((shifted.data()[k + j] - a.data()[k + j]).abs() < 1e-3, "sin period j={j}");
        }
    }

    #[test]
    fn zero_head_means_zero_output() {
        let (d, p) = tiny();
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![2, 2, 3], vec![0.3; 12]));
        let cond = g.constant(Tensor::from_vec(vec![2, 7], vec![0.1; 14]));
        let out = d.forward(&mut g, &p, a, &[0.5, -0.2], cond).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 2, 3]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let (d, mut p) = tiny();
        // Perturb the head so outputs are nonzero.
        p.get_mut("head.w").unwrap().data_mut()[0] = 0.3;
        let run = || {
            let mut g = Graph::new();
            let a = g.constant(Tensor::from_vec(vec![1, 2, 3], vec![0.5, -0.2, 0.1, 0.0, 0.7, -0.5]));
            let cond = g.constant(Tensor::from_vec(vec![1, 7], vec![0.25; 7]));
            let out = d.forward(&mut g, &p, a, &[0.1], cond).unwrap();
            g.value(out).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn condition_encoder_zero_head_zero_embedding() {
        // With the final condition layer zeroed, any input encodes to zero.
        let (d, mut p) = tiny();
        let last = d.cond_mlp.layers.len() - 1;
        let wname = d.cond_mlp.layers[last].w.clone();
        let bname = d.cond_mlp.layers[last].b.clone();
        *p.get_mut(&wname).unwrap() = Tensor::zeros(&[16, 16]);
        *p.get_mut(&bname).unwrap() = Tensor::zeros(&[16]);
        let mut g = Graph::new();
        let cond = g.constant(Tensor::from_vec(vec![1, 7], vec![0.9; 7]));
        let emb = d.encode_condition(&mut g, &p, cond);
        assert!(g.value(emb).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_permutation_equivariance_without_positions() {
        // Without positional embeddings, permuting tokens permutes outputs.
        let mut cfg = DenoiserConfig::tiny(3, 7, 2);
        cfg.positional_embedding = false;
        let (d, mut p) = Denoiser::init(cfg);
        // Non-zero, non-uniform head so outputs vary.
        for (i, v) in p.get_mut("head.w").unwrap().data_mut().iter_mut().enumerate() {
            *v = ((i % 7) as f32 - 3.0) * 0.05;
        }
        let run = |tokens: Vec<f32>| {
            let mut g = Graph::new();
            let a = g.constant(Tensor::from_vec(vec![1, 2, 3], tokens));
            let cond = g.constant(Tensor::from_vec(vec![1, 7], vec![0.3; 7]));
            let out = d.forward(&mut g, &p, a, &[0.2], cond).unwrap();
            g.value(out).data().to_vec()
        };
        let t0 = vec![0.5, -0.2, 0.1, 0.0, 0.7, -0.5];
        let t1 = vec![0.0, 0.7, -0.5, 0.5, -0.2, 0.1]; // tokens swapped
        let y0 = run(t0);
        let y1 = run(t1);
        assert_eq!(&y0[..3], &y1[3..], "swap moved token 0 output");
        assert_eq!(&y0[3..], &y1[..3], "swap moved token 1 output");
    }

    #[test]
    fn positional_embeddings_break_equivariance() {
        let (d, mut p) = tiny();
        for (i, v) in p.get_mut("head.w").unwrap().data_mut().iter_mut().enumerate() {
            *v = ((i % 7) as f32 - 3.0) * 0.05;
        }
        let run = |tokens: Vec<f32>| {
            let mut g = Graph::new();
            let a = g.constant(Tensor::from_vec(vec![1, 2, 3], tokens));
            let cond = g.constant(Tensor::from_vec(vec![1, 7], vec![0.3; 7]));
            let out = d.forward(&mut g, &p, a, &[0.2], cond).unwrap();
            g.value(out).data().to_vec()
        };
        let y0 = run(vec![0.5, -0.2, 0.1, 0.0, 0.7, -0.5]);
        let y1 = run(vec![0.0, 0.7, -0.5, 0.5, -0.2, 0.1]);
        let moved: f32 = y0[..3].iter().zip(&y1[3..]).map(|(a, b)| (a - b).abs()).sum();
        assert!(moved > 1e-5, "positional embedding should break equivariance");
    }

    #[test]
    fn single_token_attention_is_identity_mixing() {
        // With one token, softmax over the single score is exactly 1, so
        // attention reduces to the value projection of that token.
        let cfg = DenoiserConfig::tiny(3, 7, 1);
        let (d, mut p) = Denoiser::init(cfg);
        for (i, v) in p.get_mut("head.w").unwrap().data_mut().iter_mut().enumerate() {
            *v = ((i % 5) as f32 - 2.0) * 0.04;
        }
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1, 1, 3], vec![0.4, -0.6, 0.9]));
        let cond = g.constant(Tensor::from_vec(vec![1, 7], vec![0.2; 7]));
        let out = d.forward(&mut g, &p, a, &[0.0], cond).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 1, 3]);
        assert!(g.value(out).all_finite());
    }

    #[test]
    fn from_values_round_trip_and_validation() {
        let (d, p) = tiny();
        let values = p.values();
        let (_, p2) = Denoiser::from_values(d.cfg.clone(), &values).unwrap();
        assert_eq!(p.to_bytes(), p2.to_bytes());

        let mut missing = values.clone();
        missing.remove("head.w");
        assert!(Denoiser::from_values(d.cfg.clone(), &missing).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = DenoiserConfig::tiny(3, 7, 2);
        cfg.n_heads = 3; // 32 % 3 != 0
        assert!(cfg.validate().is_err());
    }
}
