//! Network building blocks over the graph: linear layers and MLPs with
//! deterministic seeded initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::optim::ParamSet;
use super::tensor::Tensor;

/// Deterministic RNG for parameter init and all sampling in this crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform init in [−1/√fan_in, +1/√fan_in].
fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Linear layer y = x·W + b with W: [in, out]. Parameters are registered
/// in a [`ParamSet`] under `{prefix}.w` / `{prefix}.b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
        params: &mut ParamSet,
    ) -> Self {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        params.insert(&w, Tensor::from_vec(vec![in_dim, out_dim], uniform_init(rng, in_dim, in_dim * out_dim)));
        params.insert(&b, Tensor::from_vec(vec![out_dim], uniform_init(rng, in_dim, out_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    /// Zero-initialized layer; the output is identically zero until trained.
    pub fn init_zero(prefix: &str, in_dim: usize, out_dim: usize, params: &mut ParamSet) -> Self {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        params.insert(&w, Tensor::zeros(&[in_dim, out_dim]));
        params.insert(&b, Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// Forward for x: [batch, in] -> [batch, out].
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Var {
        let w = g.param(&self.w, params);
        let b = g.param(&self.b, params);
        let xw = g.matmul(x, w);
        g.add(xw, b)
    }
}

/// MLP with ELU on every hidden layer and a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` = [in, hidden.., out]. The output layer is zero-initialized
    /// when `zero_head` is set.
    pub fn init(
        prefix: &str,
        dims: &[usize],
        zero_head: bool,
        rng: &mut ChaCha8Rng,
        params: &mut ParamSet,
    ) -> Self {
        assert!(dims.len() >= 2, "MLP needs at least in/out dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let name = format!("{prefix}.l{i}");
            let last = i == dims.len() - 2;
            let layer = if last && zero_head {
                Linear::init_zero(&name, dims[i], dims[i + 1], params)
            } else {
                Linear::init(&name, dims[i], dims[i + 1], rng, params)
            };
            layers.push(layer);
        }
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Var {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, params, h);
            if i + 1 < n {
                h = g.elu(h);
            }
        }
        h
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut params_a = ParamSet::new();
        let mut params_b = ParamSet::new();
        let l1 = Linear::init("l", 16, 8, &mut seeded_rng(5), &mut params_a);
        let _l2 = Linear::init("l", 16, 8, &mut seeded_rng(5), &mut params_b);
        assert_eq!(params_a.get(&l1.w).unwrap().data(), params_b.get("l.w").unwrap().data());
        let bound = 1.0 / 4.0;
        assert!(params_a.get(&l1.w).unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn mlp_forward_shapes() {
        let mut params = ParamSet::new();
        let mlp = Mlp::init("net", &[4, 8, 3], false, &mut seeded_rng(0), &mut params);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[5, 4]));
        let y = mlp.forward(&mut g, &params, x);
        assert_eq!(g.value(y).shape(), &[5, 3]);
    }

    #[test]
    fn zero_head_outputs_zero() {
        let mut params = ParamSet::new();
        let mlp = Mlp::init("net", &[4, 8, 3], true, &mut seeded_rng(0), &mut params);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2, 4], vec![1.0; 8]));
        let y = mlp.forward(&mut g, &params, x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
