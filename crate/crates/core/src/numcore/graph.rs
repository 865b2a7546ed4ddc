//! Reverse-mode autodiff over a Wengert tape.
//!
//! A [`Graph`] records op nodes as the forward pass is built; values are
//! computed eagerly. [`Graph::backward`] replays the tape in reverse,
//! accumulating vector-Jacobian products. Parameter leaves are deduplicated
//! by name so a parameter used twice accumulates one gradient.
//!
//! Shape errors in graph construction are programmer errors and panic;
//! numerical error states (non-finite values) surface as `Result`s from
//! [`forward_backward`] and [`Graph::check_finite`].

use std::collections::{BTreeMap, HashMap};

use super::kernels;
use super::optim::ParamSet;
use super::tensor::Tensor;
use super::NumError;
use crate::par;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul { m: usize, k: usize, n: usize },
    BatchMatMul { b: usize, m: usize, k: usize, n: usize },
    Scale(f32),
    AddScalar,
    Neg,
    Elu,
    Exp,
    LayerNorm { eps: f32 },
    Softmax,
    SumAll,
    MeanAll,
    SumAxis { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    Reshape,
    Permute { perm: Vec<usize> },
    Clamp { lo: f32, hi: f32 },
    MinElem,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by parameter name. Every parameter of the originating
/// [`ParamSet`] is present; untouched ones map to zero tensors.
#[derive(Debug)]
pub struct GradMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Per-axis strides of `shape` as seen from `out_shape`, 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let own = strides(shape);
    let mut s = vec![0usize; rank];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Walk every output index of `out_shape`, tracking two input offsets that
/// advance by the given per-axis strides.
fn odometer2(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for d in (0..rank).rev() {
            coords[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

fn binary_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0f32; out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    odometer2(&out_shape, &sa, &sb, |i, oa, ob| data[i] = f(ad[oa], bd[ob]));
    Tensor::from_vec(out_shape, data)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, inputs, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked input: receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t, false)
    }

    /// Tracked leaf for the named parameter. Repeated calls with the same
    /// name return the same node so gradient contributions accumulate.
    pub fn param(&mut self, name: &str, params: &ParamSet) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let t = params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .clone();
        let v = self.push(Op::Leaf, vec![], t, true);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    /// Err if the node's value contains NaN or infinity.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<(), NumError> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(NumError::NonFinite(what.to_string()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = binary_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(&[a.0, b.0]);
        self.push(Op::Add, vec![a.0, b.0], value, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = binary_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(&[a.0, b.0]);
        self.push(Op::Sub, vec![a.0, b.0], value, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = binary_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(&[a.0, b.0]);
        self.push(Op::Mul, vec![a.0, b.0], value, needs)
    }

    /// 2-D matmul: [m,k] @ [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {:?} @ {:?}", sa, sb);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        kernels::matmul_view(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(&[a.0, b.0]);
        self.push(Op::MatMul { m, k, n }, vec![a.0, b.0], Tensor::from_vec(vec![m, n], out), needs)
    }

    /// Batched matmul: [b,m,k] @ [b,k,n] -> [b,m,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm {:?} @ {:?}",
            sa,
            sb
        );
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0f32; nb * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            par::for_each_row(&mut out, m * n, |i, c| {
                kernels::matmul_seq(&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n], c, m, k, n);
            });
        }
        let needs = self.needs(&[a.0, b.0]);
        self.push(
            Op::BatchMatMul { b: nb, m, k, n },
            vec![a.0, b.0],
            Tensor::from_vec(vec![nb, m, n], out),
            needs,
        )
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        let needs = self.needs(&[a.0]);
        self.push(Op::Scale(c), vec![a.0], value, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let data = self.value(a).data().iter().map(|&x| x + c).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        let needs = self.needs(&[a.0]);
        self.push(Op::AddScalar, vec![a.0], value, needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| -x).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        let needs = self.needs(&[a.0]);
        self.push(Op::Neg, vec![a.0], value, needs)
    }

    /// Elementwise ELU: x if x > 0 else eˣ − 1.
    pub fn elu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { x.exp() - 1.0 })
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        let needs = self.needs(&[a.0]);
        self.push(Op::Elu, vec![a.0], value, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        let needs = self.needs(&[a.0]);
        self.push(Op::Exp, vec![a.0], value, needs)
    }

    /// Layer normalization over the last axis, no affine part. Row statistics
    /// are accumulated in f64.
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        assert!(d > 0 && !t.shape().is_empty(), "layer_norm needs rank >= 1");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for x in row.iter_mut() {
                *x = ((*x as f64 - mean) * inv) as f32;
            }
        }
        let value = Tensor::from_vec(t.shape().to_vec(), data);
        let needs = self.needs(&[a.0]);
        self.push(Op::LayerNorm { eps }, vec![a.0], value, needs)
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        assert!(d > 0 && !t.shape().is_empty(), "softmax needs rank >= 1");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x as f64;
            }
            let inv = (1.0 / sum) as f32;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        let value = Tensor::from_vec(t.shape().to_vec(), data);
        let needs = self.needs(&[a.0]);
        self.push(Op::Softmax, vec![a.0], value, needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let needs = self.needs(&[a.0]);
        self.push(Op::SumAll, vec![a.0], Tensor::scalar(s as f32), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        assert!(n > 0.0, "mean_all on empty tensor");
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let needs = self.needs(&[a.0]);
        self.push(Op::MeanAll, vec![a.0], Tensor::scalar((s / n) as f32), needs)
    }

    /// Sum over a single axis, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert!(axis < shape.len(), "sum_axis axis {} of {:?}", axis, shape);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * inner];
        let d = self.value(a).data();
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0f64;
                for m in 0..mid {
                    s += d[(o * mid + m) * inner + i] as f64;
                }
                out[o * inner + i] = s as f32;
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::SumAxis { axis }, vec![a.0], Tensor::from_vec(out_shape, out), needs)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert!(axis < shape.len() && start + len <= shape[axis], "slice bounds");
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * len * inner];
        let d = self.value(a).data();
        for o in 0..outer {
            let src = (o * shape[axis] + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::Slice { axis, start, len }, vec![a.0], Tensor::from_vec(out_shape, out), needs)
    }

    /// Concatenate along `axis`. All other dims must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.value(parts[0]).shape().to_vec();
        assert!(axis < first.len(), "concat axis");
        let mut total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat dim mismatch at axis {i}");
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let s = self.value(p).shape().to_vec();
            let d = self.value(p).data();
            let span = s[axis] * inner;
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + span].copy_from_slice(&d[o * span..(o + 1) * span]);
            }
            offset += s[axis];
        }
        let needs = self.needs(&parts.iter().map(|v| v.0).collect::<Vec<_>>());
        self.push(
            Op::Concat { axis },
            parts.iter().map(|v| v.0).collect(),
            Tensor::from_vec(out_shape, out),
            needs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.value(a).reshaped(shape).expect("reshape element count mismatch");
        let needs = self.needs(&[a.0]);
        self.push(Op::Reshape, vec![a.0], value, needs)
    }

    /// Permute axes: `out.shape[i] = in.shape[perm[i]]`.
    pub fn permute(&mut self, a: Var, perm: Vec<usize>) -> Var {
        let in_shape = self.value(a).shape().to_vec();
        assert_eq!(perm.len(), in_shape.len(), "permute rank");
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides(&in_shape);
        let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zero = vec![0usize; out_shape.len()];
        let mut out = vec![0.0f32; in_shape.iter().product()];
        let d = self.value(a).data();
        odometer2(&out_shape, &mapped, &zero, |i, oa, _| out[i] = d[oa]);
        let needs = self.needs(&[a.0]);
        self.push(Op::Permute { perm }, vec![a.0], Tensor::from_vec(out_shape, out), needs)
    }

    /// Elementwise clamp to [lo, hi]. Gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        let needs = self.needs(&[a.0]);
        self.push(Op::Clamp { lo, hi }, vec![a.0], value, needs)
    }

    /// Elementwise min of two same-shape tensors. Ties route gradient to `a`.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "min_elem shapes");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x.min(y))
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        let needs = self.needs(&[a.0, b.0]);
        self.push(Op::MinElem, vec![a.0, b.0], value, needs)
    }

    /// Reverse pass from a scalar loss; returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>, NumError> {
        let loss_t = self.value(loss);
        if loss_t.numel() != 1 {
            return Err(NumError::NonScalarLoss(loss_t.numel()));
        }
        if !loss_t.all_finite() {
            return Err(NumError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_t.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(go) = grads[id].take() else { continue };
            if !go.all_finite() {
                return Err(NumError::NonFinite(format!("gradient of node {id}")));
            }
            self.backprop_node(id, &go, &mut grads);
            // Leaf gradients are final; put the gradient back for collection.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(go);
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, contrib: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        debug_assert_eq!(self.nodes[id].value.shape(), contrib.shape());
        match &mut grads[id] {
            Some(g) => {
                for (gv, cv) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *gv += cv;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Reduce `go` (shaped like the broadcast output) back to `shape` by
    /// summing over broadcast axes, optionally scaling each term by the
    /// other operand via `weight`.
    fn reduce_to(
        &self,
        go: &Tensor,
        shape: &[usize],
        weight: Option<(&Tensor, bool)>,
    ) -> Tensor {
        let out_shape = go.shape().to_vec();
        let mut acc = vec![0.0f32; shape.iter().product::<usize>().max(1)];
        let starget = broadcast_strides(shape, &out_shape);
        match weight {
            None => {
                if out_shape == shape {
                    return go.clone();
                }
                let zero = vec![0usize; out_shape.len()];
                let god = go.data();
                odometer2(&out_shape, &starget, &zero, |i, ot, _| acc[ot] += god[i]);
            }
            Some((w, _)) => {
                let sw = broadcast_strides(w.shape(), &out_shape);
                let god = go.data();
                let wd = w.data();
                odometer2(&out_shape, &starget, &sw, |i, ot, ow| acc[ot] += god[i] * wd[ow]);
            }
        }
        Tensor::from_vec(shape.to_vec(), acc)
    }

    fn backprop_node(&self, id: usize, go: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                let sa = self.nodes[ins[0]].value.shape().to_vec();
                let sb = self.nodes[ins[1]].value.shape().to_vec();
                if self.nodes[ins[0]].needs_grad {
                    let g = self.reduce_to(go, &sa, None);
                    self.accumulate(grads, ins[0], g);
                }
                if self.nodes[ins[1]].needs_grad {
                    let g = self.reduce_to(go, &sb, None);
                    self.accumulate(grads, ins[1], g);
                }
            }
            Op::Sub => {
                let sa = self.nodes[ins[0]].value.shape().to_vec();
                let sb = self.nodes[ins[1]].value.shape().to_vec();
                if self.nodes[ins[0]].needs_grad {
                    let g = self.reduce_to(go, &sa, None);
                    self.accumulate(grads, ins[0], g);
                }
                if self.nodes[ins[1]].needs_grad {
                    let mut g = self.reduce_to(go, &sb, None);
                    for v in g.data_mut() {
                        *v = -*v;
                    }
                    self.accumulate(grads, ins[1], g);
                }
            }
            Op::Mul => {
                let (a, b) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                if self.nodes[ins[0]].needs_grad {
                    let g = self.reduce_to(go, a.shape(), Some((b, false)));
                    self.accumulate(grads, ins[0], g);
                }
                if self.nodes[ins[1]].needs_grad {
                    let g = self.reduce_to(go, b.shape(), Some((a, false)));
                    self.accumulate(grads, ins[1], g);
                }
            }
            Op::MatMul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (a, b) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                if self.nodes[ins[0]].needs_grad {
                    let mut da = vec![0.0f32; m * k];
                    kernels::matmul_a_bt(go.data(), b.data(), &mut da, m, n, k);
                    self.accumulate(grads, ins[0], Tensor::from_vec(vec![m, k], da));
                }
                if self.nodes[ins[1]].needs_grad {
                    let mut db = vec![0.0f32; k * n];
                    kernels::matmul_at_b(a.data(), go.data(), &mut db, k, m, n);
                    self.accumulate(grads, ins[1], Tensor::from_vec(vec![k, n], db));
                }
            }
            Op::BatchMatMul { b: nb, m, k, n } => {
                let (nb, m, k, n) = (*nb, *m, *k, *n);
                let (a, b) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                if self.nodes[ins[0]].needs_grad {
                    let mut da = vec![0.0f32; nb * m * k];
                    par::for_each_row(&mut da, m * k, |i, chunk| {
                        kernels::matmul_a_bt(
                            &go.data()[i * m * n..(i + 1) * m * n],
                            &b.data()[i * k * n..(i + 1) * k * n],
                            chunk,
                            m,
                            n,
                            k,
                        );
                    });
                    self.accumulate(grads, ins[0], Tensor::from_vec(vec![nb, m, k], da));
                }
                if self.nodes[ins[1]].needs_grad {
                    let mut db = vec![0.0f32; nb * k * n];
                    par::for_each_row(&mut db, k * n, |i, chunk| {
                        kernels::matmul_at_b(
                            &a.data()[i * m * k..(i + 1) * m * k],
                            &go.data()[i * m * n..(i + 1) * m * n],
                            chunk,
                            k,
                            m,
                            n,
                        );
                    });
                    self.accumulate(grads, ins[1], Tensor::from_vec(vec![nb, k, n], db));
                }
            }
            Op::Scale(c) => {
                let mut g = go.clone();
                for v in g.data_mut() {
                    *v *= c;
                }
                self.accumulate(grads, ins[0], g);
            }
            Op::AddScalar => {
                self.accumulate(grads, ins[0], go.clone());
            }
            Op::Neg => {
                let mut g = go.clone();
                for v in g.data_mut() {
                    *v = -*v;
                }
                self.accumulate(grads, ins[0], g);
            }
            Op::Elu => {
                // d/dx = 1 for x > 0, eˣ = y + 1 otherwise.
                let x = &self.nodes[ins[0]].value;
                let y = &node.value;
                let data = go
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(&g, (&xv, &yv))| if xv > 0.0 { g } else { g * (yv + 1.0) })
                    .collect();
                self.accumulate(grads, ins[0], Tensor::from_vec(x.shape().to_vec(), data));
            }
            Op::Exp => {
                let y = &node.value;
                let data = go.data().iter().zip(y.data()).map(|(&g, &yv)| g * yv).collect();
                self.accumulate(grads, ins[0], Tensor::from_vec(y.shape().to_vec(), data));
            }
            Op::LayerNorm { eps } => {
                let x = &self.nodes[ins[0]].value;
                let d = x.last_dim();
                let mut out = vec![0.0f32; x.numel()];
                for (r, (xrow, (grow, orow))) in x
                    .data()
                    .chunks(d)
                    .zip(go.data().chunks(d).zip(out.chunks_mut(d)))
                    .enumerate()
                {
                    let _ = r;
                    let mean = xrow.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let var = xrow.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + *eps as f64).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|&v| (v as f64 - mean) * inv).collect();
                    let g_mean = grow.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let gx_mean = grow
                        .iter()
                        .zip(&xhat)
                        .map(|(&g, &h)| g as f64 * h)
                        .sum::<f64>()
                        / d as f64;
                    for ((o, &g), &h) in orow.iter_mut().zip(grow).zip(&xhat) {
                        *o = ((g as f64 - g_mean - h * gx_mean) * inv) as f32;
                    }
                }
                self.accumulate(grads, ins[0], Tensor::from_vec(x.shape().to_vec(), out));
            }
            Op::Softmax => {
                let y = &node.value;
                let d = y.last_dim();
                let mut out = vec![0.0f32; y.numel()];
                for ((yrow, grow), orow) in y
                    .data()
                    .chunks(d)
                    .zip(go.data().chunks(d))
                    .zip(out.chunks_mut(d))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv as f64 * gv as f64).sum();
                    for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = (yv as f64 * (gv as f64 - dot)) as f32;
                    }
                }
                self.accumulate(grads, ins[0], Tensor::from_vec(y.shape().to_vec(), out));
            }
            Op::SumAll => {
                let x = &self.nodes[ins[0]].value;
                let g = go.item();
                self.accumulate(grads, ins[0], Tensor::full(x.shape(), g));
            }
            Op::MeanAll => {
                let x = &self.nodes[ins[0]].value;
                let g = go.item() / x.numel() as f32;
                self.accumulate(grads, ins[0], Tensor::full(x.shape(), g));
            }
            Op::SumAxis { axis } => {
                let x = &self.nodes[ins[0]].value;
                let shape = x.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let mid = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut out = vec![0.0f32; x.numel()];
                let god = go.data();
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            out[(o * mid + m) * inner + i] = god[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, ins[0], Tensor::from_vec(shape, out));
            }
            Op::Slice { axis, start, len } => {
                let x = &self.nodes[ins[0]].value;
                let shape = x.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut out = vec![0.0f32; x.numel()];
                let god = go.data();
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&god[src..src + len * inner]);
                }
                self.accumulate(grads, ins[0], Tensor::from_vec(shape, out));
            }
            Op::Concat { axis } => {
                let total = node.value.shape()[*axis];
                let out_shape = node.value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let god = go.data();
                let mut offset = 0usize;
                for &inp in ins {
                    let shape = self.nodes[inp].value.shape().to_vec();
                    let span = shape[*axis] * inner;
                    if self.nodes[inp].needs_grad {
                        let mut part = vec![0.0f32; self.nodes[inp].value.numel()];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            part[o * span..(o + 1) * span].copy_from_slice(&god[src..src + span]);
                        }
                        self.accumulate(grads, inp, Tensor::from_vec(shape.clone(), part));
                    }
                    offset += shape[*axis];
                }
            }
            Op::Reshape => {
                let x_shape = self.nodes[ins[0]].value.shape().to_vec();
                let g = Tensor::from_vec(x_shape, go.data().to_vec());
                self.accumulate(grads, ins[0], g);
            }
            Op::Permute { perm } => {
                // Inverse permutation sends the gradient back.
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let out_shape = node.value.shape().to_vec();
                let in_shape = self.nodes[ins[0]].value.shape().to_vec();
                let out_strides = strides(&out_shape);
                let mapped: Vec<usize> = inv.iter().map(|&p| out_strides[p]).collect();
                let zero = vec![0usize; in_shape.len()];
                let mut g = vec![0.0f32; go.numel()];
                let god = go.data();
                odometer2(&in_shape, &mapped, &zero, |i, oo, _| g[i] = god[oo]);
                self.accumulate(grads, ins[0], Tensor::from_vec(in_shape, g));
            }
            Op::Clamp { lo, hi } => {
                let x = &self.nodes[ins[0]].value;
                let data = go
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &xv)| if xv > *lo && xv < *hi { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, ins[0], Tensor::from_vec(x.shape().to_vec(), data));
            }
            Op::MinElem => {
                let (a, b) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                if self.nodes[ins[0]].needs_grad {
                    let data = go
                        .data()
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&g, (&av, &bv))| if av <= bv { g } else { 0.0 })
                        .collect();
                    self.accumulate(grads, ins[0], Tensor::from_vec(a.shape().to_vec(), data));
                }
                if self.nodes[ins[1]].needs_grad {
                    let data = go
                        .data()
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&g, (&av, &bv))| if bv < av { g } else { 0.0 })
                        .collect();
                    self.accumulate(grads, ins[1], Tensor::from_vec(b.shape().to_vec(), data));
                }
            }
        }
    }
}

/// Backward pass returning gradients for every parameter in `params`;
/// parameters the loss does not depend on get zero gradients.
pub fn forward_backward(g: &Graph, loss: Var, params: &ParamSet) -> Result<GradMap, NumError> {
    let node_grads = g.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, value) in params.iter() {
        let grad = g
            .param_vars
            .get(name)
            .and_then(|v| node_grads[v.0].clone())
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        grads.insert(name.clone(), grad);
    }
    Ok(GradMap { grads })
}
