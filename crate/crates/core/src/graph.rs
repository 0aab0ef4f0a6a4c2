//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and returns gradients for parameters and for any
//! input created with [`Graph::input_with_grad`].

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation with a hand-written backward, used for domain-specific kernels.
pub trait CustomOp<T: Scalar>: Send + Sync {
    /// Gradients w.r.t. each input, given the inputs, the forward output and
    /// the gradient flowing into the output.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Affine { x: Var, scale: Var, shift: Var },
    Silu(Var),
    Sigmoid(Var),
    Clamp01(Var),
    WeightedSum(Vec<(Var, T)>),
    Concat(Vec<Var>),
    Upsample2x(Var),
    LocalAttention { logits: Var, value: Var, weights: Tensor<T>, kernel: usize, heads: usize },
    /// Scalar node whose partial derivatives w.r.t. its inputs are fixed.
    Linearized(Vec<(Var, Tensor<T>)>),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    frozen: HashSet<u32>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    vars: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(&v)
    }

    /// Squared L2 norm over all parameter gradients belonging to `store`.
    pub fn store_sq_norm(&self, store: u32) -> T {
        self.params
            .iter()
            .filter(|(id, _)| id.store == store)
            .map(|(_, g)| g.sq_norm())
            .sum()
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.params
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), frozen: HashSet::new() }
    }

    /// Parameters of a frozen store enter the tape as constants.
    pub fn freeze_store(&mut self, tag: u32) {
        self.frozen.insert(tag);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = !self.frozen.contains(&id.store);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        if trainable {
            self.nodes[v.0].param = Some(id);
        }
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, spec }, rg))
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let out = ops::channel_affine(self.value(x), self.value(scale), self.value(shift))?;
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(out, Op::Affine { x, scale, shift }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::silu);
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Hard clip to `[0, 1]`; gradient passes inside the interval, zero outside.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()).min(T::one()));
        let rg = self.rg(x);
        self.push(out, Op::Clamp01(x), rg)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| Error::config("empty weighted sum"))?;
        let mut out = Tensor::zeros(self.value(first).shape());
        for &(v, c) in terms {
            if self.value(v).shape() != out.shape() {
                return Err(Error::config(format!(
                    "cannot add shapes {:?} and {:?}",
                    self.value(v).shape(),
                    out.shape()
                )));
            }
            out.axpy(c, self.value(v));
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.weighted_sum(&[(a, T::one()), (b, T::one())])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample_nearest2x(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    /// Softmax over each position's `k²` logits, then weighted aggregation of
    /// the zero-padded `k×k` neighbourhood of `value`.
    pub fn local_attention(&mut self, logits: Var, value: Var, kernel: usize, heads: usize) -> Result<Var> {
        let weights = ops::local_softmax(self.value(logits), kernel, heads)?;
        let out = ops::local_aggregate(&weights, self.value(value), kernel, heads)?;
        let rg = self.rg(logits) || self.rg(value);
        Ok(self.push(out, Op::LocalAttention { logits, value, weights, kernel, heads }, rg))
    }

    /// A scalar node with value `value` and fixed partials `d value / d input`.
    pub fn linearized(&mut self, value: T, partials: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, g) in &partials {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::config("partial derivative shape mismatch"));
            }
        }
        let rg = partials.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Tensor::scalar(value), Op::Linearized(partials), rg))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Back-propagates from `root` seeded with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        let mut out = Gradients { params: HashMap::new(), vars: HashMap::new() };

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = node.param {
                        out.params.insert(pid, g);
                    } else {
                        out.vars.insert(Var(idx), g);
                    }
                }
                Op::Conv { x, w, b, spec } => {
                    let cg = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *spec,
                        (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))),
                    )?;
                    if let Some(dx) = cg.input {
                        acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = cg.weight {
                        acc(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.bias) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Affine { x, scale, shift } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = xv.dims4()?;
                    let hw = h * w;
                    let sv = self.value(*scale);
                    let mut dscale = Tensor::zeros(&[c]);
                    let mut dshift = Tensor::zeros(&[c]);
                    let mut dx = Tensor::zeros(xv.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            for p in off..off + hw {
                                dscale[ci] += g[p] * xv[p];
                                dshift[ci] += g[p];
                                dx[p] = g[p] * sv[ci];
                            }
                        }
                    }
                    if self.rg(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    if self.rg(*scale) {
                        acc(&mut grads, *scale, dscale);
                    }
                    if self.rg(*shift) {
                        acc(&mut grads, *shift, dshift);
                    }
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let d = Tensor::from_fn(xv.shape(), |i| g[i] * ops::silu_grad(xv[i]));
                    acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let d = Tensor::from_fn(y.shape(), |i| g[i] * y[i] * (T::one() - y[i]));
                    acc(&mut grads, *x, d);
                }
                Op::Clamp01(x) => {
                    let xv = self.value(*x);
                    let d = Tensor::from_fn(xv.shape(), |i| {
                        if xv[i] >= T::zero() && xv[i] <= T::one() {
                            g[i]
                        } else {
                            T::zero()
                        }
                    });
                    acc(&mut grads, *x, d);
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        if self.rg(v) {
                            acc(&mut grads, v, g.map(|e| e * c));
                        }
                    }
                }
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).shape()[1]).collect();
                    for (p, d) in parts.iter().zip(ops::split_channels(&g, &widths)?) {
                        if self.rg(*p) {
                            acc(&mut grads, *p, d);
                        }
                    }
                }
                Op::Upsample2x(x) => {
                    acc(&mut grads, *x, ops::upsample_nearest2x_backward(&g)?);
                }
                Op::LocalAttention { logits, value, weights, kernel, heads } => {
                    let (dl, dv) =
                        ops::local_attention_backward(weights, self.value(*value), &g, *kernel, *heads)?;
                    if self.rg(*logits) {
                        acc(&mut grads, *logits, dl);
                    }
                    if self.rg(*value) {
                        acc(&mut grads, *value, dv);
                    }
                }
                Op::Linearized(partials) => {
                    let seed = g[0];
                    for (v, d) in partials {
                        if self.rg(*v) {
                            acc(&mut grads, *v, d.map(|e| e * seed));
                        }
                    }
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let ds = op.backward(&vals, &node.value, &g)?;
                    for (v, d) in inputs.iter().zip(ds) {
                        if self.rg(*v) {
                            acc(&mut grads, *v, d);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shared_node_gradients_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad(Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = g.weighted_sum(&[(x, 2.0), (x, 3.0)]).unwrap();
        let s = g.linearized(0.0, vec![(y, Tensor::full(&[1, 1, 1, 2], 1.0))]).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.var(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn local_attention_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::<f64>::uniform(&[1, 18, 3, 4], 1.0, &mut rng);
        let value = Tensor::<f64>::uniform(&[1, 4, 3, 4], 1.0, &mut rng);
        let probe = Tensor::<f64>::uniform(&[1, 4, 3, 4], 1.0, &mut rng);
        let f = |l: &Tensor<f64>, v: &Tensor<f64>| {
            let w = ops::local_softmax(l, 3, 2).unwrap();
            let o = ops::local_aggregate(&w, v, 3, 2).unwrap();
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let lv = g.input_with_grad(logits.clone());
        let vv = g.input_with_grad(value.clone());
        let o = g.local_attention(lv, vv, 3, 2).unwrap();
        let s = g.linearized(0.0, vec![(o, probe.clone())]).unwrap();
        let grads = g.backward(s).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p, &value) - f(&m, &value)) / (2.0 * h);
            assert!((fd - grads.var(lv).unwrap()[i]).abs() < 1e-7);
        }
        for i in 0..value.len() {
            let (mut p, mut m) = (value.clone(), value.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(&logits, &p) - f(&logits, &m)) / (2.0 * h);
            assert!((fd - grads.var(vv).unwrap()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn frozen_store_yields_no_gradients() {
        let mut store = ParamStore::<f64>::new(7);
        let id = store.add("w", Tensor::full(&[1, 1, 1, 1], 2.0));
        let mut g = Graph::new();
        g.freeze_store(7);
        let x = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let w = g.param(&store, id);
        let y = g.conv2d(x, w, None, ConvSpec::same(1)).unwrap();
        let s = g.linearized(0.0, vec![(y, Tensor::full(&[1, 1, 2, 2], 1.0))]).unwrap();
        assert!(g.backward(s).unwrap().param(id).is_none());
    }
}
