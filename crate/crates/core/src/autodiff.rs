//! Reverse-mode automatic differentiation over a fixed operation set.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is also a valid topological order. [`Graph::backward`] walks
//! the record once in reverse and returns the gradients of the leaves. A graph
//! can be differentiated once; call [`Graph::reset`] to record a new one.
//!
//! Broadcasting is deliberately narrow: per-channel vectors against `(N, C,
//! ...)` maps, per-plane `(N, C, 1, 1)` factors, and per-sample scalars.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::fft;
use crate::params::ParameterStore;
use crate::tensor::{check_shape, strides, Element, Tensor};
use crate::wavelet::{check_even, dwt_packed, idwt_packed};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Exact form `x * Phi(x)` with the Gaussian CDF, not the tanh fit.
    Gelu,
    Silu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    /// Gradient goes to the first maximal element in row-major order.
    Max,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    ChannelAdd { x: usize, v: usize },
    ChannelMul { x: usize, v: usize },
    PlaneMul { x: usize, s: usize },
    SampleScale { x: usize, factors: Vec<T> },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Sum(usize),
    Mean(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Act { x: usize, kind: Activation },
    GlobalPool { x: usize, argmax: Option<Vec<usize>> },
    Rfft2(usize),
    Irfft2(usize),
    ComplexMul { x: usize, w: usize },
    Dwt(usize),
    Idwt(usize),
    AvgPool2(usize),
    Upsample2(usize),
    SpatialNorm { x: usize, rstd: Vec<T> },
    Grn { x: usize, gnorm: Vec<T>, denom: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ChannelAdd { .. } => "channel_add",
            Op::ChannelMul { .. } => "channel_mul",
            Op::PlaneMul { .. } => "plane_mul",
            Op::SampleScale { .. } => "sample_scale",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::Act { .. } => "activation",
            Op::GlobalPool { .. } => "global_pool",
            Op::Rfft2(..) => "rfft2",
            Op::Irfft2(..) => "irfft2",
            Op::ComplexMul { .. } => "complex_mul",
            Op::Dwt(..) => "haar_dwt",
            Op::Idwt(..) => "haar_idwt",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Upsample2(..) => "upsample2",
            Op::SpatialNorm { .. } => "spatial_norm",
            Op::Grn { .. } => "grn",
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<BTreeMap<String, usize>>,
    consumed: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Element> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            consumed: Cell::new(false),
        }
    }

    /// Drops the recorded graph so a new pass can be recorded.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.params.get_mut().clear();
        self.consumed.set(false);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of recorded nodes per operation name (`"conv2d"`, `"haar_dwt"`, ...).
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for node in self.nodes.borrow().iter() {
            *counts.entry(node.op.name()).or_insert(0) += 1;
        }
        counts
    }

    pub fn op_count(&self, name: &str) -> usize {
        self.nodes.borrow().iter().filter(|n| n.op.name() == name).count()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradients.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// The leaf bound to parameter `name`; repeated calls return the same
    /// node so reused parameters accumulate into a single gradient.
    pub fn param(&self, store: &ParameterStore<T>, name: &str) -> Result<Var<'_, T>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { graph: self, id });
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.variable(value);
        self.params.borrow_mut().insert(name.to_string(), v.id);
        Ok(v)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::ForeignVariable);
        }
        if self.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
        }

        let mut leaves = BTreeMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &nodes[id].op) {
                let shape = nodes[id].value.shape().to_vec();
                leaves.insert(id, Tensor::from_vec(&shape, g)?);
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.borrow().clone(),
        })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Element> {
    leaves: BTreeMap<usize, Tensor<T>>,
    params: BTreeMap<String, usize>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|id| self.leaves.get(id))
    }

    /// Adds parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParameterStore<T>) -> Result<()> {
        for (name, id) in &self.params {
            if let Some(g) = self.leaves.get(id) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// `(outer, extent, inner)` decomposition of `shape` around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn backward_node<T: Element>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let wants = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if wants(*a) {
                accumulate(nodes, grads, *a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.iter().map(|&v| v * *c).collect()),
        Op::ChannelAdd { x, v } => {
            let shape = val(*x).shape();
            let (outer, c, inner) = around(shape, 1);
            accumulate(nodes, grads, *x, g.to_vec());
            if wants(*v) {
                let mut gv = vec![T::zero(); c];
                for o in 0..outer {
                    for (ch, slot) in gv.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *slot = *slot + g[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                accumulate(nodes, grads, *v, gv);
            }
        }
        Op::ChannelMul { x, v } => {
            let xv = val(*x);
            let vv = val(*v).data();
            let (outer, c, inner) = around(xv.shape(), 1);
            if wants(*x) {
                let mut gx = g.to_vec();
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        gx[base..base + inner].iter_mut().for_each(|e| *e = *e * vv[ch]);
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            if wants(*v) {
                let mut gv = vec![T::zero(); c];
                for o in 0..outer {
                    for (ch, slot) in gv.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        let s: T = g[base..base + inner]
                            .iter()
                            .zip(&xv.data()[base..base + inner])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        *slot = *slot + s;
                    }
                }
                accumulate(nodes, grads, *v, gv);
            }
        }
        Op::PlaneMul { x, s } => {
            let xv = val(*x);
            let sv = val(*s).data();
            let inner = xv.len() / sv.len();
            if wants(*x) {
                let gx = g
                    .chunks(inner)
                    .zip(sv)
                    .flat_map(|(gc, &f)| gc.iter().map(move |&e| e * f))
                    .collect();
                accumulate(nodes, grads, *x, gx);
            }
            if wants(*s) {
                let gs = g
                    .chunks(inner)
                    .zip(xv.data().chunks(inner))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                    .collect();
                accumulate(nodes, grads, *s, gs);
            }
        }
        Op::SampleScale { x, factors } => {
            let inner = g.len() / factors.len();
            let gx = g
                .chunks(inner)
                .zip(factors)
                .flat_map(|(gc, &f)| gc.iter().map(move |&e| e * f))
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Concat { inputs, axis } => {
            let out_shape = nodes[id].value.shape();
            let (outer, total, inner) = around(out_shape, *axis);
            let mut offset = 0;
            for &i in inputs {
                let ext = val(i).shape()[*axis];
                if wants(i) {
                    let mut gi = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    accumulate(nodes, grads, i, gi);
                }
                offset += ext;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = val(*x).shape();
            let (outer, total, inner) = around(in_shape, *axis);
            let len = nodes[id].value.shape()[*axis];
            let mut gx = vec![T::zero(); val(*x).len()];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (gx, _) = permute_data(g, nodes[id].value.shape(), &inv);
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, vec![g[0]; val(*x).len()]),
        Op::Mean(x) => {
            let n = val(*x).len();
            accumulate(nodes, grads, *x, vec![g[0] / T::of_f64(n as f64); n]);
        }
        Op::Conv2d { x, w, b, geom } => {
            let (dx, dw, db) = conv2d_backward(
                geom,
                val(*x).data(),
                val(*w).data(),
                g,
                wants(*x),
                wants(*w),
                b.is_some_and(wants),
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, dw);
            }
            if let (Some(b), Some(db)) = (b, db) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Act { x, kind } => {
            let gx = g
                .iter()
                .zip(val(*x).data())
                .map(|(&g, &v)| g * T::of_f64(kind.derivative(v.as_f64())))
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::GlobalPool { x, argmax } => {
            let xv = val(*x);
            let inner = xv.len() / g.len();
            let mut gx = vec![T::zero(); xv.len()];
            match argmax {
                None => {
                    let s = T::of_f64(1.0 / inner as f64);
                    for (p, &gp) in g.iter().enumerate() {
                        gx[p * inner..(p + 1) * inner].fill(gp * s);
                    }
                }
                Some(idx) => {
                    for (p, &gp) in g.iter().enumerate() {
                        gx[p * inner + idx[p]] = gp;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Rfft2(x) => {
            let s = val(*x).shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = val(*x).len() / (h * w);
            accumulate(nodes, grads, *x, fft::rfft2_adjoint(g, planes, h, w));
        }
        Op::Irfft2(x) => {
            let s = nodes[id].value.shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = nodes[id].value.len() / (h * w);
            accumulate(nodes, grads, *x, fft::irfft2_adjoint(g, planes, h, w));
        }
        Op::ComplexMul { x, w } => {
            let (xv, wv) = (val(*x).data(), val(*w).data());
            let wn = wv.len();
            if wants(*x) {
                let mut gx = vec![T::zero(); xv.len()];
                for (i, (gc, out)) in g.chunks_exact(2).zip(gx.chunks_exact_mut(2)).enumerate() {
                    let k = (2 * i) % wn;
                    let (wr, wi) = (wv[k], wv[k + 1]);
                    out[0] = gc[0] * wr + gc[1] * wi;
                    out[1] = gc[1] * wr - gc[0] * wi;
                }
                accumulate(nodes, grads, *x, gx);
            }
            if wants(*w) {
                let mut gw = vec![T::zero(); wn];
                for (i, gc) in g.chunks_exact(2).enumerate() {
                    let k = (2 * i) % wn;
                    let (xr, xi) = (xv[2 * i], xv[2 * i + 1]);
                    gw[k] = gw[k] + gc[0] * xr + gc[1] * xi;
                    gw[k + 1] = gw[k + 1] + gc[1] * xr - gc[0] * xi;
                }
                accumulate(nodes, grads, *w, gw);
            }
        }
        Op::Dwt(x) => {
            let s = val(*x).shape();
            let gx = idwt_packed(g, s[0], s[1], s[2] / 2, s[3] / 2);
            accumulate(nodes, grads, *x, gx);
        }
        Op::Idwt(x) => {
            let s = nodes[id].value.shape();
            let gx = dwt_packed(g, s[0], s[1], s[2], s[3]);
            accumulate(nodes, grads, *x, gx);
        }
        Op::AvgPool2(x) => {
            let s = val(*x).shape();
            let (h, w) = (s[2], s[3]);
            let (h2, w2) = (h / 2, w / 2);
            let quarter = T::of_f64(0.25);
            let mut gx = vec![T::zero(); val(*x).len()];
            for p in 0..s[0] * s[1] {
                for i in 0..h {
                    for j in 0..w {
                        gx[p * h * w + i * w + j] = g[p * h2 * w2 + (i / 2) * w2 + j / 2] * quarter;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Upsample2(x) => {
            let s = val(*x).shape();
            let (h2, w2) = (s[2], s[3]);
            let (h, w) = (2 * h2, 2 * w2);
            let mut gx = vec![T::zero(); val(*x).len()];
            for p in 0..s[0] * s[1] {
                for i in 0..h {
                    for j in 0..w {
                        let k = p * h2 * w2 + (i / 2) * w2 + j / 2;
                        gx[k] = gx[k] + g[p * h * w + i * w + j];
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::SpatialNorm { x, rstd } => {
            let xhat = nodes[id].value.data();
            let inner = xhat.len() / rstd.len();
            let inv_n = T::of_f64(1.0 / inner as f64);
            let mut gx = vec![T::zero(); xhat.len()];
            for (p, &r) in rstd.iter().enumerate() {
                let range = p * inner..(p + 1) * inner;
                let (gp, xp) = (&g[range.clone()], &xhat[range.clone()]);
                let mean_g = gp.iter().copied().sum::<T>() * inv_n;
                let mean_gx = gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                for ((o, &gi), &xi) in gx[range].iter_mut().zip(gp).zip(xp) {
                    *o = r * (gi - mean_g - xi * mean_gx);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Grn { x, gnorm, denom } => {
            let xv = val(*x);
            let s = xv.shape();
            let (n, c) = (s[0], s[1]);
            let inner = xv.len() / (n * c);
            let xd = xv.data();
            let mut gx = vec![T::zero(); xv.len()];
            let cf = T::of_f64(c as f64);
            for ni in 0..n {
                let d = denom[ni];
                let sums: Vec<T> = (0..c)
                    .map(|ch| {
                        let base = (ni * c + ch) * inner;
                        g[base..base + inner]
                            .iter()
                            .zip(&xd[base..base + inner])
                            .map(|(&a, &b)| a * b)
                            .sum()
                    })
                    .collect();
                let cross: T = (0..c).map(|ch| sums[ch] * gnorm[ni * c + ch]).sum();
                for ch in 0..c {
                    let gn = gnorm[ni * c + ch];
                    let scale = gn / d;
                    let d_g = sums[ch] / d - cross / (cf * d * d);
                    let base = (ni * c + ch) * inner;
                    for k in base..base + inner {
                        let via_norm = if gn > T::zero() { d_g * xd[k] / gn } else { T::zero() };
                        gx[k] = g[k] * scale + via_norm;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::ForeignVariable)
        }
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'g, T>, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn zip_with(&self, other: &Var<'g, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_graph(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(a.shape(), data)
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'g, T> {
        let c = T::of_f64(c);
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    fn check_channel_vec(&self, v: &Var<'g, T>, name: &'static str) -> Result<()> {
        self.same_graph(v)?;
        let (xs, vs) = (self.shape(), v.shape());
        if xs.len() < 2 || vs.len() != 1 || vs[0] != xs[1] {
            return Err(Error::shape(name, &xs, &vs));
        }
        Ok(())
    }

    fn per_channel(&self, v: &Var<'g, T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, vv) = (self.value(), v.value());
        let (outer, c, inner) = around(x.shape(), 1);
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                data[base..base + inner].iter_mut().for_each(|e| *e = f(*e, vv.data()[ch]));
            }
        }
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    /// `x + v[c]` with `v` of shape `(C)` broadcast over axis 1.
    pub fn channel_add(&self, v: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_channel_vec(v, "channel_add")?;
        let out = self.per_channel(v, |a, b| a + b);
        Ok(self.binary(v, out, Op::ChannelAdd { x: self.id, v: v.id }))
    }

    /// `x * v[c]` with `v` of shape `(C)` broadcast over axis 1.
    pub fn channel_mul(&self, v: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_channel_vec(v, "channel_mul")?;
        let out = self.per_channel(v, |a, b| a * b);
        Ok(self.binary(v, out, Op::ChannelMul { x: self.id, v: v.id }))
    }

    /// `x[n,c,..] * s[n,c]` for `x` of shape `(N, C, H, W)` and `s` of shape
    /// `(N, C, 1, 1)`.
    pub fn plane_mul(&self, s: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(s)?;
        let (xs, ss) = (self.shape(), s.shape());
        if xs.len() != 4 || ss != [xs[0], xs[1], 1, 1] {
            return Err(Error::shape("plane_mul", &xs, &ss));
        }
        let (x, sv) = (self.value(), s.value());
        let inner = xs[2] * xs[3];
        let data = x
            .data()
            .chunks(inner)
            .zip(sv.data())
            .flat_map(|(c, &f)| c.iter().map(move |&e| e * f))
            .collect();
        let out = Tensor::from_vec(&xs, data)?;
        Ok(self.binary(s, out, Op::PlaneMul { x: self.id, s: s.id }))
    }

    /// Multiplies sample `n` (slice along axis 0) by the constant
    /// `factors[n]`.
    pub fn sample_scale(&self, factors: Vec<T>) -> Result<Var<'g, T>> {
        let x = self.value();
        if factors.len() != x.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "sample_scale: {} factors for leading extent {}",
                factors.len(),
                x.shape()[0]
            )));
        }
        let inner = x.len() / factors.len();
        let data = x
            .data()
            .chunks(inner)
            .zip(&factors)
            .flat_map(|(c, &f)| c.iter().map(move |&e| e * f))
            .collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.unary(out, Op::SampleScale { x: self.id, factors }))
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            first.same_graph(p)?;
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, &s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = around(&out_shape, axis);
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(first.graph.push(
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow {start}..{} outside extent {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, total, inner) = around(&shape, axis);
        let x = self.value();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.unary(
            out,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Splits along `axis` into consecutive parts of the given extents.
    pub fn split(&self, axis: usize, parts: &[usize]) -> Result<Vec<Var<'g, T>>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "split",
                axis,
                rank: shape.len(),
            });
        }
        if parts.iter().sum::<usize>() != shape[axis] || parts.contains(&0) {
            return Err(Error::InvalidSplit {
                parts: parts.to_vec(),
                extent: shape[axis],
            });
        }
        let mut start = 0;
        parts
            .iter()
            .map(|&len| {
                let v = self.narrow(axis, start, len);
                start += len;
                v
            })
            .collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "permutation {perm:?} invalid for rank {}",
                shape.len()
            )));
        }
        let (data, out_shape) = permute_data(self.value().data(), &shape, perm);
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.unary(
            out,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let s: T = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g, T> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        let m = s / T::of_f64(x.len() as f64);
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Stride-1 "same" convolution; see [`crate::conv`].
    pub fn conv2d(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>, groups: usize) -> Result<Var<'g, T>> {
        self.same_graph(weight)?;
        let geom = ConvGeom::new(&self.shape(), &weight.shape(), groups)?;
        if let Some(b) = bias {
            self.same_graph(b)?;
            if b.shape() != [geom.cout] {
                return Err(Error::Conv(format!(
                    "bias shape {:?} does not match {} output channels",
                    b.shape(),
                    geom.cout
                )));
            }
        }
        let bias_val = bias.map(|b| b.value());
        let out = conv2d_forward(
            &geom,
            self.value().data(),
            weight.value().data(),
            bias_val.as_ref().map(|b| b.data()),
        );
        let out = Tensor::from_vec(&[geom.batch, geom.cout, geom.height, geom.width], out)?;
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.graph.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    pub fn activation(&self, kind: Activation) -> Var<'g, T> {
        let out = self.value().map(|v| T::of_f64(kind.apply(v.as_f64())));
        self.unary(out, Op::Act { x: self.id, kind })
    }

    pub fn gelu(&self) -> Var<'g, T> {
        self.activation(Activation::Gelu)
    }

    pub fn silu(&self) -> Var<'g, T> {
        self.activation(Activation::Silu)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.activation(Activation::Sigmoid)
    }

    fn spatial_dims(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::InvalidArgument(format!("{op}: expected (N, C, H, W), got {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// Per-plane global pooling `(N, C, H, W)` -> `(N, C, 1, 1)`.
    pub fn global_pool(&self, kind: PoolKind) -> Result<Var<'g, T>> {
        let (n, c, h, w) = self.spatial_dims("global_pool")?;
        let x = self.value();
        let inner = h * w;
        let (vals, argmax) = match kind {
            PoolKind::Avg => {
                let inv = T::of_f64(1.0 / inner as f64);
                let vals = x.data().chunks(inner).map(|p| p.iter().copied().sum::<T>() * inv).collect();
                (vals, None)
            }
            PoolKind::Max => {
                let mut vals = Vec::with_capacity(n * c);
                let mut idx = Vec::with_capacity(n * c);
                for p in x.data().chunks(inner) {
                    let mut best = 0;
                    for (i, &v) in p.iter().enumerate() {
                        if v > p[best] {
                            best = i;
                        }
                    }
                    vals.push(p[best]);
                    idx.push(best);
                }
                (vals, Some(idx))
            }
        };
        let out = Tensor::from_vec(&[n, c, 1, 1], vals)?;
        Ok(self.unary(out, Op::GlobalPool { x: self.id, argmax }))
    }

    /// Real 2D FFT over the last two axes: `(.., H, W)` -> `(.., H, W/2+1, 2)`.
    pub fn rfft2(&self) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::InvalidArgument(format!("rfft2: rank {} < 2", s.len())));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value().len() / (h * w);
        let data = fft::rfft2(self.value().data(), planes, h, w);
        let mut out_shape = s[..s.len() - 1].to_vec();
        out_shape.extend_from_slice(&[fft::half_width(w), 2]);
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.unary(out, Op::Rfft2(self.id)))
    }

    /// Inverse of [`Var::rfft2`]; `width` is the original last extent.
    pub fn irfft2(&self, width: usize) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() < 3 || s[s.len() - 1] != 2 {
            return Err(Error::InvalidArgument(format!(
                "irfft2: expected (.., H, W/2+1, 2), got {s:?}"
            )));
        }
        let r = s.len();
        let (h, wf) = (s[r - 3], s[r - 2]);
        if width == 0 || fft::half_width(width) != wf {
            return Err(Error::InvalidArgument(format!(
                "irfft2: target width {width} does not match {wf} spectrum columns"
            )));
        }
        let planes = self.value().len() / (h * wf * 2);
        let data = fft::irfft2(self.value().data(), planes, h, width);
        let mut out_shape = s[..r - 2].to_vec();
        out_shape[r - 3] = h;
        out_shape.push(width);
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.unary(out, Op::Irfft2(self.id)))
    }

    /// Complex product of interleaved spectra; `w`'s shape must be a suffix
    /// of `self`'s and is broadcast over the leading axes.
    pub fn complex_mul(&self, w: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(w)?;
        let (xs, ws) = (self.shape(), w.shape());
        if ws.len() > xs.len() || ws.last() != Some(&2) || xs[xs.len() - ws.len()..] != ws[..] {
            return Err(Error::shape("complex_mul", &xs, &ws));
        }
        let (x, wv) = (self.value(), w.value());
        let wn = wv.len();
        let mut data = vec![T::zero(); x.len()];
        for (i, (xc, out)) in x.data().chunks_exact(2).zip(data.chunks_exact_mut(2)).enumerate() {
            let k = (2 * i) % wn;
            let (wr, wi) = (wv.data()[k], wv.data()[k + 1]);
            out[0] = xc[0] * wr - xc[1] * wi;
            out[1] = xc[0] * wi + xc[1] * wr;
        }
        let out = Tensor::from_vec(&xs, data)?;
        Ok(self.binary(w, out, Op::ComplexMul { x: self.id, w: w.id }))
    }

    /// Haar analysis with channel-packed subbands `(N, 4C, H/2, W/2)`.
    pub fn haar_dwt(&self) -> Result<Var<'g, T>> {
        let (n, c, h, w) = self.spatial_dims("haar_dwt")?;
        check_even(h, w)?;
        let out = Tensor::from_vec(&[n, 4 * c, h / 2, w / 2], dwt_packed(self.value().data(), n, c, h, w))?;
        Ok(self.unary(out, Op::Dwt(self.id)))
    }

    /// Inverse of [`Var::haar_dwt`].
    pub fn haar_idwt(&self) -> Result<Var<'g, T>> {
        let (n, c4, h, w) = self.spatial_dims("haar_idwt")?;
        if c4 % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "haar_idwt: {c4} channels do not hold four subbands"
            )));
        }
        let c = c4 / 4;
        let out = Tensor::from_vec(&[n, c, 2 * h, 2 * w], idwt_packed(self.value().data(), n, c, h, w))?;
        Ok(self.unary(out, Op::Idwt(self.id)))
    }

    /// Non-overlapping 2x2 mean.
    pub fn avg_pool2(&self) -> Result<Var<'g, T>> {
        let (n, c, h, w) = self.spatial_dims("avg_pool2")?;
        check_even(h, w)?;
        let (h2, w2) = (h / 2, w / 2);
        let x = self.value();
        let quarter = T::of_f64(0.25);
        let mut data = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    data[p * h2 * w2 + i * w2 + j] = s * quarter;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h2, w2], data)?;
        Ok(self.unary(out, Op::AvgPool2(self.id)))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&self) -> Result<Var<'g, T>> {
        let (n, c, h2, w2) = self.spatial_dims("upsample2")?;
        let (h, w) = (2 * h2, 2 * w2);
        let x = self.value();
        let mut data = vec![T::zero(); n * c * h * w];
        for p in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    data[p * h * w + i * w + j] = x.data()[p * h2 * w2 + (i / 2) * w2 + j / 2];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], data)?;
        Ok(self.unary(out, Op::Upsample2(self.id)))
    }

    /// Zero-mean, unit-variance normalization of every `H x W` plane
    /// (biased variance, `eps` added before the square root).
    pub fn spatial_norm(&self, eps: f64) -> Result<Var<'g, T>> {
        let (_, _, h, w) = self.spatial_dims("spatial_norm")?;
        let x = self.value();
        let inner = h * w;
        let inv_n = 1.0 / inner as f64;
        let mut data = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(x.len() / inner);
        for p in x.data().chunks(inner) {
            let mean = p.iter().map(|v| v.as_f64()).sum::<f64>() * inv_n;
            let var = p.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() * inv_n;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(T::of_f64(r));
            data.extend(p.iter().map(|v| T::of_f64((v.as_f64() - mean) * r)));
        }
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.unary(out, Op::SpatialNorm { x: self.id, rstd }))
    }

    /// Global response normalization core: `x[n,c] * G[n,c] / (mean_c G[n,c]
    /// + eps)` with `G` the spatial L2 norm of each plane.
    pub fn grn_normalize(&self, eps: f64) -> Result<Var<'g, T>> {
        let (n, c, h, w) = self.spatial_dims("grn")?;
        let x = self.value();
        let inner = h * w;
        let mut gnorm = Vec::with_capacity(n * c);
        let mut denom = Vec::with_capacity(n);
        let mut data = x.data().to_vec();
        for ni in 0..n {
            let norms: Vec<f64> = (0..c)
                .map(|ch| {
                    let base = (ni * c + ch) * inner;
                    x.data()[base..base + inner].iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            let d = norms.iter().sum::<f64>() / c as f64 + eps;
            for (ch, &gn) in norms.iter().enumerate() {
                let scale = T::of_f64(gn / d);
                let base = (ni * c + ch) * inner;
                data[base..base + inner].iter_mut().for_each(|e| *e = *e * scale);
                gnorm.push(T::of_f64(gn));
            }
            denom.push(T::of_f64(d));
        }
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.unary(
            out,
            Op::Grn {
                x: self.id,
                gnorm,
                denom,
            },
        ))
    }

    /// Mean squared error against `target`.
    pub fn mse(&self, target: &Var<'g, T>) -> Result<Var<'g, T>> {
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean())
    }
}

/// Plain-tensor permutation, shared with callers that do not record.
pub fn permute_tensor<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    check_shape(x.shape())?;
    let (data, shape) = permute_data(x.data(), x.shape(), perm);
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, v).unwrap()
    }

    #[test]
    fn add_and_mean() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[1, 2], &[3.0, 4.0]));
        assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).mean();
        assert_eq!(m.value().item(), Some(2.5));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::<f64>::new();
        let x = g.variable(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let grads = g.backward(x.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let g = Graph::<f64>::new();
        let vals = [1.0, -2.0, 3.0, 0.5];
        let x = g.variable(t(&[4], &vals));
        let loss = x.mul(&x).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        let want: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data(), &want[..]);
    }

    #[test]
    fn backward_contract_errors() {
        let g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = x.sum();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn reset_allows_new_recording() {
        let mut g = Graph::<f64>::new();
        {
            let x = g.variable(t(&[1], &[2.0]));
            g.backward(x.sum()).unwrap();
        }
        g.reset();
        let x = g.variable(t(&[1], &[3.0]));
        assert!(g.backward(x.mul(&x).unwrap().sum()).is_ok());
    }

    #[test]
    fn split_concat_round_trip() {
        let g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = g.constant(t(&[2, 4, 3], &data));
        for axis in 0..3 {
            let ext = x.shape()[axis];
            let parts = if ext == 2 { vec![1, 1] } else { vec![1, ext - 1] };
            let pieces = x.split(axis, &parts).unwrap();
            let back = Var::concat(&pieces, axis).unwrap();
            assert_eq!(back.value().data(), &data[..]);
        }
        assert!(matches!(x.split(1, &[1, 2]), Err(Error::InvalidSplit { .. })));
        assert!(matches!(x.split(3, &[2]), Err(Error::AxisOutOfRange { .. })));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
        let v = g.constant(Tensor::zeros(&[3]));
        assert!(a.channel_mul(&v).is_err());
    }

    #[test]
    fn permute_inverts() {
        let g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        // element (i, j, k) moves to (k, i, j)
        assert_eq!(p.value().data()[(3 * 2 + 1) * 3 + 2], data[(3 + 2) * 4 + 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value().data(), &data[..]);
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn activations_at_known_points() {
        assert_eq!(Activation::Silu.apply(0.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        let s1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((Activation::Silu.apply(1.0) - s1).abs() < 1e-15);
        assert!((Activation::Silu.apply(1.0) - 0.731058).abs() < 1e-6);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
    }

    #[test]
    fn pooling() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.global_pool(PoolKind::Avg).unwrap().value().data(), &[2.5]);
        assert_eq!(x.global_pool(PoolKind::Max).unwrap().value().data(), &[4.0]);
        let neg = g.constant(t(&[1, 1, 2, 2], &[-3.0, -1.0, -2.0, -4.0]));
        assert_eq!(neg.global_pool(PoolKind::Max).unwrap().value().data(), &[-1.0]);
        let c = g.constant(Tensor::full(&[1, 2, 3, 3], 5.0));
        assert_eq!(c.global_pool(PoolKind::Avg).unwrap().value().data(), &[5.0, 5.0]);
        assert_eq!(c.global_pool(PoolKind::Max).unwrap().value().data(), &[5.0, 5.0]);
    }

    #[test]
    fn max_pool_gradient_goes_to_first_maximum() {
        let g = Graph::<f64>::new();
        let x = g.variable(t(&[1, 1, 2, 2], &[1.0, 4.0, 4.0, 0.0]));
        let grads = g.backward(x.global_pool(PoolKind::Max).unwrap().sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let g = Graph::<f64>::new();
        let mut x = Tensor::<f64>::normal(&[1, 3, 5, 5], 0.0, 1.0, 1).unwrap();
        x.data_mut()[25..50].fill(0.0);
        let w = Tensor::<f64>::normal(&[3, 1, 3, 3], 0.0, 1.0, 2).unwrap();
        let y = g.constant(x).conv2d(&g.constant(w), None, 3).unwrap();
        assert!(y.value().data()[25..50].iter().all(|&v| v == 0.0));
        assert!(y.value().data()[..25].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn identity_kernel() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        assert_eq!(x.conv2d(&w, None, 1).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn irfft2_rejects_wrong_width() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 6]));
        let s = x.rfft2().unwrap();
        assert_eq!(s.shape(), vec![1, 1, 4, 4, 2]);
        assert!(s.irfft2(5).is_err());
        assert!(s.irfft2(7).is_ok());
        assert!(s.irfft2(6).is_ok());
    }

    #[test]
    fn constant_image_dc_bin() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 6], 1.5));
        let s = x.rfft2().unwrap().value();
        assert_eq!(s.data()[0], 1.5 * 24.0);
        assert!(s.data()[1..].iter().all(|v| v.abs() < 1e-12));
    }
}
