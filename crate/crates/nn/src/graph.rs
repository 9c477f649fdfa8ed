//! Eager tape autodiff.
//!
//! A [`Graph`] is an append-only list of nodes; building an op computes its
//! value immediately and records how it was made. [`Graph::backward`] walks
//! the tape in reverse and returns gradients for every parameter leaf that
//! was touched. Parameters live outside the graph in a [`Params`] store and
//! are copied in by name, so one store can feed many graphs (including in
//! parallel, since graphs only borrow the store during construction).

use crate::elem::Elem;
use crate::ops;
use indexmap::IndexMap;
use ndarray::{ArrayD, Axis, IxDyn, Slice};

pub type Id = usize;

/// Named parameter store. Iteration order is insertion order, which is
/// deterministic because registration happens in model-construction order.
#[derive(Debug, Clone)]
pub struct Params<E: Elem> {
    map: IndexMap<String, ArrayD<E>>,
}

impl<E: Elem> Default for Params<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Params<E> {
    pub fn new() -> Self {
        Params { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<E>) {
        let prev = self.map.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<E> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<E> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<E>> {
        self.map.shift_remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<E>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<E>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Convert every tensor to another element type (f32 store -> f64 for
    /// numeric gradient checking and back).
    pub fn cast<F: Elem>(&self) -> Params<F> {
        let mut out = Params::new();
        for (k, v) in self.iter() {
            out.insert(k, v.mapv(|x| F::from_f64(x.to_f64())));
        }
        out
    }
}

/// Per-parameter gradients keyed by name.
#[derive(Debug, Clone)]
pub struct Grads<E: Elem> {
    pub map: IndexMap<String, ArrayD<E>>,
}

impl<E: Elem> Default for Grads<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Grads<E> {
    pub fn new() -> Self {
        Grads { map: IndexMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<E>> {
        self.map.get(name)
    }

    fn accumulate(&mut self, name: &str, g: ArrayD<E>) {
        match self.map.get_mut(name) {
            Some(acc) => *acc = &*acc + &g,
            None => {
                self.map.insert(name.to_string(), g);
            }
        }
    }

    /// Elementwise sum with another gradient set (used to merge per-sample
    /// gradients; callers merge in fixed index order).
    pub fn add_assign(&mut self, other: &Grads<E>) {
        for (k, v) in other.map.iter() {
            self.accumulate(k, v.clone());
        }
    }

    pub fn scale(&mut self, s: E) {
        for v in self.map.values_mut() {
            v.mapv_inplace(|x| x * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in self.map.values() {
            for &x in v.iter() {
                let xf = x.to_f64();
                acc += xf * xf;
            }
        }
        acc.sqrt()
    }

    /// Scale all gradients down so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(E::from_f64(max_norm / norm));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Sqr,
    Abs,
    Sigmoid,
    Tanh,
    Silu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryScalar {
    Scale,
    AddScalar,
    LeakyRelu,
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary { kind: Unary, x: Id },
    UnaryScalar { kind: UnaryScalar, x: Id, a: f64, b: f64 },
    Binary { kind: Binary, a: Id, b: Id },
    MatMul { a: Id, b: Id, ta: bool, tb: bool },
    Conv2d { x: Id, w: Id, stride: usize, pad: usize },
    AddChanBias { x: Id, b: Id },
    AddRowBias { x: Id, b: Id },
    RowScale { x: Id, s: Id },
    Upsample2x { x: Id },
    GroupNorm { x: Id, gamma: Id, beta: Id, groups: usize, eps: f64 },
    LayerNormRows { x: Id, gamma: Id, beta: Id, eps: f64 },
    SoftmaxRows { x: Id },
    CrossEntropyRows { logits: Id, targets: Vec<usize> },
    Gather { w: Id, idx: Vec<usize> },
    Concat { parts: Vec<Id>, axis: usize },
    SliceAxis { x: Id, axis: usize, start: usize, len: usize },
    Reshape { x: Id },
    Transpose2 { x: Id },
    Sum { x: Id },
    Mean { x: Id },
    MeanRows { x: Id },
}

struct Node<E: Elem> {
    value: ArrayD<E>,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
    param_leaves: IndexMap<String, Id>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_leaves: IndexMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: Id) -> &ArrayD<E> {
        &self.nodes[id].value
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, id: Id) -> E {
        let v = &self.nodes[id].value;
        assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        *v.iter().next().expect("non-empty")
    }

    fn push(&mut self, value: ArrayD<E>, op: Op, needs_grad: bool) -> Id {
        self.nodes.push(Node { value, op, needs_grad, param: None });
        self.nodes.len() - 1
    }

    fn ng(&self, id: Id) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: ArrayD<E>) -> Id {
        self.push(value, Op::Leaf, false)
    }

    /// Scalar constant.
    pub fn scalar_input(&mut self, v: E) -> Id {
        self.input(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Trainable parameter leaf; repeated requests return the same node.
    pub fn param(&mut self, params: &Params<E>, name: &str) -> Id {
        if let Some(&id) = self.param_leaves.get(name) {
            return id;
        }
        let value = params.get(name).clone();
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id].param = Some(name.to_string());
        self.param_leaves.insert(name.to_string(), id);
        id
    }

    /// Parameter used without gradient (frozen tower, discriminator inside
    /// the generator step, fixed projections).
    pub fn frozen(&mut self, params: &Params<E>, name: &str) -> Id {
        self.input(params.get(name).clone())
    }

    fn unary(&mut self, kind: Unary, x: Id) -> Id {
        let xv = &self.nodes[x].value;
        let value = match kind {
            Unary::Neg => xv.mapv(|v| -v),
            Unary::Exp => xv.mapv(|v| v.exp()),
            Unary::Ln => xv.mapv(|v| v.ln()),
            Unary::Sqrt => xv.mapv(|v| v.sqrt()),
            Unary::Sqr => xv.mapv(|v| v * v),
            Unary::Abs => xv.mapv(|v| v.abs()),
            Unary::Sigmoid => xv.mapv(sigmoid),
            Unary::Tanh => xv.mapv(|v| v.tanh()),
            Unary::Silu => xv.mapv(|v| v * sigmoid(v)),
            Unary::Relu => xv.mapv(|v| if v > E::zero() { v } else { E::zero() }),
        };
        let ng = self.ng(x);
        self.push(value, Op::Unary { kind, x }, ng)
    }

    pub fn neg(&mut self, x: Id) -> Id {
        self.unary(Unary::Neg, x)
    }
    pub fn exp(&mut self, x: Id) -> Id {
        self.unary(Unary::Exp, x)
    }
    pub fn ln(&mut self, x: Id) -> Id {
        self.unary(Unary::Ln, x)
    }
    pub fn sqrt(&mut self, x: Id) -> Id {
        self.unary(Unary::Sqrt, x)
    }
    pub fn sqr(&mut self, x: Id) -> Id {
        self.unary(Unary::Sqr, x)
    }
    pub fn abs(&mut self, x: Id) -> Id {
        self.unary(Unary::Abs, x)
    }
    pub fn sigmoid(&mut self, x: Id) -> Id {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn tanh(&mut self, x: Id) -> Id {
        self.unary(Unary::Tanh, x)
    }
    pub fn silu(&mut self, x: Id) -> Id {
        self.unary(Unary::Silu, x)
    }
    pub fn relu(&mut self, x: Id) -> Id {
        self.unary(Unary::Relu, x)
    }

    fn unary_scalar(&mut self, kind: UnaryScalar, x: Id, a: f64, b: f64) -> Id {
        let ae = E::from_f64(a);
        let be = E::from_f64(b);
        let xv = &self.nodes[x].value;
        let value = match kind {
            UnaryScalar::Scale => xv.mapv(|v| v * ae),
            UnaryScalar::AddScalar => xv.mapv(|v| v + ae),
            UnaryScalar::LeakyRelu => xv.mapv(|v| if v > E::zero() { v } else { v * ae }),
            UnaryScalar::Clamp => xv.mapv(|v| {
                if v < ae {
                    ae
                } else if v > be {
                    be
                } else {
                    v
                }
            }),
        };
        let ng = self.ng(x);
        self.push(value, Op::UnaryScalar { kind, x, a, b }, ng)
    }

    pub fn scale(&mut self, x: Id, a: f64) -> Id {
        self.unary_scalar(UnaryScalar::Scale, x, a, 0.0)
    }
    pub fn add_scalar(&mut self, x: Id, a: f64) -> Id {
        self.unary_scalar(UnaryScalar::AddScalar, x, a, 0.0)
    }
    pub fn leaky_relu(&mut self, x: Id, slope: f64) -> Id {
        self.unary_scalar(UnaryScalar::LeakyRelu, x, slope, 0.0)
    }
    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Id, lo: f64, hi: f64) -> Id {
        self.unary_scalar(UnaryScalar::Clamp, x, lo, hi)
    }

    fn binary(&mut self, kind: Binary, a: Id, b: Id) -> Id {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(
            av.shape(),
            bv.shape(),
            "elementwise {:?} on mismatched shapes {:?} vs {:?}",
            kind,
            av.shape(),
            bv.shape()
        );
        let value = match kind {
            Binary::Add => av + bv,
            Binary::Sub => av - bv,
            Binary::Mul => av * bv,
            Binary::Div => av / bv,
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Binary { kind, a, b }, ng)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Id, b: Id) -> Id {
        self.binary(Binary::Div, a, b)
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        self.matmul_flags(a, b, false, false)
    }

    pub fn matmul_flags(&mut self, a: Id, b: Id, ta: bool, tb: bool) -> Id {
        let value = ops::matmul(&self.nodes[a].value, &self.nodes[b].value, ta, tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn conv2d(&mut self, x: Id, w: Id, stride: usize, pad: usize) -> Id {
        let value = ops::conv2d(&self.nodes[x].value, &self.nodes[w].value, stride, pad);
        let ng = self.ng(x) || self.ng(w);
        self.push(value, Op::Conv2d { x, w, stride, pad }, ng)
    }

    /// `(C,H,W) + bias(C)` broadcast over the spatial axes.
    pub fn add_chan_bias(&mut self, x: Id, b: Id) -> Id {
        let xv = &self.nodes[x].value;
        let bv = &self.nodes[b].value;
        assert_eq!(xv.ndim(), 3, "add_chan_bias expects (C,H,W)");
        assert_eq!(bv.len(), xv.shape()[0], "bias length vs channels");
        let mut value = xv.clone();
        for (ci, mut plane) in value.axis_iter_mut(Axis(0)).enumerate() {
            let bc = bv[[ci]];
            plane.mapv_inplace(|v| v + bc);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(value, Op::AddChanBias { x, b }, ng)
    }

    /// `(R,D) + bias(D)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Id, b: Id) -> Id {
        let xv = &self.nodes[x].value;
        let bv = &self.nodes[b].value;
        assert_eq!(xv.ndim(), 2, "add_row_bias expects (R,D)");
        assert_eq!(bv.len(), xv.shape()[1], "bias length vs row width");
        let mut value = xv.clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v + bv[[j]];
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(value, Op::AddRowBias { x, b }, ng)
    }

    /// `(R,D) * s(R,1)` broadcast over columns: every row scaled by its own
    /// scalar.
    pub fn row_scale(&mut self, x: Id, s: Id) -> Id {
        let xv = &self.nodes[x].value;
        let sv = &self.nodes[s].value;
        assert_eq!(xv.ndim(), 2, "row_scale expects (R,D)");
        assert_eq!(sv.len(), xv.shape()[0], "scale length vs rows");
        let mut value = xv.clone();
        for (ri, mut row) in value.axis_iter_mut(Axis(0)).enumerate() {
            let sr = sv.as_slice_memory_order().expect("contiguous scale")[ri];
            row.mapv_inplace(|v| v * sr);
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(value, Op::RowScale { x, s }, ng)
    }

    pub fn upsample2x(&mut self, x: Id) -> Id {
        let value = ops::upsample2x(&self.nodes[x].value);
        let ng = self.ng(x);
        self.push(value, Op::Upsample2x { x }, ng)
    }

    pub fn group_norm(&mut self, x: Id, gamma: Id, beta: Id, groups: usize) -> Id {
        let eps = 1e-5;
        let value = ops::group_norm(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            groups,
            eps,
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(value, Op::GroupNorm { x, gamma, beta, groups, eps }, ng)
    }

    pub fn layer_norm_rows(&mut self, x: Id, gamma: Id, beta: Id) -> Id {
        let eps = 1e-5;
        let value = ops::layer_norm_rows(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            eps,
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(value, Op::LayerNormRows { x, gamma, beta, eps }, ng)
    }

    pub fn softmax_rows(&mut self, x: Id) -> Id {
        let value = ops::softmax_rows(&self.nodes[x].value);
        let ng = self.ng(x);
        self.push(value, Op::SoftmaxRows { x }, ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy_rows(&mut self, logits: Id, targets: Vec<usize>) -> Id {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.ndim(), 2, "cross entropy expects (R,C) logits");
        let (r, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(targets.len(), r, "one target per row");
        let p = ops::softmax_rows(lv);
        let mut nll = E::zero();
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c, "target {t} out of range for {c} classes");
            let pi = p[[i, t]];
            // softmax output is strictly positive; ln is safe
            nll = nll - pi.ln();
        }
        let value = ArrayD::from_elem(IxDyn(&[]), nll / E::from_f64(r as f64));
        let ng = self.ng(logits);
        self.push(value, Op::CrossEntropyRows { logits, targets }, ng)
    }

    /// Select rows of a `(V,D)` table; rows may repeat.
    pub fn gather(&mut self, w: Id, idx: Vec<usize>) -> Id {
        let wv = &self.nodes[w].value;
        assert_eq!(wv.ndim(), 2, "gather expects (V,D) table");
        let (v, d) = (wv.shape()[0], wv.shape()[1]);
        let mut out = ndarray::Array2::<E>::zeros((idx.len(), d));
        for (i, &ix) in idx.iter().enumerate() {
            assert!(ix < v, "gather index {ix} out of range {v}");
            for j in 0..d {
                out[(i, j)] = wv[[ix, j]];
            }
        }
        let ng = self.ng(w);
        self.push(out.into_dyn(), Op::Gather { w, idx }, ng)
    }

    pub fn concat(&mut self, parts: &[Id], axis: usize) -> Id {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    pub fn slice_axis(&mut self, x: Id, axis: usize, start: usize, len: usize) -> Id {
        let xv = &self.nodes[x].value;
        assert!(start + len <= xv.shape()[axis], "slice out of range");
        let value = xv
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let ng = self.ng(x);
        self.push(value, Op::SliceAxis { x, axis, start, len }, ng)
    }

    pub fn reshape(&mut self, x: Id, shape: &[usize]) -> Id {
        let value = ops::reshaped(&self.nodes[x].value, shape);
        let ng = self.ng(x);
        self.push(value, Op::Reshape { x }, ng)
    }

    pub fn transpose2(&mut self, x: Id) -> Id {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.ndim(), 2, "transpose2 expects 2-d");
        let value = xv
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d")
            .t()
            .to_owned()
            .into_dyn();
        let ng = self.ng(x);
        self.push(value, Op::Transpose2 { x }, ng)
    }

    pub fn sum(&mut self, x: Id) -> Id {
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[x].value.sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Id) -> Id {
        let n = self.nodes[x].value.len();
        assert!(n > 0, "mean of empty node");
        let value =
            ArrayD::from_elem(IxDyn(&[]), self.nodes[x].value.sum() / E::from_f64(n as f64));
        let ng = self.ng(x);
        self.push(value, Op::Mean { x }, ng)
    }

    /// Column means of `(R,C)` -> `(C)`.
    pub fn mean_rows(&mut self, x: Id) -> Id {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.ndim(), 2, "mean_rows expects (R,C)");
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = ndarray::Array1::<E>::zeros(c);
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + xv[[i, j]];
            }
        }
        let rn = E::from_f64(r as f64);
        out.mapv_inplace(|v| v / rn);
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::MeanRows { x }, ng)
    }

    /// Reverse-mode sweep from a scalar loss node. Returns gradients for all
    /// parameter leaves reachable from `loss`.
    pub fn backward(&self, loss: Id) -> Grads<E> {
        assert_eq!(self.nodes[loss].value.len(), 1, "backward from non-scalar node");
        let mut grads: Vec<Option<ArrayD<E>>> = vec![None; loss + 1];
        grads[loss] = Some(ArrayD::from_elem(self.nodes[loss].value.raw_dim(), E::one()));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = Grads::new();
        for (name, &id) in self.param_leaves.iter() {
            if id <= loss {
                if let Some(g) = grads[id].take() {
                    out.accumulate(name, g);
                }
            }
        }
        out
    }

    fn accum(grads: &mut [Option<ArrayD<E>>], id: Id, g: ArrayD<E>) {
        match &mut grads[id] {
            Some(acc) => *acc = &*acc + &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: Id, g: &ArrayD<E>, grads: &mut Vec<Option<ArrayD<E>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                if !self.ng(*x) {
                    return;
                }
                let xv = &self.nodes[*x].value;
                let yv = &node.value;
                let gx = match kind {
                    Unary::Neg => g.mapv(|v| -v),
                    Unary::Exp => g * yv,
                    Unary::Ln => g / xv,
                    Unary::Sqrt => {
                        let half = E::from_f64(0.5);
                        ndarray::Zip::from(g).and(yv).map_collect(|&gv, &y| gv * half / y)
                    }
                    Unary::Sqr => {
                        let two = E::from_f64(2.0);
                        ndarray::Zip::from(g).and(xv).map_collect(|&gv, &x| gv * two * x)
                    }
                    Unary::Abs => ndarray::Zip::from(g).and(xv).map_collect(|&gv, &x| {
                        if x > E::zero() {
                            gv
                        } else if x < E::zero() {
                            -gv
                        } else {
                            E::zero()
                        }
                    }),
                    Unary::Sigmoid => ndarray::Zip::from(g)
                        .and(yv)
                        .map_collect(|&gv, &y| gv * y * (E::one() - y)),
                    Unary::Tanh => ndarray::Zip::from(g)
                        .and(yv)
                        .map_collect(|&gv, &y| gv * (E::one() - y * y)),
                    Unary::Silu => ndarray::Zip::from(g).and(xv).map_collect(|&gv, &x| {
                        let s = sigmoid(x);
                        gv * s * (E::one() + x * (E::one() - s))
                    }),
                    Unary::Relu => ndarray::Zip::from(g)
                        .and(xv)
                        .map_collect(|&gv, &x| if x > E::zero() { gv } else { E::zero() }),
                };
                Self::accum(grads, *x, gx);
            }
            Op::UnaryScalar { kind, x, a, b } => {
                if !self.ng(*x) {
                    return;
                }
                let ae = E::from_f64(*a);
                let be = E::from_f64(*b);
                let xv = &self.nodes[*x].value;
                let gx = match kind {
                    UnaryScalar::Scale => g.mapv(|v| v * ae),
                    UnaryScalar::AddScalar => g.clone(),
                    UnaryScalar::LeakyRelu => ndarray::Zip::from(g)
                        .and(xv)
                        .map_collect(|&gv, &x| if x > E::zero() { gv } else { gv * ae }),
                    UnaryScalar::Clamp => ndarray::Zip::from(g).and(xv).map_collect(|&gv, &x| {
                        if x > ae && x < be {
                            gv
                        } else {
                            E::zero()
                        }
                    }),
                };
                Self::accum(grads, *x, gx);
            }
            Op::Binary { kind, a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                match kind {
                    Binary::Add => {
                        if self.ng(*a) {
                            Self::accum(grads, *a, g.clone());
                        }
                        if self.ng(*b) {
                            Self::accum(grads, *b, g.clone());
                        }
                    }
                    Binary::Sub => {
                        if self.ng(*a) {
                            Self::accum(grads, *a, g.clone());
                        }
                        if self.ng(*b) {
                            Self::accum(grads, *b, g.mapv(|v| -v));
                        }
                    }
                    Binary::Mul => {
                        if self.ng(*a) {
                            Self::accum(grads, *a, g * bv);
                        }
                        if self.ng(*b) {
                            Self::accum(grads, *b, g * av);
                        }
                    }
                    Binary::Div => {
                        if self.ng(*a) {
                            Self::accum(grads, *a, g / bv);
                        }
                        if self.ng(*b) {
                            let gb = ndarray::Zip::from(g)
                                .and(av)
                                .and(bv)
                                .map_collect(|&gv, &a, &b| -gv * a / (b * b));
                            Self::accum(grads, *b, gb);
                        }
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                // y = op(A) op(B); d op(A) = g op(B)^T, d op(B) = op(A)^T g.
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if self.ng(a) {
                    let da = if ta {
                        // A = op(A)^T: dA = (d op(A))^T = op(B) g^T
                        ops::matmul(&self.nodes[b].value, g, tb, true)
                    } else {
                        ops::matmul(g, &self.nodes[b].value, false, !tb)
                    };
                    Self::accum(grads, a, da);
                }
                if self.ng(b) {
                    let db = if tb {
                        ops::matmul(g, &self.nodes[a].value, true, ta)
                    } else {
                        ops::matmul(&self.nodes[a].value, g, !ta, false)
                    };
                    Self::accum(grads, b, db);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) =
                    ops::conv2d_backward(&self.nodes[*x].value, &self.nodes[*w].value, g, *stride, *pad);
                if self.ng(*x) {
                    Self::accum(grads, *x, dx);
                }
                if self.ng(*w) {
                    Self::accum(grads, *w, dw);
                }
            }
            Op::AddChanBias { x, b } => {
                if self.ng(*x) {
                    Self::accum(grads, *x, g.clone());
                }
                if self.ng(*b) {
                    Self::accum(grads, *b, ops::sum_per_channel(g));
                }
            }
            Op::AddRowBias { x, b } => {
                if self.ng(*x) {
                    Self::accum(grads, *x, g.clone());
                }
                if self.ng(*b) {
                    let g2 = g.view().into_dimensionality::<ndarray::Ix2>().expect("(R,D)");
                    let mut db = ndarray::Array1::<E>::zeros(g2.ncols());
                    for row in g2.rows() {
                        for (j, &v) in row.iter().enumerate() {
                            db[j] = db[j] + v;
                        }
                    }
                    Self::accum(grads, *b, db.into_dyn());
                }
            }
            Op::RowScale { x, s } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<ndarray::Ix2>().expect("(R,D)");
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().expect("(R,D)");
                let sv = &self.nodes[*s].value;
                let sf = sv.as_slice_memory_order().expect("contiguous scale");
                if self.ng(*x) {
                    let mut dx = g2.to_owned();
                    for (ri, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        row.mapv_inplace(|v| v * sf[ri]);
                    }
                    Self::accum(grads, *x, dx.into_dyn());
                }
                if self.ng(*s) {
                    let mut ds = ndarray::Array1::<E>::zeros(xv.nrows());
                    for ri in 0..xv.nrows() {
                        let mut acc = E::zero();
                        for ci in 0..xv.ncols() {
                            acc = acc + g2[(ri, ci)] * xv[(ri, ci)];
                        }
                        ds[ri] = acc;
                    }
                    Self::accum(
                        grads,
                        *s,
                        ds.into_dyn().into_shape_with_order(sv.raw_dim()).expect("scale shape"),
                    );
                }
            }
            Op::Upsample2x { x } => {
                if self.ng(*x) {
                    Self::accum(grads, *x, ops::upsample2x_backward(g));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, eps } => {
                let (dx, dgamma, dbeta) = ops::group_norm_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*gamma].value,
                    g,
                    *groups,
                    *eps,
                );
                if self.ng(*x) {
                    Self::accum(grads, *x, dx);
                }
                if self.ng(*gamma) {
                    Self::accum(grads, *gamma, dgamma);
                }
                if self.ng(*beta) {
                    Self::accum(grads, *beta, dbeta);
                }
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (dx, dgamma, dbeta) = ops::layer_norm_rows_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*gamma].value,
                    g,
                    *eps,
                );
                if self.ng(*x) {
                    Self::accum(grads, *x, dx);
                }
                if self.ng(*gamma) {
                    Self::accum(grads, *gamma, dgamma);
                }
                if self.ng(*beta) {
                    Self::accum(grads, *beta, dbeta);
                }
            }
            Op::SoftmaxRows { x } => {
                if !self.ng(*x) {
                    return;
                }
                let y = node
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("(R,C)");
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().expect("(R,C)");
                let (r, c) = y.dim();
                let mut dx = ndarray::Array2::<E>::zeros((r, c));
                for i in 0..r {
                    let mut dot = E::zero();
                    for j in 0..c {
                        dot = dot + g2[(i, j)] * y[(i, j)];
                    }
                    for j in 0..c {
                        dx[(i, j)] = y[(i, j)] * (g2[(i, j)] - dot);
                    }
                }
                Self::accum(grads, *x, dx.into_dyn());
            }
            Op::CrossEntropyRows { logits, targets } => {
                if !self.ng(*logits) {
                    return;
                }
                let gs = *g.iter().next().expect("scalar");
                let lv = &self.nodes[*logits].value;
                let mut p = ops::softmax_rows(lv);
                let r = targets.len();
                {
                    let mut p2 = p.view_mut().into_dimensionality::<ndarray::Ix2>().expect("(R,C)");
                    for (i, &t) in targets.iter().enumerate() {
                        p2[(i, t)] = p2[(i, t)] - E::one();
                    }
                }
                let scale = gs / E::from_f64(r as f64);
                p.mapv_inplace(|v| v * scale);
                Self::accum(grads, *logits, p);
            }
            Op::Gather { w, idx } => {
                if !self.ng(*w) {
                    return;
                }
                let wv = &self.nodes[*w].value;
                let (v, d) = (wv.shape()[0], wv.shape()[1]);
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().expect("(L,D)");
                let mut dw = ndarray::Array2::<E>::zeros((v, d));
                for (i, &ix) in idx.iter().enumerate() {
                    for j in 0..d {
                        dw[(ix, j)] = dw[(ix, j)] + g2[(i, j)];
                    }
                }
                Self::accum(grads, *w, dw.into_dyn());
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.nodes[p].value.shape()[*axis];
                    if self.ng(p) {
                        let gp = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .to_owned();
                        Self::accum(grads, p, gp);
                    }
                    start += len;
                }
            }
            Op::SliceAxis { x, axis, start, len } => {
                if !self.ng(*x) {
                    return;
                }
                let mut dx = ArrayD::<E>::zeros(self.nodes[*x].value.raw_dim());
                dx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                    .assign(g);
                Self::accum(grads, *x, dx);
            }
            Op::Reshape { x } => {
                if self.ng(*x) {
                    Self::accum(grads, *x, ops::reshaped(g, self.nodes[*x].value.shape()));
                }
            }
            Op::Transpose2 { x } => {
                if self.ng(*x) {
                    let gt = g
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("2-d")
                        .t()
                        .to_owned()
                        .into_dyn();
                    Self::accum(grads, *x, gt);
                }
            }
            Op::Sum { x } => {
                if self.ng(*x) {
                    let gs = *g.iter().next().expect("scalar");
                    Self::accum(
                        grads,
                        *x,
                        ArrayD::from_elem(self.nodes[*x].value.raw_dim(), gs),
                    );
                }
            }
            Op::Mean { x } => {
                if self.ng(*x) {
                    let n = self.nodes[*x].value.len();
                    let gs = *g.iter().next().expect("scalar") / E::from_f64(n as f64);
                    Self::accum(
                        grads,
                        *x,
                        ArrayD::from_elem(self.nodes[*x].value.raw_dim(), gs),
                    );
                }
            }
            Op::MeanRows { x } => {
                if self.ng(*x) {
                    let xv = &self.nodes[*x].value;
                    let (r, c) = (xv.shape()[0], xv.shape()[1]);
                    let rn = E::from_f64(r as f64);
                    let mut dx = ndarray::Array2::<E>::zeros((r, c));
                    for i in 0..r {
                        for j in 0..c {
                            dx[(i, j)] = g[[j]] / rn;
                        }
                    }
                    Self::accum(grads, *x, dx.into_dyn());
                }
            }
        }
    }
}

#[inline]
fn sigmoid<E: Elem>(v: E) -> E {
    E::one() / (E::one() + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn store_with(entries: &[(&str, &[usize], fn(usize) -> f64)]) -> Params<f64> {
        let mut p = Params::new();
        for (name, shape, f) in entries {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(f).collect();
            p.insert(name, ArrayD::from_shape_vec(IxDyn(shape), v).unwrap());
        }
        p
    }

    #[test]
    fn mul_chain_gradient() {
        // loss = mean((w * x)^2), dw = 2*w*x^2 / n
        let p = store_with(&[("w", &[3], |i| i as f64 + 1.0)]);
        let mut g = Graph::new();
        let x = g.input(ArrayD::from_shape_vec(IxDyn(&[3]), vec![2.0, -1.0, 0.5]).unwrap());
        let w = g.param(&p, "w");
        let wx = g.mul(w, x);
        let sq = g.sqr(wx);
        let loss = g.mean(sq);
        let grads = g.backward(loss);
        let dw = grads.get("w").unwrap();
        for (i, (&wv, &xv)) in [1.0, 2.0, 3.0].iter().zip([2.0, -1.0, 0.5].iter()).enumerate() {
            let want = 2.0 * wv * xv * xv / 3.0;
            assert!((dw[[i]] - want).abs() < 1e-12, "dw[{i}] = {} want {want}", dw[[i]]);
        }
    }

    #[test]
    fn param_leaf_deduplicated() {
        let p = store_with(&[("w", &[2], |_| 1.0)]);
        let mut g = Graph::new();
        let a = g.param(&p, "w");
        let b = g.param(&p, "w");
        assert_eq!(a, b, "same param must map to one leaf");
        // Used twice: loss = sum(w*w) so dw = 2w.
        let prod = g.mul(a, b);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        assert_eq!(grads.get("w").unwrap()[[0]], 2.0);
    }

    #[test]
    fn backward_stops_at_inputs() {
        let p = store_with(&[("w", &[2], |_| 3.0)]);
        let mut g = Graph::new();
        let x = g.input(ArrayD::from_elem(IxDyn(&[2]), 5.0));
        let w = g.param(&p, "w");
        let y = g.mul(x, w);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        assert_eq!(grads.map.len(), 1, "only the parameter should get a grad");
        assert_eq!(grads.get("w").unwrap()[[1]], 5.0);
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let p = store_with(&[("l", &[2, 3], |i| [1.0, 2.0, 3.0, 0.0, 0.0, 0.0][i])]);
        let mut g = Graph::new();
        let l = g.param(&p, "l");
        let loss = g.cross_entropy_rows(l, vec![2, 0]);
        // row0: lse = ln(e^1+e^2+e^3), nll = lse - 3; row1: ln(3) - 0
        let lse0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let want = ((lse0 - 3.0) + 3f64.ln()) / 2.0;
        assert!((g.scalar(loss) - want).abs() < 1e-12);
        let grads = g.backward(loss);
        let dl = grads.get("l").unwrap();
        // row1 uniform softmax: grad = (1/3 - onehot)/2
        assert!((dl[[1, 0]] - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-12);
        assert!((dl[[1, 1]] - (1.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn concat_slice_roundtrip_grads() {
        let p = store_with(&[("a", &[2, 2], |i| i as f64), ("b", &[1, 2], |i| 10.0 + i as f64)]);
        let mut g = Graph::new();
        let a = g.param(&p, "a");
        let b = g.param(&p, "b");
        let cat = g.concat(&[a, b], 0);
        assert_eq!(g.value(cat).shape(), &[3, 2]);
        // Take only the middle row (second row of `a`).
        let sl = g.slice_axis(cat, 0, 1, 1);
        let loss = g.sum(sl);
        let grads = g.backward(loss);
        let da = grads.get("a").unwrap();
        assert_eq!(da[[0, 0]], 0.0);
        assert_eq!(da[[1, 0]], 1.0);
        assert_eq!(da[[1, 1]], 1.0);
        let db = grads.get("b").unwrap();
        assert_eq!(db[[0, 0]], 0.0, "b is outside the slice");
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let p = store_with(&[("x", &[3], |i| [-40.0, 0.0, 45.0][i])]);
        let mut g = Graph::new();
        let x = g.param(&p, "x");
        let y = g.clamp(x, -30.0, 20.0);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        let dx = grads.get("x").unwrap();
        assert_eq!(dx[[0]], 0.0);
        assert_eq!(dx[[1]], 1.0);
        assert_eq!(dx[[2]], 0.0);
    }

    #[test]
    fn grads_clip_global_norm() {
        let mut gr = Grads::<f64>::new();
        gr.accumulate("a", ArrayD::from_elem(IxDyn(&[4]), 3.0));
        // norm = 6
        gr.clip_global_norm(1.5);
        assert!((gr.global_norm() - 1.5).abs() < 1e-12);
    }
}
