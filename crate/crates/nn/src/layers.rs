//! Parameterized building blocks: linear, conv, norms, embeddings and
//! multi-head attention. A layer is a small descriptor; `register` creates
//! its parameters (deterministically, keyed by parameter name) and `apply`
//! emits graph nodes. The same descriptor works for f32 and f64 stores.

use crate::elem::Elem;
use crate::graph::{Graph, Id, Params};
use crate::rng;
use ndarray::{ArrayD, IxDyn};

/// Gaussian init with the given std; the stream is keyed by parameter name
/// so registration order does not matter.
pub fn init_normal<E: Elem>(p: &mut Params<E>, seed: u64, name: &str, shape: &[usize], std: f64) {
    let mut r = rng::substream(seed, &format!("init/{name}"), 0);
    let mut a = rng::normal_array::<E>(&mut r, shape);
    let s = E::from_f64(std);
    a.mapv_inplace(|v| v * s);
    p.insert(name, a);
}

pub fn init_const<E: Elem>(p: &mut Params<E>, name: &str, shape: &[usize], v: f64) {
    p.insert(name, ArrayD::from_elem(IxDyn(shape), E::from_f64(v)));
}

/// `(R,din) -> (R,dout)` affine map; weight stored as `(din,dout)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear { name: name.into(), din, dout }
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>, seed: u64) {
        self.register_scaled(p, seed, (1.0 / self.din as f64).sqrt())
    }

    pub fn register_scaled<E: Elem>(&self, p: &mut Params<E>, seed: u64, std: f64) {
        init_normal(p, seed, &format!("{}.w", self.name), &[self.din, self.dout], std);
        init_const(p, &format!("{}.b", self.name), &[self.dout], 0.0);
    }

    /// Zero-initialized weights (used for output layers that should start
    /// as the identity contribution).
    pub fn register_zero<E: Elem>(&self, p: &mut Params<E>) {
        init_const(p, &format!("{}.w", self.name), &[self.din, self.dout], 0.0);
        init_const(p, &format!("{}.b", self.name), &[self.dout], 0.0);
    }

    pub fn apply<E: Elem>(&self, g: &mut Graph<E>, p: &Params<E>, x: Id) -> Id {
        let w = g.param(p, &format!("{}.w", self.name));
        let b = g.param(p, &format!("{}.b", self.name));
        let y = g.matmul(x, w);
        g.add_row_bias(y, b)
    }

    pub fn apply_frozen<E: Elem>(&self, g: &mut Graph<E>, p: &Params<E>, x: Id) -> Id {
        let w = g.frozen(p, &format!("{}.w", self.name));
        let b = g.frozen(p, &format!("{}.b", self.name));
        let y = g.matmul(x, w);
        g.add_row_bias(y, b)
    }
}

/// `(Cin,H,W) -> (Cout,OH,OW)` convolution with per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d { name: name.into(), cin, cout, k, stride, pad }
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>, seed: u64) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        init_normal(
            p,
            seed,
            &format!("{}.w", self.name),
            &[self.cout, self.cin, self.k, self.k],
            (2.0 / fan_in).sqrt(),
        );
        init_const(p, &format!("{}.b", self.name), &[self.cout], 0.0);
    }

    pub fn register_zero<E: Elem>(&self, p: &mut Params<E>) {
        init_const(
            p,
            &format!("{}.w", self.name),
            &[self.cout, self.cin, self.k, self.k],
            0.0,
        );
        init_const(p, &format!("{}.b", self.name), &[self.cout], 0.0);
    }

    pub fn apply<E: Elem>(&self, g: &mut Graph<E>, p: &Params<E>, x: Id) -> Id {
        let w = g.param(p, &format!("{}.w", self.name));
        let b = g.param(p, &format!("{}.b", self.name));
        let y = g.conv2d(x, w, self.stride, self.pad);
        g.add_chan_bias(y, b)
    }

    pub fn apply_frozen<E: Elem>(&self, g: &mut Graph<E>, p: &Params<E>, x: Id) -> Id {
        let w = g.frozen(p, &format!("{}.w", self.name));
        let b = g.frozen(p, &format!("{}.b", self.name));
        let y = g.conv2d(x, w, self.stride, self.pad);
        g.add_chan_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub name: String,
    pub ch: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, ch: usize, groups: usize) -> Self {
        assert!(ch % groups == 0, "channels must divide into groups");
        GroupNorm { name: name.into(), ch, groups }
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>) {
        init_const(p, &format!("{}.g", self.name), &[self.ch], 1.0);
        init_const(p, &format!("{}.b", self.name), &[self.ch], 0.0);
    }

    pub fn apply<E: Elem>(&self, g: &mut Graph<E>, p: &Params<E>, x: Id) -> Id {
        let gamma = g.param(p, &format!("{}.g", self.name));
        let beta = g.param(p, &format!("{}.b", self.name));
        g.group_norm(x, gamma, beta, self.groups)
    }

    pub fn apply_frozen<E: Elem>(&self, g: &mut Graph<E>, p: &Params<E>, x: Id) -> Id {
        let gamma = g.frozen(p, &format!("{}.g", self.name));
        let beta = g.frozen(p, &format!("{}.b", self.name));
        g.group_norm(x, gamma, beta, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        LayerNorm { name: name.into(), d }
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>) {
        init_const(p, &format!("{}.g", self.name), &[self.d], 1.0);
        init_const(p, &format!("{}.b", self.name), &[self.d], 0.0);
    }

    pub fn apply<E: Elem>(&self, g: &mut Graph<E>, p: &Params<E>, x: Id) -> Id {
        let gamma = g.param(p, &format!("{}.g", self.name));
        let beta = g.param(p, &format!("{}.b", self.name));
        g.layer_norm_rows(x, gamma, beta)
    }
}

/// Token embedding table `(V,D)`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub name: String,
    pub vocab: usize,
    pub d: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, vocab: usize, d: usize) -> Self {
        Embedding { name: name.into(), vocab, d }
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>, seed: u64) {
        init_normal(p, seed, &format!("{}.w", self.name), &[self.vocab, self.d], 0.05);
    }

    pub fn apply<E: Elem>(&self, g: &mut Graph<E>, p: &Params<E>, idx: Vec<usize>) -> Id {
        let w = g.param(p, &format!("{}.w", self.name));
        g.gather(w, idx)
    }
}

/// Multi-head attention. Queries come from `(Tq, dq)`, keys/values from
/// `(Tk, dkv)`; output is `(Tq, dq)`. Self-attention passes the same node
/// for both.
#[derive(Debug, Clone)]
pub struct Attention {
    pub name: String,
    pub dq: usize,
    pub dkv: usize,
    pub heads: usize,
}

impl Attention {
    pub fn new(name: impl Into<String>, dq: usize, dkv: usize, heads: usize) -> Self {
        assert!(dq % heads == 0, "model dim {dq} must divide into {heads} heads");
        Attention { name: name.into(), dq, dkv, heads }
    }

    fn projs(&self) -> [Linear; 4] {
        [
            Linear::new(format!("{}.q", self.name), self.dq, self.dq),
            Linear::new(format!("{}.k", self.name), self.dkv, self.dq),
            Linear::new(format!("{}.v", self.name), self.dkv, self.dq),
            Linear::new(format!("{}.o", self.name), self.dq, self.dq),
        ]
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>, seed: u64) {
        for l in self.projs() {
            l.register(p, seed);
        }
    }

    pub fn apply<E: Elem>(&self, g: &mut Graph<E>, p: &Params<E>, xq: Id, xkv: Id) -> Id {
        let [lq, lk, lv, lo] = self.projs();
        let q = lq.apply(g, p, xq);
        let k = lk.apply(g, p, xkv);
        let v = lv.apply(g, p, xkv);
        let dh = self.dq / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_axis(q, 1, h * dh, dh);
            let kh = g.slice_axis(k, 1, h * dh, dh);
            let vh = g.slice_axis(v, 1, h * dh, dh);
            let scores = g.matmul_flags(qh, kh, false, true);
            let scaled = g.scale(scores, scale);
            let probs = g.softmax_rows(scaled);
            heads.push(g.matmul(probs, vh));
        }
        let cat = g.concat(&heads, 1);
        lo.apply(g, p, cat)
    }
}

/// Sinusoidal timestep embedding (computed outside the graph; it has no
/// trainable parts). `dim` must be even.
pub fn timestep_embedding<E: Elem>(t: usize, dim: usize) -> ArrayD<E> {
    assert!(dim % 2 == 0, "timestep embedding dim must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let t = t as f64;
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (-(10000f64.ln()) * i as f64 / denom).exp();
        out.push(E::from_f64((t * freq).sin()));
    }
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (-(10000f64.ln()) * i as f64 / denom).exp();
        out.push(E::from_f64((t * freq).cos()));
    }
    ArrayD::from_shape_vec(IxDyn(&[dim]), out).expect("length matches dim")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_shapes_and_determinism() {
        let mut p1 = Params::<f32>::new();
        let mut p2 = Params::<f32>::new();
        let l = Linear::new("l", 4, 6);
        l.register(&mut p1, 42);
        l.register(&mut p2, 42);
        assert_eq!(p1.get("l.w"), p2.get("l.w"), "same seed, same init");
        let mut g = Graph::new();
        let x = g.input(ArrayD::zeros(IxDyn(&[3, 4])));
        let y = l.apply(&mut g, &p1, x);
        assert_eq!(g.value(y).shape(), &[3, 6]);
    }

    #[test]
    fn attention_output_shape() {
        let mut p = Params::<f32>::new();
        let a = Attention::new("attn", 8, 5, 2);
        a.register(&mut p, 1);
        let mut g = Graph::new();
        let xq = g.input(ArrayD::from_elem(IxDyn(&[7, 8]), 0.1f32));
        let xkv = g.input(ArrayD::from_elem(IxDyn(&[3, 5]), 0.2f32));
        let y = a.apply(&mut g, &p, xq, xkv);
        assert_eq!(g.value(y).shape(), &[7, 8]);
    }

    #[test]
    fn timestep_embedding_distinguishes_steps() {
        let e1 = timestep_embedding::<f64>(1, 16);
        let e2 = timestep_embedding::<f64>(2, 16);
        assert_eq!(e1.len(), 16);
        assert_ne!(e1, e2);
        // cos(0) = 1 at every frequency for t = 0.
        let e0 = timestep_embedding::<f64>(0, 16);
        for i in 8..16 {
            assert_eq!(e0[[i]], 1.0);
        }
    }
}
