//! Conditional U-Net ε-predictor over VAE latents: stride-2 resolution
//! levels with residual blocks, self- plus cross-attention at every level
//! and the bottleneck, a sinusoidal-timestep MLP, and a zero-initialized
//! output projection so the untrained net predicts ε ≡ 0 exactly.

use ndarray::{ArrayD, Array3, IxDyn};
use t2a_nn::layers::{timestep_embedding, Attention, Conv2d, GroupNorm, LayerNorm, Linear};
use t2a_nn::{Elem, Graph, Id, Params};

use super::{CondSeq, EpsModel};
use crate::error::CoreError;
use crate::specvae::groups_for;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the first level; 64 is the desk-scale default and larger
    /// widths (e.g. 320) are reached purely through config.
    pub model_channels: usize,
    pub heads: usize,
    pub cond_channels: usize,
    /// Per-level channel multipliers; each extra level is a stride-2 step.
    pub mult: Vec<usize>,
    pub latent_h: usize,
    pub latent_w: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            in_channels: 4,
            out_channels: 4,
            model_channels: 64,
            heads: 8,
            cond_channels: 1024,
            mult: vec![1, 2],
            latent_h: 10,
            latent_w: 78,
        }
    }
}

impl DenoiserConfig {
    /// Channel width at each level.
    pub fn widths(&self) -> Vec<usize> {
        self.mult.iter().map(|m| m * self.model_channels).collect()
    }

    pub fn temb_dim(&self) -> usize {
        2 * self.model_channels
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.model_channels == 0
            || self.cond_channels == 0
            || self.heads == 0
        {
            return Err(CoreError::Config("denoiser dimensions must be nonzero".into()));
        }
        if self.mult.is_empty() || self.mult.iter().any(|&m| m == 0) {
            return Err(CoreError::Config("channel multipliers must be nonempty and positive".into()));
        }
        for w in self.widths() {
            if w % self.heads != 0 {
                return Err(CoreError::Config(format!(
                    "width {w} does not divide into {} attention heads",
                    self.heads
                )));
            }
        }
        let factor = 1usize << (self.mult.len() - 1);
        if self.latent_h == 0
            || self.latent_w == 0
            || self.latent_h % factor != 0
            || self.latent_w % factor != 0
        {
            return Err(CoreError::Config(format!(
                "latent {}x{} must be divisible by the {}x downsampling",
                self.latent_h, self.latent_w, factor
            )));
        }
        Ok(())
    }
}

/// Residual block with a per-channel timestep bias between the two convs.
#[derive(Debug, Clone)]
struct URes {
    cout: usize,
    gn1: GroupNorm,
    c1: Conv2d,
    emb: Linear,
    gn2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl URes {
    fn new(name: &str, cin: usize, cout: usize, temb_dim: usize) -> Self {
        URes {
            cout,
            gn1: GroupNorm::new(format!("{name}.gn1"), cin, groups_for(cin)),
            c1: Conv2d::new(format!("{name}.c1"), cin, cout, 3, 1, 1),
            emb: Linear::new(format!("{name}.emb"), temb_dim, cout),
            gn2: GroupNorm::new(format!("{name}.gn2"), cout, groups_for(cout)),
            c2: Conv2d::new(format!("{name}.c2"), cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::new(format!("{name}.skip"), cin, cout, 1, 1, 0)),
        }
    }

    fn register<E: Elem>(&self, p: &mut Params<E>, seed: u64) {
        self.gn1.register(p);
        self.c1.register(p, seed);
        self.emb.register(p, seed);
        self.gn2.register(p);
        self.c2.register(p, seed);
        if let Some(s) = &self.skip {
            s.register(p, seed);
        }
    }

    /// `temb` is a `(1, temb_dim)` row.
    fn apply<E: Elem>(&self, g: &mut Graph<E>, p: &Params<E>, x: Id, temb: Id) -> Id {
        let mut h = self.gn1.apply(g, p, x);
        h = g.silu(h);
        h = self.c1.apply(g, p, h);
        let tb = self.emb.apply(g, p, temb);
        let tb = g.reshape(tb, &[self.cout]);
        h = g.add_chan_bias(h, tb);
        h = self.gn2.apply(g, p, h);
        h = g.silu(h);
        h = self.c2.apply(g, p, h);
        let sk = match &self.skip {
            Some(s) => s.apply(g, p, x),
            None => x,
        };
        g.add(sk, h)
    }
}

/// Pre-norm self-attention then cross-attention over the `(H·W, C)` token
/// view of a feature map, both residual.
#[derive(Debug, Clone)]
struct SpatialAttn {
    ch: usize,
    ln_s: LayerNorm,
    self_a: Attention,
    ln_c: LayerNorm,
    cross_a: Attention,
}

impl SpatialAttn {
    fn new(name: &str, ch: usize, cond_ch: usize, heads: usize) -> Self {
        SpatialAttn {
            ch,
            ln_s: LayerNorm::new(format!("{name}.lns"), ch),
            self_a: Attention::new(format!("{name}.self"), ch, ch, heads),
            ln_c: LayerNorm::new(format!("{name}.lnc"), ch),
            cross_a: Attention::new(format!("{name}.cross"), ch, cond_ch, heads),
        }
    }

    fn register<E: Elem>(&self, p: &mut Params<E>, seed: u64) {
        self.ln_s.register(p);
        self.self_a.register(p, seed);
        self.ln_c.register(p);
        self.cross_a.register(p, seed);
    }

    fn apply<E: Elem>(
        &self,
        g: &mut Graph<E>,
        p: &Params<E>,
        x: Id,
        cond: Id,
        h: usize,
        w: usize,
    ) -> Id {
        let flat = g.reshape(x, &[self.ch, h * w]);
        let mut tokens = g.transpose2(flat);
        let t1 = self.ln_s.apply(g, p, tokens);
        let a = self.self_a.apply(g, p, t1, t1);
        tokens = g.add(tokens, a);
        let t2 = self.ln_c.apply(g, p, tokens);
        let b = self.cross_a.apply(g, p, t2, cond);
        tokens = g.add(tokens, b);
        let back = g.transpose2(tokens);
        g.reshape(back, &[self.ch, h, w])
    }
}

/// The U-Net layer plan. Parameters live in a separate [`Params`] store so
/// the same plan drives f32 training and f64 gradient checking.
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: DenoiserConfig,
    t1: Linear,
    t2: Linear,
    conv_in: Conv2d,
    enc: Vec<(URes, SpatialAttn)>,
    down: Vec<Conv2d>,
    mid1: URes,
    mid_attn: SpatialAttn,
    mid2: URes,
    dec: Vec<(URes, SpatialAttn)>,
    up: Vec<Conv2d>,
    out_gn: GroupNorm,
    out: Conv2d,
}

impl UNet {
    pub fn new(cfg: &DenoiserConfig) -> Result<Self, CoreError> {
        cfg.validate()?;
        let w = cfg.widths();
        let l = w.len();
        let td = cfg.temb_dim();
        let enc = (0..l)
            .map(|i| {
                let cin = if i == 0 { w[0] } else { w[i - 1] };
                (
                    URes::new(&format!("unet/enc{i}"), cin, w[i], td),
                    SpatialAttn::new(&format!("unet/enc{i}a"), w[i], cfg.cond_channels, cfg.heads),
                )
            })
            .collect();
        let down = (0..l - 1)
            .map(|i| Conv2d::new(format!("unet/down{i}"), w[i], w[i], 3, 2, 1))
            .collect();
        let dec = (0..l)
            .map(|i| {
                (
                    URes::new(&format!("unet/dec{i}"), 2 * w[i], w[i], td),
                    SpatialAttn::new(&format!("unet/dec{i}a"), w[i], cfg.cond_channels, cfg.heads),
                )
            })
            .collect();
        let up = (0..l - 1)
            .map(|i| Conv2d::new(format!("unet/up{i}"), w[i + 1], w[i], 3, 1, 1))
            .collect();
        let wl = w[l - 1];
        Ok(UNet {
            cfg: cfg.clone(),
            t1: Linear::new("unet/temb1", td, td),
            t2: Linear::new("unet/temb2", td, td),
            conv_in: Conv2d::new("unet/in", cfg.in_channels, w[0], 3, 1, 1),
            enc,
            down,
            mid1: URes::new("unet/mid1", wl, wl, td),
            mid_attn: SpatialAttn::new("unet/mida", wl, cfg.cond_channels, cfg.heads),
            mid2: URes::new("unet/mid2", wl, wl, td),
            dec,
            up,
            out_gn: GroupNorm::new("unet/outgn", w[0], groups_for(w[0])),
            out: Conv2d::new("unet/out", w[0], cfg.out_channels, 3, 1, 1),
        })
    }

    pub fn register<E: Elem>(&self, p: &mut Params<E>, seed: u64) {
        self.t1.register(p, seed);
        self.t2.register(p, seed);
        self.conv_in.register(p, seed);
        for (res, attn) in &self.enc {
            res.register(p, seed);
            attn.register(p, seed);
        }
        for d in &self.down {
            d.register(p, seed);
        }
        self.mid1.register(p, seed);
        self.mid_attn.register(p, seed);
        self.mid2.register(p, seed);
        for (res, attn) in &self.dec {
            res.register(p, seed);
            attn.register(p, seed);
        }
        for u in &self.up {
            u.register(p, seed);
        }
        self.out_gn.register(p);
        self.out.register_zero(p);
    }

    /// Build the ε-prediction graph. `z` is an input node shaped
    /// `(in_channels, latent_h, latent_w)`; `cond` is `(tokens, cond_channels)`.
    pub fn build_eps<E: Elem>(
        &self,
        g: &mut Graph<E>,
        p: &Params<E>,
        z: Id,
        t: usize,
        cond: Id,
    ) -> Id {
        let cfg = &self.cfg;
        let l = cfg.mult.len();
        let te_host = timestep_embedding::<E>(t, cfg.temb_dim())
            .into_shape_with_order(IxDyn(&[1, cfg.temb_dim()]))
            .expect("row embedding");
        let mut te = g.input(te_host);
        te = self.t1.apply(g, p, te);
        te = g.silu(te);
        te = self.t2.apply(g, p, te);

        let mut h = self.conv_in.apply(g, p, z);
        let (mut sh, mut sw) = (cfg.latent_h, cfg.latent_w);
        let mut skips = Vec::with_capacity(l);
        for i in 0..l {
            let (res, attn) = &self.enc[i];
            h = res.apply(g, p, h, te);
            h = attn.apply(g, p, h, cond, sh, sw);
            skips.push(h);
            if i + 1 < l {
                h = self.down[i].apply(g, p, h);
                sh /= 2;
                sw /= 2;
            }
        }
        h = self.mid1.apply(g, p, h, te);
        h = self.mid_attn.apply(g, p, h, cond, sh, sw);
        h = self.mid2.apply(g, p, h, te);
        for i in (0..l).rev() {
            let (res, attn) = &self.dec[i];
            h = g.concat(&[h, skips[i]], 0);
            h = res.apply(g, p, h, te);
            h = attn.apply(g, p, h, cond, sh, sw);
            if i > 0 {
                h = g.upsample2x(h);
                h = self.up[i - 1].apply(g, p, h);
                sh *= 2;
                sw *= 2;
            }
        }
        h = self.out_gn.apply(g, p, h);
        h = g.silu(h);
        self.out.apply(g, p, h)
    }
}

/// Diffusion MSE on one (z_t, t, cond, ε) tuple, built in-graph. `cond` is
/// a node so condition-side projections can receive gradients.
pub fn build_eps_loss<E: Elem>(
    g: &mut Graph<E>,
    net: &UNet,
    p: &Params<E>,
    z_t: &ArrayD<E>,
    t: usize,
    cond: Id,
    eps: &ArrayD<E>,
) -> Id {
    let zi = g.input(z_t.clone());
    let pred = net.build_eps(g, p, zi, t, cond);
    let tgt = g.input(eps.clone());
    let d = g.sub(pred, tgt);
    let d2 = g.sqr(d);
    g.mean(d2)
}

/// A registered U-Net with its parameter store; the [`EpsModel`] used by
/// sampling and evaluation.
#[derive(Debug, Clone)]
pub struct UNetDenoiser {
    pub net: UNet,
    pub params: Params<f32>,
}

impl UNetDenoiser {
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self, CoreError> {
        let net = UNet::new(cfg)?;
        let mut params = Params::new();
        net.register(&mut params, seed);
        Ok(UNetDenoiser { net, params })
    }

    pub fn from_params(cfg: &DenoiserConfig, params: Params<f32>) -> Result<Self, CoreError> {
        Ok(UNetDenoiser { net: UNet::new(cfg)?, params })
    }
}

impl EpsModel for UNetDenoiser {
    fn eps(&self, z: &Array3<f32>, t: usize, cond: &CondSeq) -> Array3<f32> {
        let cfg = &self.net.cfg;
        assert_eq!(
            z.dim(),
            (cfg.in_channels, cfg.latent_h, cfg.latent_w),
            "latent shape mismatch"
        );
        assert_eq!(cond.dim().1, cfg.cond_channels, "condition width mismatch");
        let mut g = Graph::new();
        let zi = g.input(z.clone().into_dyn());
        let ci = g.input(cond.clone().into_dyn());
        let out = self.net.build_eps(&mut g, &self.params, zi, t, ci);
        g.value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("3-d ε prediction")
    }
}
