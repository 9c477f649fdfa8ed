//! Spectrogram VAE: convolutional encoder/decoder pair with a diagonal
//! Gaussian posterior, trained with L1 reconstruction, a tiny KL penalty
//! toward N(0, I), and hinge GAN losses from three time-window patch
//! discriminators (full, half, quarter of the time axis).

pub mod train;

use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use t2a_nn::layers::{Conv2d, GroupNorm};
use t2a_nn::rng::normal_array;
use t2a_nn::{Elem, Graph, Id, Params};

use crate::error::CoreError;
use crate::specmel::{MelSpectrogram, FRAMES, N_MELS};

/// Posterior logvar clamp bounds (overflow guard).
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Discriminator time-window widths in frames.
pub const DISC_WINDOWS: [usize; 3] = [FRAMES, FRAMES / 2, FRAMES / 4];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Latent channels (4 default; 32/128 variants supported).
    pub latent_channels: usize,
    /// Channel width of the first level; later levels scale by `mult`.
    pub base_channels: usize,
    /// Per-level channel multipliers; 3 stride-2 downsamples for 4 levels.
    pub mult: Vec<usize>,
    /// Residual blocks per level.
    pub residual_blocks: usize,
    pub kl_weight: f64,
    pub gan_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_channels: 4,
            base_channels: 32,
            mult: vec![1, 2, 2, 4],
            residual_blocks: 2,
            kl_weight: 1e-6,
            gan_weight: 0.05,
        }
    }
}

impl VaeConfig {
    pub fn widths(&self) -> Vec<usize> {
        self.mult.iter().map(|m| m * self.base_channels).collect()
    }

    /// Spatial downsampling factor (2 per level transition).
    pub fn downsample(&self) -> usize {
        1 << (self.mult.len() - 1)
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let f = self.downsample();
        (self.latent_channels, N_MELS / f, FRAMES / f)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.mult.len() < 2 || self.mult.iter().any(|&m| m == 0) {
            return Err(CoreError::Config("mult needs ≥2 positive entries".into()));
        }
        let f = self.downsample();
        if N_MELS % f != 0 || FRAMES % f != 0 {
            return Err(CoreError::Config(format!(
                "downsample factor {f} must divide ({N_MELS}, {FRAMES})"
            )));
        }
        if self.latent_channels == 0 || self.base_channels == 0 || self.residual_blocks == 0 {
            return Err(CoreError::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over latents.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: Array3<f32>,
    pub logvar: Array3<f32>,
}

impl Posterior {
    /// z = mean + exp(logvar/2) ⊙ ε.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Array3<f32> {
        let eps: ArrayD<f32> = normal_array(rng, self.mean.shape());
        let eps3 = eps.into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut z = self.mean.clone();
        ndarray::Zip::from(&mut z).and(&self.logvar).and(&eps3).for_each(|zv, &lv, &e| {
            *zv = *zv + (lv / 2.0).exp() * e;
        });
        z
    }
}

// ---------------------------------------------------------------------------
// Layer naming and registration
// ---------------------------------------------------------------------------

struct ResBlock {
    name: String,
    cin: usize,
    cout: usize,
}

impl ResBlock {
    fn new(name: String, cin: usize, cout: usize) -> Self {
        ResBlock { name, cin, cout }
    }

    fn register<E: Elem>(&self, p: &mut Params<E>, seed: u64) {
        GroupNorm::new(format!("{}.gn1", self.name), self.cin, groups_for(self.cin)).register(p);
        Conv2d::new(format!("{}.conv1", self.name), self.cin, self.cout, 3, 1, 1).register(p, seed);
        GroupNorm::new(format!("{}.gn2", self.name), self.cout, groups_for(self.cout)).register(p);
        Conv2d::new(format!("{}.conv2", self.name), self.cout, self.cout, 3, 1, 1).register(p, seed);
        if self.cin != self.cout {
            Conv2d::new(format!("{}.skip", self.name), self.cin, self.cout, 1, 1, 0).register(p, seed);
        }
    }

    fn apply<E: Elem>(&self, g: &mut Graph<E>, p: &Params<E>, x: Id, frozen: bool) -> Id {
        let gn1 = GroupNorm::new(format!("{}.gn1", self.name), self.cin, groups_for(self.cin));
        let c1 = Conv2d::new(format!("{}.conv1", self.name), self.cin, self.cout, 3, 1, 1);
        let gn2 = GroupNorm::new(format!("{}.gn2", self.name), self.cout, groups_for(self.cout));
        let c2 = Conv2d::new(format!("{}.conv2", self.name), self.cout, self.cout, 3, 1, 1);
        let ap = |l: &Conv2d, g: &mut Graph<E>, x: Id| if frozen { l.apply_frozen(g, p, x) } else { l.apply(g, p, x) };
        let an = |l: &GroupNorm, g: &mut Graph<E>, x: Id| if frozen { l.apply_frozen(g, p, x) } else { l.apply(g, p, x) };
        let mut h = an(&gn1, g, x);
        h = g.silu(h);
        h = ap(&c1, g, h);
        h = an(&gn2, g, h);
        h = g.silu(h);
        h = ap(&c2, g, h);
        let skip = if self.cin != self.cout {
            let sk = Conv2d::new(format!("{}.skip", self.name), self.cin, self.cout, 1, 1, 0);
            ap(&sk, g, x)
        } else {
            x
        };
        g.add(skip, h)
    }
}

pub(crate) fn groups_for(ch: usize) -> usize {
    for cand in [8, 4, 2, 1] {
        if ch % cand == 0 {
            return cand;
        }
    }
    1
}

/// Register all encoder/decoder parameters under `vae/`.
pub fn register_vae<E: Elem>(p: &mut Params<E>, cfg: &VaeConfig, seed: u64) {
    let w = cfg.widths();
    let levels = w.len();
    Conv2d::new("vae/enc/in", 1, w[0], 3, 1, 1).register(p, seed);
    for (i, &wi) in w.iter().enumerate() {
        let mut prev = if i == 0 { w[0] } else { w[i - 1] };
        for b in 0..cfg.residual_blocks {
            ResBlock::new(format!("vae/enc/l{i}b{b}"), prev, wi).register(p, seed);
            prev = wi;
        }
        if i < levels - 1 {
            Conv2d::new(format!("vae/enc/down{i}"), wi, wi, 3, 2, 1).register(p, seed);
        }
    }
    let wl = *w.last().unwrap();
    GroupNorm::new("vae/enc/out_gn", wl, groups_for(wl)).register(p);
    Conv2d::new("vae/enc/out", wl, 2 * cfg.latent_channels, 3, 1, 1).register(p, seed);

    Conv2d::new("vae/dec/in", cfg.latent_channels, wl, 3, 1, 1).register(p, seed);
    for i in (0..levels).rev() {
        let mut prev = if i == levels - 1 { wl } else { w[i + 1] };
        for b in 0..cfg.residual_blocks {
            ResBlock::new(format!("vae/dec/l{i}b{b}"), prev, w[i]).register(p, seed);
            prev = w[i];
        }
        if i > 0 {
            Conv2d::new(format!("vae/dec/up{i}"), w[i], w[i], 3, 1, 1).register(p, seed);
        }
    }
    GroupNorm::new("vae/dec/out_gn", w[0], groups_for(w[0])).register(p);
    Conv2d::new("vae/dec/out", w[0], 1, 3, 1, 1).register(p, seed);
}

/// Register one window discriminator per entry of `windows` under `disc/`.
pub fn register_discs<E: Elem>(p: &mut Params<E>, windows: &[usize], seed: u64) {
    for &win in windows {
        let n = format!("disc/w{win}");
        Conv2d::new(format!("{n}/c1"), 1, 8, 4, 2, 1).register(p, seed);
        Conv2d::new(format!("{n}/c2"), 8, 16, 4, 2, 1).register(p, seed);
        GroupNorm::new(format!("{n}/gn"), 16, 4).register(p);
        Conv2d::new(format!("{n}/c3"), 16, 1, 3, 1, 1).register(p, seed);
    }
}

// ---------------------------------------------------------------------------
// Graph builders (generic over element type for finite-difference checks)
// ---------------------------------------------------------------------------

/// Encoder forward: `(1, 80, 624)` input node → (mean, clamped logvar).
pub fn encode_graph<E: Elem>(g: &mut Graph<E>, p: &Params<E>, cfg: &VaeConfig, x: Id, frozen: bool) -> (Id, Id) {
    let w = cfg.widths();
    let levels = w.len();
    let ap = |l: &Conv2d, g: &mut Graph<E>, x: Id| if frozen { l.apply_frozen(g, p, x) } else { l.apply(g, p, x) };
    let mut h = ap(&Conv2d::new("vae/enc/in", 1, w[0], 3, 1, 1), g, x);
    for (i, &wi) in w.iter().enumerate() {
        let mut prev = if i == 0 { w[0] } else { w[i - 1] };
        for b in 0..cfg.residual_blocks {
            h = ResBlock::new(format!("vae/enc/l{i}b{b}"), prev, wi).apply(g, p, h, frozen);
            prev = wi;
        }
        if i < levels - 1 {
            h = ap(&Conv2d::new(format!("vae/enc/down{i}"), wi, wi, 3, 2, 1), g, h);
        }
    }
    let wl = *w.last().unwrap();
    let gn = GroupNorm::new("vae/enc/out_gn", wl, groups_for(wl));
    h = if frozen { gn.apply_frozen(g, p, h) } else { gn.apply(g, p, h) };
    h = g.silu(h);
    h = ap(&Conv2d::new("vae/enc/out", wl, 2 * cfg.latent_channels, 3, 1, 1), g, h);
    let mean = g.slice_axis(h, 0, 0, cfg.latent_channels);
    let lv_raw = g.slice_axis(h, 0, cfg.latent_channels, cfg.latent_channels);
    let logvar = g.clamp(lv_raw, LOGVAR_MIN, LOGVAR_MAX);
    (mean, logvar)
}

/// Decoder forward: latent node → `(1, 80, 624)` in (0, 1) via sigmoid.
pub fn decode_graph<E: Elem>(g: &mut Graph<E>, p: &Params<E>, cfg: &VaeConfig, z: Id, frozen: bool) -> Id {
    let w = cfg.widths();
    let levels = w.len();
    let wl = *w.last().unwrap();
    let ap = |l: &Conv2d, g: &mut Graph<E>, x: Id| if frozen { l.apply_frozen(g, p, x) } else { l.apply(g, p, x) };
    let mut h = ap(&Conv2d::new("vae/dec/in", cfg.latent_channels, wl, 3, 1, 1), g, z);
    for i in (0..levels).rev() {
        let mut prev = if i == levels - 1 { wl } else { w[i + 1] };
        for b in 0..cfg.residual_blocks {
            h = ResBlock::new(format!("vae/dec/l{i}b{b}"), prev, w[i]).apply(g, p, h, frozen);
            prev = w[i];
        }
        if i > 0 {
            h = g.upsample2x(h);
            h = ap(&Conv2d::new(format!("vae/dec/up{i}"), w[i], w[i], 3, 1, 1), g, h);
        }
    }
    let gn = GroupNorm::new("vae/dec/out_gn", w[0], groups_for(w[0]));
    h = if frozen { gn.apply_frozen(g, p, h) } else { gn.apply(g, p, h) };
    h = g.silu(h);
    h = ap(&Conv2d::new("vae/dec/out", w[0], 1, 3, 1, 1), g, h);
    g.sigmoid(h)
}

/// One window discriminator on an already-cropped `(1, 80, win)` node →
/// patch score map.
pub fn disc_graph<E: Elem>(g: &mut Graph<E>, p: &Params<E>, win: usize, x: Id, frozen: bool) -> Id {
    let n = format!("disc/w{win}");
    let ap = |l: &Conv2d, g: &mut Graph<E>, x: Id| if frozen { l.apply_frozen(g, p, x) } else { l.apply(g, p, x) };
    let mut h = ap(&Conv2d::new(format!("{n}/c1"), 1, 8, 4, 2, 1), g, x);
    h = g.leaky_relu(h, 0.2);
    h = ap(&Conv2d::new(format!("{n}/c2"), 8, 16, 4, 2, 1), g, h);
    let gn = GroupNorm::new(format!("{n}/gn"), 16, 4);
    h = if frozen { gn.apply_frozen(g, p, h) } else { gn.apply(g, p, h) };
    h = g.leaky_relu(h, 0.2);
    ap(&Conv2d::new(format!("{n}/c3"), 16, 1, 3, 1, 1), g, h)
}

/// KL(q ‖ N(0,I)) as a per-element mean: 0.5·mean(μ² + e^lv − 1 − lv).
pub fn kl_graph<E: Elem>(g: &mut Graph<E>, mean: Id, logvar: Id) -> Id {
    let sq = g.sqr(mean);
    let ex = g.exp(logvar);
    let s1 = g.add(sq, ex);
    let s2 = g.add_scalar(s1, -1.0);
    let s3 = g.sub(s2, logvar);
    let m = g.mean(s3);
    g.scale(m, 0.5)
}

// ---------------------------------------------------------------------------
// Inference API
// ---------------------------------------------------------------------------

pub fn encode(params: &Params<f32>, cfg: &VaeConfig, mel: &MelSpectrogram) -> Result<Posterior, CoreError> {
    if mel.values.dim() != (N_MELS, FRAMES) {
        return Err(CoreError::Shape(format!(
            "encode expects ({N_MELS}, {FRAMES}), got {:?}",
            mel.values.dim()
        )));
    }
    let mut g = Graph::<f32>::new();
    let x = g.input(mel.values.clone().into_shape_with_order(IxDyn(&[1, N_MELS, FRAMES])).unwrap());
    let (mean, logvar) = encode_graph(&mut g, params, cfg, x, true);
    let to3 = |v: &ArrayD<f32>| v.view().into_dimensionality::<ndarray::Ix3>().unwrap().to_owned();
    Ok(Posterior { mean: to3(g.value(mean)), logvar: to3(g.value(logvar)) })
}

pub fn decode(params: &Params<f32>, cfg: &VaeConfig, z: &Array3<f32>) -> Result<MelSpectrogram, CoreError> {
    if z.dim() != cfg.latent_shape() {
        return Err(CoreError::Shape(format!(
            "decode expects {:?}, got {:?}",
            cfg.latent_shape(),
            z.dim()
        )));
    }
    let mut g = Graph::<f32>::new();
    let zi = g.input(z.clone().into_dyn());
    let out = decode_graph(&mut g, params, cfg, zi, true);
    let values = g
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .index_axis(ndarray::Axis(0), 0)
        .to_owned();
    MelSpectrogram::new(values)
}

/// Patch score maps of the three window discriminators on centered crops.
pub fn discriminate(params: &Params<f32>, mel: &MelSpectrogram) -> Vec<ArrayD<f32>> {
    DISC_WINDOWS
        .iter()
        .map(|&win| {
            let start = (FRAMES - win) / 2;
            let crop = mel.values.slice(ndarray::s![.., start..start + win]).to_owned();
            let mut g = Graph::<f32>::new();
            let x = g.input(crop.into_shape_with_order(IxDyn(&[1, N_MELS, win])).unwrap());
            let map = disc_graph(&mut g, params, win, x, true);
            g.value(map).clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specmel::corpus::{clip_for, ToyClass};
    use crate::specmel::melbank::mel;
    use t2a_nn::rng::substream;

    fn tiny_cfg() -> VaeConfig {
        VaeConfig {
            latent_channels: 2,
            base_channels: 2,
            mult: vec![1, 2, 2, 4],
            residual_blocks: 1,
            kl_weight: 1e-6,
            gan_weight: 0.05,
        }
    }

    #[test]
    fn encode_decode_shapes_roundtrip() {
        let cfg = tiny_cfg();
        cfg.validate().unwrap();
        let mut p = Params::<f32>::new();
        register_vae(&mut p, &cfg, 3);
        let m = mel(&clip_for(1, ToyClass::Tone, 0)).unwrap();
        let post = encode(&p, &cfg, &m).unwrap();
        assert_eq!(post.mean.dim(), (2, 10, 78));
        assert_eq!(post.logvar.dim(), (2, 10, 78));
        let mut rng = substream(0, "test/post", 0);
        let z = post.sample(&mut rng);
        let back = decode(&p, &cfg, &z).unwrap();
        assert_eq!(back.values.dim(), (N_MELS, FRAMES));
        assert!(back.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Wrong latent shape rejected.
        assert!(decode(&p, &cfg, &Array3::zeros((2, 10, 77))).is_err());
    }

    #[test]
    fn table_sized_config_gives_4x10x78() {
        let cfg = VaeConfig { base_channels: 2, residual_blocks: 1, ..VaeConfig::default() };
        assert_eq!(cfg.latent_shape(), (4, 10, 78));
        let wide = VaeConfig { latent_channels: 32, ..cfg.clone() };
        assert_eq!(wide.latent_shape(), (32, 10, 78));
    }

    #[test]
    fn deterministic_encode_and_seeded_posterior_sampling() {
        let cfg = tiny_cfg();
        let mut p = Params::<f32>::new();
        register_vae(&mut p, &cfg, 5);
        let m = mel(&clip_for(2, ToyClass::Warble, 0)).unwrap();
        let a = encode(&p, &cfg, &m).unwrap();
        let b = encode(&p, &cfg, &m).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.logvar, b.logvar);
        let z1 = a.sample(&mut substream(9, "test/z", 0));
        let z2 = a.sample(&mut substream(9, "test/z", 0));
        assert_eq!(z1, z2);
        let z3 = a.sample(&mut substream(9, "test/z", 1));
        assert_ne!(z1, z3);
    }

    #[test]
    fn posterior_sample_statistics() {
        // Zero-variance limit: z ≈ mean.
        let post = Posterior {
            mean: Array3::from_elem((1, 2, 2), 0.7),
            logvar: Array3::from_elem((1, 2, 2), LOGVAR_MIN as f32),
        };
        let z = post.sample(&mut substream(1, "test/zero-var", 0));
        for &v in z.iter() {
            assert!((v - 0.7).abs() < 1e-6);
        }
        // logvar = 0: per-coordinate std of 1e5 draws ≈ 1.
        let post = Posterior { mean: Array3::zeros((1, 2, 2)), logvar: Array3::zeros((1, 2, 2)) };
        let n = 100_000usize;
        let mut acc = Array3::<f64>::zeros((1, 2, 2));
        let mut acc2 = Array3::<f64>::zeros((1, 2, 2));
        for i in 0..n {
            let z = post.sample(&mut substream(2, "test/std", i as u64));
            ndarray::Zip::from(&mut acc).and(&z).for_each(|a, &v| *a += v as f64);
            ndarray::Zip::from(&mut acc2).and(&z).for_each(|a, &v| *a += (v as f64) * (v as f64));
        }
        for idx in 0..4 {
            let i = (0, idx / 2, idx % 2);
            let mean = acc[i] / n as f64;
            let std = (acc2[i] / n as f64 - mean * mean).sqrt();
            assert!((std - 1.0).abs() < 0.02, "coordinate {idx} std {std}");
        }
    }

    #[test]
    fn kl_is_zero_at_standard_normal_and_positive_elsewhere() {
        let mut g = Graph::<f64>::new();
        let mean = g.input(ArrayD::zeros(IxDyn(&[2, 3])));
        let logvar = g.input(ArrayD::zeros(IxDyn(&[2, 3])));
        let kl = kl_graph(&mut g, mean, logvar);
        assert_eq!(g.scalar(kl), 0.0);
        let mut g2 = Graph::<f64>::new();
        let mean = g2.input(ArrayD::from_elem(IxDyn(&[2, 3]), 0.5));
        let logvar = g2.input(ArrayD::from_elem(IxDyn(&[2, 3]), -0.3));
        let kl = kl_graph(&mut g2, mean, logvar);
        // 0.5·(μ² + e^lv − 1 − lv) per element.
        let expect = 0.5 * (0.25 + (-0.3f64).exp() - 1.0 + 0.3);
        assert!((g2.scalar(kl) - expect).abs() < 1e-12);
        assert!(g2.scalar(kl) > 0.0);
    }

    #[test]
    fn three_discriminator_windows_produce_three_maps() {
        let mut p = Params::<f32>::new();
        register_discs(&mut p, &DISC_WINDOWS, 7);
        let m = mel(&clip_for(3, ToyClass::Noise, 0)).unwrap();
        let maps = discriminate(&p, &m);
        assert_eq!(maps.len(), 3);
        for (map, win) in maps.iter().zip(DISC_WINDOWS) {
            assert_eq!(map.shape(), &[1, N_MELS / 4, win / 4]);
        }
    }

    #[test]
    fn untrained_discriminator_cannot_tell_real_from_fake() {
        let mut p = Params::<f32>::new();
        register_discs(&mut p, &DISC_WINDOWS, 11);
        let score = |m: &MelSpectrogram| {
            let map = &discriminate(&p, m)[0];
            map.iter().map(|&v| v as f64).sum::<f64>() / map.len() as f64
        };
        let mut reals = Vec::new();
        let mut fakes = Vec::new();
        for i in 0..6 {
            let m = mel(&clip_for(4, ToyClass::ALL[i % 4], (i / 4) as u64)).unwrap();
            reals.push(score(&m));
            // "Fake": a blurred/shifted version.
            let mut fake_vals = m.values.clone();
            fake_vals.mapv_inplace(|v| (v * 0.8 + 0.05).clamp(0.0, 1.0));
            let fake = MelSpectrogram::new(fake_vals).unwrap();
            fakes.push(score(&fake));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let std = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let pooled = (std(&reals) + std(&fakes)) / 2.0 + 1e-9;
        assert!(
            (mean(&reals) - mean(&fakes)).abs() < 0.5 * pooled.max(0.05),
            "untrained disc separates: {} vs {}",
            mean(&reals),
            mean(&fakes)
        );
    }

    #[test]
    fn time_shift_covariance_of_encoder() {
        // A clip whose mel has silent margins wider than the receptive field
        // lets an 8-frame input shift become an exact 1-cell latent shift
        // (GroupNorm statistics see the same value multiset either way).
        let cfg = tiny_cfg();
        let mut p = Params::<f32>::new();
        register_vae(&mut p, &cfg, 13);
        let m = mel(&clip_for(5, ToyClass::Tone, 0)).unwrap();
        let mut vals = m.values.clone();
        for c in 0..64 {
            for r in 0..N_MELS {
                vals[(r, c)] = 0.0;
                vals[(r, FRAMES - 1 - c)] = 0.0;
            }
        }
        let base = MelSpectrogram::new(vals.clone()).unwrap();
        let mut shifted_vals = ndarray::Array2::<f32>::zeros((N_MELS, FRAMES));
        for r in 0..N_MELS {
            for c in 0..FRAMES - 8 {
                shifted_vals[(r, c + 8)] = vals[(r, c)];
            }
        }
        let shifted = MelSpectrogram::new(shifted_vals).unwrap();
        let pb = encode(&p, &cfg, &base).unwrap();
        let ps = encode(&p, &cfg, &shifted).unwrap();
        let (lc, lh, lw) = cfg.latent_shape();
        let mut max_err = 0.0f32;
        for c in 0..lc {
            for h in 0..lh {
                for w in 8..lw - 8 {
                    max_err = max_err.max((ps.mean[(c, h, w)] - pb.mean[(c, h, w - 1)]).abs());
                }
            }
        }
        assert!(max_err < 1e-4, "latent shift mismatch {max_err}");
    }
}
