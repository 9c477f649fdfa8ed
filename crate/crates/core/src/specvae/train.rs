//! VAE-GAN training: composite generator loss (L1 + tiny KL + hinge GAN),
//! alternating discriminator updates, divergence detection, a CSV metrics
//! log, and the `SVE1` checkpoint container.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use t2a_nn::ckpt::{sha256_hex, Container};
use t2a_nn::opt::Adam;
use t2a_nn::rng::{normal_array, substream, uniform_usize};
use t2a_nn::{par, Elem, Graph, Id, Params};

use super::{
    decode, decode_graph, disc_graph, encode, encode_graph, kl_graph, register_discs,
    register_vae, VaeConfig, DISC_WINDOWS,
};
use crate::error::CoreError;
use crate::specmel::{MelSpectrogram, FRAMES, N_MELS};

pub const VAE_MAGIC: [u8; 4] = *b"SVE1";

/// Scalar loss components of one generator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub l_re: f64,
    pub l_kl: f64,
    pub l_gan: f64,
}

/// Node handles of the generator loss graph.
pub struct GenGraph {
    pub total: Id,
    pub l_re: Id,
    pub l_kl: Id,
    pub l_gan: Id,
    pub xhats: Vec<Id>,
    pub posteriors: Vec<(Id, Id)>,
}

/// Build the generator objective for a batch of `(1, H, W)` inputs:
/// total = L_re + kl_weight·L_KL + gan_weight·L_GAN with the discriminator
/// frozen. `windows` lists `(width, crop start)` pairs on the time axis.
pub fn build_gen_loss<E: Elem>(
    g: &mut Graph<E>,
    vae: &Params<E>,
    disc: &Params<E>,
    cfg: &VaeConfig,
    batch: &[ArrayD<E>],
    eps: &[ArrayD<E>],
    windows: &[(usize, usize)],
) -> GenGraph {
    assert_eq!(batch.len(), eps.len(), "one noise draw per item");
    assert!(!batch.is_empty(), "empty batch");
    let b = batch.len();
    let mut re_acc: Option<Id> = None;
    let mut kl_acc: Option<Id> = None;
    let mut gan_acc: Option<Id> = None;
    let mut xhats = Vec::with_capacity(b);
    let mut posteriors = Vec::with_capacity(b);
    for (x_arr, e_arr) in batch.iter().zip(eps) {
        let x = g.input(x_arr.clone());
        let (mean, logvar) = encode_graph(g, vae, cfg, x, false);
        posteriors.push((mean, logvar));
        let kl = kl_graph(g, mean, logvar);
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let e = g.input(e_arr.clone());
        let noise = g.mul(std, e);
        let z = g.add(mean, noise);
        let xhat = decode_graph(g, vae, cfg, z, false);
        xhats.push(xhat);
        let diff = g.sub(xhat, x);
        let adiff = g.abs(diff);
        let re = g.mean(adiff);
        re_acc = Some(match re_acc {
            Some(id) => g.add(id, re),
            None => re,
        });
        kl_acc = Some(match kl_acc {
            Some(id) => g.add(id, kl),
            None => kl,
        });
        if cfg.gan_weight != 0.0 {
            for &(win, start) in windows {
                let crop = g.slice_axis(xhat, 2, start, win);
                let map = disc_graph(g, disc, win, crop, true);
                let score = g.mean(map);
                let neg = g.neg(score);
                gan_acc = Some(match gan_acc {
                    Some(id) => g.add(id, neg),
                    None => neg,
                });
            }
        }
    }
    let l_re = {
        let id = re_acc.expect("non-empty batch");
        g.scale(id, 1.0 / b as f64)
    };
    let l_kl = {
        let id = kl_acc.expect("non-empty batch");
        g.scale(id, 1.0 / b as f64)
    };
    let l_gan = match gan_acc {
        Some(id) => g.scale(id, 1.0 / (b * windows.len()) as f64),
        None => g.input(ArrayD::zeros(IxDyn(&[]))),
    };
    let kl_term = g.scale(l_kl, cfg.kl_weight);
    let gan_term = g.scale(l_gan, cfg.gan_weight);
    let partial = g.add(l_re, kl_term);
    let total = g.add(partial, gan_term);
    GenGraph { total, l_re, l_kl, l_gan, xhats, posteriors }
}

/// Hinge discriminator objective over real/fake `(1, H, W)` pairs:
/// mean over items and windows of relu(1 − D(real)) + relu(1 + D(fake)).
/// Fakes enter as plain inputs, so no gradient can reach the generator.
pub fn build_disc_loss<E: Elem>(
    g: &mut Graph<E>,
    disc: &Params<E>,
    reals: &[ArrayD<E>],
    fakes: &[ArrayD<E>],
    windows: &[(usize, usize)],
) -> Id {
    assert_eq!(reals.len(), fakes.len(), "one fake per real");
    assert!(!reals.is_empty(), "empty batch");
    let mut acc: Option<Id> = None;
    for (r_arr, f_arr) in reals.iter().zip(fakes) {
        let r = g.input(r_arr.clone());
        let f = g.input(f_arr.clone());
        for &(win, start) in windows {
            let rc = g.slice_axis(r, 2, start, win);
            let dr = disc_graph(g, disc, win, rc, false);
            let ndr = g.neg(dr);
            let hr = g.add_scalar(ndr, 1.0);
            let rr = g.relu(hr);
            let mr = g.mean(rr);
            let fc = g.slice_axis(f, 2, start, win);
            let df = disc_graph(g, disc, win, fc, false);
            let hf = g.add_scalar(df, 1.0);
            let rf = g.relu(hf);
            let mf = g.mean(rf);
            let pair = g.add(mr, mf);
            acc = Some(match acc {
                Some(id) => g.add(id, pair),
                None => pair,
            });
        }
    }
    let id = acc.expect("non-empty batch");
    g.scale(id, 1.0 / (reals.len() * windows.len()) as f64)
}

fn mel_input(m: &MelSpectrogram) -> ArrayD<f32> {
    m.values
        .clone()
        .into_shape_with_order(IxDyn(&[1, N_MELS, FRAMES]))
        .expect("(80, 624) reshapes to (1, 80, 624)")
}

/// Composite loss of one mel under the current parameters; noise and crop
/// positions come from `rng`.
pub fn vae_loss(
    vae: &Params<f32>,
    disc: &Params<f32>,
    cfg: &VaeConfig,
    mel: &MelSpectrogram,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts, CoreError> {
    let (lc, lh, lw) = cfg.latent_shape();
    let eps: ArrayD<f32> = normal_array(rng, &[lc, lh, lw]);
    let windows: Vec<(usize, usize)> = DISC_WINDOWS
        .iter()
        .map(|&w| (w, uniform_usize(rng, FRAMES - w + 1)))
        .collect();
    let mut g = Graph::<f32>::new();
    let gen = build_gen_loss(&mut g, vae, disc, cfg, &[mel_input(mel)], &[eps], &windows);
    let parts = LossParts {
        total: g.scalar(gen.total) as f64,
        l_re: g.scalar(gen.l_re) as f64,
        l_kl: g.scalar(gen.l_kl) as f64,
        l_gan: g.scalar(gen.l_gan) as f64,
    };
    if !parts.total.is_finite() {
        return Err(CoreError::Train(format!(
            "non-finite loss: re={} kl={} gan={}",
            parts.l_re, parts.l_kl, parts.l_gan
        )));
    }
    Ok(parts)
}

/// Mean validation L1 between each mel and its mean-latent reconstruction.
pub fn val_l1(vae: &Params<f32>, cfg: &VaeConfig, mels: &[MelSpectrogram]) -> Result<f64, CoreError> {
    if mels.is_empty() {
        return Err(CoreError::Config("empty validation set".into()));
    }
    let per: Vec<Result<f64, CoreError>> = par::par_map(mels, |_, m| {
        let post = encode(vae, cfg, m)?;
        let xhat = decode(vae, cfg, &post.mean)?;
        let n = (N_MELS * FRAMES) as f64;
        Ok(m.values
            .iter()
            .zip(xhat.values.iter())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / n)
    });
    let mut acc = 0.0;
    for r in per {
        acc += r?;
    }
    Ok(acc / mels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub l_re: f64,
    pub l_kl: f64,
    pub l_gan: f64,
    pub d_loss: f64,
}

/// Render training metrics as CSV (header + one row per step).
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,l_re,l_kl,l_gan,d_loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.l_re, r.l_kl, r.l_gan, r.d_loss));
    }
    out
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainVaeOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainVaeOptions {
    fn default() -> Self {
        TrainVaeOptions { steps: 2000, batch_size: 2, lr: 1e-3, seed: 0 }
    }
}

pub struct VaeTraining {
    pub vae: Params<f32>,
    pub disc: Params<f32>,
    pub metrics: Vec<MetricsRow>,
    pub val_initial: f64,
    pub val_final: f64,
}

/// Alternating generator/discriminator training over a mel corpus.
pub fn train_vae(
    cfg: &VaeConfig,
    train: &[MelSpectrogram],
    val: &[MelSpectrogram],
    opts: &TrainVaeOptions,
) -> Result<VaeTraining, CoreError> {
    cfg.validate()?;
    if train.len() < 100 {
        return Err(CoreError::Config(format!(
            "need ≥100 training mels, got {}",
            train.len()
        )));
    }
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(CoreError::Config("steps and batch_size must be positive".into()));
    }
    let mut vae = Params::<f32>::new();
    register_vae(&mut vae, cfg, opts.seed);
    let mut disc = Params::<f32>::new();
    register_discs(&mut disc, &DISC_WINDOWS, opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let val_initial = val_l1(&vae, cfg, val)?;
    let mut adam_g = Adam::new();
    let mut adam_d = Adam::new();
    let (lc, lh, lw) = cfg.latent_shape();
    let mut metrics = Vec::with_capacity(opts.steps);
    let mut initial_total: Option<f64> = None;
    let mut over_initial = 0usize;
    for step in 0..opts.steps {
        let mut rb = substream(opts.seed, "vae/batch", step as u64);
        let idx: Vec<usize> =
            (0..opts.batch_size).map(|_| uniform_usize(&mut rb, train.len())).collect();
        let mut re = substream(opts.seed, "vae/eps", step as u64);
        let eps: Vec<ArrayD<f32>> =
            (0..opts.batch_size).map(|_| normal_array(&mut re, &[lc, lh, lw])).collect();
        let mut rc = substream(opts.seed, "vae/crop", step as u64);
        let windows: Vec<(usize, usize)> = DISC_WINDOWS
            .iter()
            .map(|&w| (w, uniform_usize(&mut rc, FRAMES - w + 1)))
            .collect();
        let batch: Vec<ArrayD<f32>> = idx.iter().map(|&i| mel_input(&train[i])).collect();

        let mut g = Graph::<f32>::new();
        let gen = build_gen_loss(&mut g, &vae, &disc, cfg, &batch, &eps, &windows);
        let total = g.scalar(gen.total) as f64;
        let l_re = g.scalar(gen.l_re) as f64;
        let l_kl = g.scalar(gen.l_kl) as f64;
        let l_gan = g.scalar(gen.l_gan) as f64;
        if !total.is_finite() {
            return Err(CoreError::Train(format!(
                "non-finite loss at step {step}: re={l_re} kl={l_kl} gan={l_gan}"
            )));
        }
        let grads = g.backward(gen.total);
        let fakes: Vec<ArrayD<f32>> =
            gen.xhats.iter().map(|&id| g.value(id).clone()).collect();
        adam_g.step(&mut vae, &grads, opts.lr);

        let d_loss = if cfg.gan_weight != 0.0 {
            let mut gd = Graph::<f32>::new();
            let dl = build_disc_loss(&mut gd, &disc, &batch, &fakes, &windows);
            let dval = gd.scalar(dl) as f64;
            if !dval.is_finite() {
                return Err(CoreError::Train(format!(
                    "non-finite discriminator loss at step {step}"
                )));
            }
            let dgrads = gd.backward(dl);
            adam_d.step(&mut disc, &dgrads, opts.lr);
            dval
        } else {
            0.0
        };
        metrics.push(MetricsRow { step, l_re, l_kl, l_gan, d_loss });

        let init = *initial_total.get_or_insert(total);
        if total > 10.0 * init {
            over_initial += 1;
            if over_initial >= 100 {
                return Err(CoreError::Train(format!(
                    "diverged: loss {total:.4} > 10× initial {init:.4} for 100 consecutive steps (at step {step})"
                )));
            }
        } else {
            over_initial = 0;
        }
    }
    let val_final = val_l1(&vae, cfg, val)?;
    Ok(VaeTraining { vae, disc, metrics, val_initial, val_final })
}

/// Persist VAE + discriminator parameters and config; returns the file's
/// content digest.
pub fn save_vae(
    path: &Path,
    cfg: &VaeConfig,
    vae: &Params<f32>,
    disc: &Params<f32>,
) -> Result<String, CoreError> {
    let mut c = Container::new(VAE_MAGIC, 1);
    c.set_meta("config", serde_json::to_string(cfg)?);
    c.insert_params(vae);
    c.insert_params(disc);
    let bytes = c.to_bytes();
    c.write(path)?;
    Ok(sha256_hex(&bytes))
}

/// Load a VAE checkpoint: (config, vae params, discriminator params, digest).
pub fn load_vae(path: &Path) -> Result<(VaeConfig, Params<f32>, Params<f32>, String), CoreError> {
    let c = Container::read(path)?;
    c.expect_magic(&VAE_MAGIC)?;
    let cfg: VaeConfig = serde_json::from_str(c.require_meta("config")?)?;
    cfg.validate()?;
    let vae = c.extract_params("vae/");
    let disc = c.extract_params("disc/");
    if vae.is_empty() {
        return Err(CoreError::Ckpt(t2a_nn::NnError::BadContainer(
            "no vae/ parameters in checkpoint".into(),
        )));
    }
    Ok((cfg, vae, disc, sha256_hex(&c.to_bytes())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specmel::corpus::{clip_for, ToyClass};
    use crate::specmel::melbank::mel;
    use crate::specvae::discriminate;
    use std::sync::OnceLock;
    use t2a_nn::gradcheck;

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

    /// 100 training mels + 8 validation mels, computed once.
    fn corpus() -> &'static (Vec<MelSpectrogram>, Vec<MelSpectrogram>) {
        static C: OnceLock<(Vec<MelSpectrogram>, Vec<MelSpectrogram>)> = OnceLock::new();
        C.get_or_init(|| {
            let mut train = Vec::new();
            for i in 0..25 {
                for class in ToyClass::ALL {
                    train.push(mel(&clip_for(41, class, i)).unwrap());
                }
            }
            let mut val = Vec::new();
            for i in 0..2 {
                for class in ToyClass::ALL {
                    val.push(mel(&clip_for(42, class, i)).unwrap());
                }
            }
            (train, val)
        })
    }

    #[test]
    fn l1_of_identical_tensors_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(ArrayD::from_elem(IxDyn(&[3, 4]), 0.37));
        let d = g.sub(x, x);
        let a = g.abs(d);
        let m = g.mean(a);
        assert_eq!(g.scalar(m), 0.0);
    }

    #[test]
    fn generator_gradients_never_touch_the_discriminator() {
        let cfg = tiny_cfg();
        let mut vae = Params::<f32>::new();
        register_vae(&mut vae, &cfg, 3);
        let mut disc = Params::<f32>::new();
        register_discs(&mut disc, &DISC_WINDOWS, 4);
        let m = mel(&clip_for(6, ToyClass::Chirp, 0)).unwrap();
        let (lc, lh, lw) = cfg.latent_shape();
        let eps: ArrayD<f32> = normal_array(&mut substream(0, "test/eps", 0), &[lc, lh, lw]);
        let windows: Vec<(usize, usize)> = DISC_WINDOWS.iter().map(|&w| (w, 0)).collect();
        let mut g = Graph::<f32>::new();
        let gen = build_gen_loss(&mut g, &vae, &disc, &cfg, &[mel_input(&m)], &[eps], &windows);
        let grads = g.backward(gen.total);
        assert!(grads.map.keys().all(|k| k.starts_with("vae/")), "generator grads leak");
        assert!(grads.map.keys().any(|k| k.starts_with("vae/enc/")));
        assert!(grads.map.keys().any(|k| k.starts_with("vae/dec/")));

        // Discriminator step: fakes are detached inputs, so no vae/ grads.
        let fake = g.value(gen.xhats[0]).clone();
        let mut gd = Graph::<f32>::new();
        let dl = build_disc_loss(&mut gd, &disc, &[mel_input(&m)], &[fake], &windows);
        let dgrads = gd.backward(dl);
        assert!(dgrads.map.keys().all(|k| k.starts_with("disc/")), "disc grads leak");
        assert!(!dgrads.map.is_empty());
    }

    #[test]
    fn composite_loss_matches_finite_differences() {
        // Small spatial extent keeps the f64 forward cheap; the graph is the
        // same code path as full-size training.
        let cfg = tiny_cfg();
        let wins = [48usize, 24, 12];
        let mut vae = Params::<f64>::new();
        register_vae(&mut vae, &cfg, 17);
        let mut disc = Params::<f64>::new();
        register_discs(&mut disc, &wins, 18);
        let x: ArrayD<f64> = normal_array(&mut substream(1, "test/fd-x", 0), &[1, 16, 48])
            .mapv(|v: f64| (0.5 + 0.25 * v).clamp(0.0, 1.0));
        let eps: ArrayD<f64> = normal_array(&mut substream(1, "test/fd-eps", 0), &[2, 2, 6]);
        let windows = vec![(48, 0), (24, 6), (12, 30)];

        let gen_loss = |p: &Params<f64>| {
            let mut g = Graph::<f64>::new();
            let gen = build_gen_loss(&mut g, p, &disc, &cfg, &[x.clone()], &[eps.clone()], &windows);
            g.scalar(gen.total)
        };
        let mut g = Graph::<f64>::new();
        let gen = build_gen_loss(&mut g, &vae, &disc, &cfg, &[x.clone()], &[eps.clone()], &windows);
        let analytic = g.backward(gen.total);
        let coords = gradcheck::sample_coords(&vae, 5, 1);
        let checks = gradcheck::check(&vae, &analytic, gen_loss, &coords, 1e-5);
        let worst = gradcheck::max_rel_err(&checks);
        assert!(worst < 1e-3, "generator loss FD mismatch: {worst}");

        // Discriminator objective against its own parameters.
        let fake = x.mapv(|v: f64| (v * 0.9 + 0.03).clamp(0.0, 1.0));
        let disc_loss = |d: &Params<f64>| {
            let mut g = Graph::<f64>::new();
            let id = build_disc_loss(&mut g, d, &[x.clone()], &[fake.clone()], &windows);
            g.scalar(id)
        };
        let mut g2 = Graph::<f64>::new();
        let dl = build_disc_loss(&mut g2, &disc, &[x.clone()], &[fake.clone()], &windows);
        let danalytic = g2.backward(dl);
        let dcoords = gradcheck::sample_coords(&disc, 6, 1);
        let dchecks = gradcheck::check(&disc, &danalytic, disc_loss, &dcoords, 1e-5);
        let dworst = gradcheck::max_rel_err(&dchecks);
        assert!(dworst < 1e-3, "disc loss FD mismatch: {dworst}");
    }

    #[test]
    fn vae_loss_parts_are_consistent() {
        let cfg = tiny_cfg();
        let mut vae = Params::<f32>::new();
        register_vae(&mut vae, &cfg, 21);
        let mut disc = Params::<f32>::new();
        register_discs(&mut disc, &DISC_WINDOWS, 22);
        let m = mel(&clip_for(7, ToyClass::Tone, 0)).unwrap();
        let parts = vae_loss(&vae, &disc, &cfg, &m, &mut substream(3, "test/loss", 0)).unwrap();
        let expect =
            parts.l_re + cfg.kl_weight * parts.l_kl + cfg.gan_weight * parts.l_gan;
        assert!((parts.total - expect).abs() < 1e-6 * expect.abs().max(1.0));
        assert!(parts.l_re > 0.0 && parts.l_kl >= 0.0);
    }

    #[test]
    fn training_requires_a_real_corpus() {
        let (train, val) = corpus();
        let opts = TrainVaeOptions { steps: 1, ..Default::default() };
        let err = train_vae(&tiny_cfg(), &train[..50], val, &opts);
        assert!(matches!(err, Err(CoreError::Config(_))));
    }

    #[test]
    fn short_training_improves_validation_and_roundtrips() {
        let (train, val) = corpus();
        let cfg = tiny_cfg();
        let opts = TrainVaeOptions { steps: 60, batch_size: 2, lr: 2e-3, seed: 9 };
        let out = train_vae(&cfg, train, val, &opts).unwrap();
        assert!(
            out.val_final < out.val_initial,
            "validation L1 did not improve: {} → {}",
            out.val_initial,
            out.val_final
        );
        assert_eq!(out.metrics.len(), 60);
        let csv = metrics_csv(&out.metrics);
        assert!(csv.starts_with("step,l_re,l_kl,l_gan,d_loss\n"));
        assert_eq!(csv.lines().count(), 61);

        // Reconstructions of held-out mels improve over the untrained net.
        let mut fresh = Params::<f32>::new();
        register_vae(&mut fresh, &cfg, opts.seed);
        let untrained = val_l1(&fresh, &cfg, val).unwrap();
        let trained = val_l1(&out.vae, &cfg, val).unwrap();
        assert!(trained < untrained);

        // Adversarially trained discriminator scores real above fake.
        let mut real_mean = 0.0;
        let mut fake_mean = 0.0;
        for m in val {
            let post = encode(&out.vae, &cfg, m).unwrap();
            let recon = decode(&out.vae, &cfg, &post.mean).unwrap();
            let r = &discriminate(&out.disc, m)[0];
            let f = &discriminate(&out.disc, &recon)[0];
            real_mean += r.iter().map(|&v| v as f64).sum::<f64>() / r.len() as f64;
            fake_mean += f.iter().map(|&v| v as f64).sum::<f64>() / f.len() as f64;
        }
        assert!(
            real_mean > fake_mean,
            "trained disc does not separate: real {real_mean} vs fake {fake_mean}"
        );

        // Checkpoint roundtrip is exact.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.sve1");
        let digest = save_vae(&path, &cfg, &out.vae, &out.disc).unwrap();
        assert_eq!(digest.len(), 64);
        let (cfg2, vae2, disc2, digest2) = load_vae(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(digest2, digest);
        for (name, v) in out.vae.iter() {
            assert_eq!(vae2.get(name), v, "vae param {name} drifted");
        }
        for (name, v) in out.disc.iter() {
            assert_eq!(disc2.get(name), v, "disc param {name} drifted");
        }
        // A wrong-magic container is refused.
        let mut other = Container::new(*b"TXE1", 1);
        other.set_meta("config", "{}");
        let bad = dir.path().join("bad.ckpt");
        other.write(&bad).unwrap();
        assert!(load_vae(&bad).is_err());
    }

    #[test]
    fn training_is_deterministic_under_a_fixed_seed() {
        let (train, val) = corpus();
        let cfg = tiny_cfg();
        let opts = TrainVaeOptions { steps: 10, batch_size: 2, lr: 1e-3, seed: 33 };
        let a = train_vae(&cfg, train, val, &opts).unwrap();
        let b = train_vae(&cfg, train, val, &opts).unwrap();
        let la = a.metrics.last().unwrap();
        let lb = b.metrics.last().unwrap();
        assert!((la.l_re - lb.l_re).abs() < 1e-6);
        assert!((la.d_loss - lb.d_loss).abs() < 1e-6);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.val_final, b.val_final);
    }

    #[test]
    fn kl_penalty_changes_posterior_statistics() {
        let (train, val) = corpus();
        let base = tiny_cfg();
        let with_kl = VaeConfig { kl_weight: 1e-6, ..base.clone() };
        let without = VaeConfig { kl_weight: 0.0, ..base };
        let opts = TrainVaeOptions { steps: 40, batch_size: 2, lr: 2e-3, seed: 12 };
        let a = train_vae(&with_kl, train, val, &opts).unwrap();
        let b = train_vae(&without, train, val, &opts).unwrap();
        let stat = |params: &Params<f32>, cfg: &VaeConfig| {
            let mut acc = 0.0f64;
            for m in val {
                let post = encode(params, cfg, m).unwrap();
                acc += post.logvar.iter().map(|&v| (v as f64).exp()).sum::<f64>()
                    / post.logvar.len() as f64;
            }
            acc / val.len() as f64
        };
        let va = stat(&a.vae, &with_kl);
        let vb = stat(&b.vae, &without);
        assert_ne!(va, vb, "kl_weight had no effect on posterior variance");
    }

    #[test]
    fn runaway_training_aborts_with_an_error() {
        let (train, val) = corpus();
        let cfg = tiny_cfg();
        let opts = TrainVaeOptions { steps: 400, batch_size: 2, lr: 30.0, seed: 2 };
        let err = train_vae(&cfg, train, val, &opts);
        assert!(matches!(err, Err(CoreError::Train(_))), "runaway lr should abort");
    }
}
