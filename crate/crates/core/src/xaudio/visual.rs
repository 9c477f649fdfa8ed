//! Visual conditioning: pooled, unit-normalized image/video embeddings
//! bridged into the diffusion model as a single cross-attention token via
//! a learned projection (the rest of the stack stays frozen).

use std::path::Path;

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use t2a_nn::ckpt::{sha256_hex, Container};
use t2a_nn::layers::init_normal;
use t2a_nn::opt::Adam;
use t2a_nn::rng::{normal_array, substream, uniform_usize};
use t2a_nn::{Graph, Params};

use crate::error::CoreError;
use crate::lddm::denoiser::{build_eps_loss, DenoiserConfig, UNetDenoiser};
use crate::lddm::stack::Stack;
use crate::lddm::train::{LdmMetricsRow, LdmModel};
use crate::lddm::{q_sample, sample, CondSeq, ScheduleSpec};
use crate::specmel::MelSpectrogram;
use crate::specvae::{decode, encode};
use crate::textenc::toyclap::ToyClap;
use crate::textenc::TextEncoder;

pub const V2A_MAGIC: [u8; 4] = *b"V2A1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualSource {
    Image,
    Video,
}

/// A pooled, unit-normalized visual embedding ready for conditioning.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VisualCondition {
    pub vector: Vec<f32>,
    pub source: VisualSource,
}

/// Input to [`visual_condition`]: one image embedding, or the per-frame
/// embeddings of a video.
pub enum VisualInput<'a> {
    Image(&'a [f32]),
    Video(&'a [Vec<f32>]),
}

fn normalize(mut v: Vec<f32>) -> Result<Vec<f32>, CoreError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::Config("visual embedding contains non-finite values".into()));
    }
    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(CoreError::Config("visual embedding has (near-)zero norm".into()));
    }
    for x in &mut v {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(v)
}

/// Pool a visual input into a single unit vector: an image contributes its
/// embedding directly; a video contributes the mean of 4 uniformly spaced
/// frame embeddings. The result is L2-normalized.
pub fn visual_condition(input: VisualInput) -> Result<VisualCondition, CoreError> {
    match input {
        VisualInput::Image(e) => {
            if e.is_empty() {
                return Err(CoreError::Config("empty image embedding".into()));
            }
            Ok(VisualCondition { vector: normalize(e.to_vec())?, source: VisualSource::Image })
        }
        VisualInput::Video(frames) => {
            if frames.is_empty() {
                return Err(CoreError::Config("video conditioning needs at least one frame".into()));
            }
            let d = frames[0].len();
            if d == 0 || frames.iter().any(|f| f.len() != d) {
                return Err(CoreError::Shape(
                    "video frame embeddings must share one nonzero dimension".into(),
                ));
            }
            let l = frames.len();
            let mut acc = vec![0.0f64; d];
            for i in 0..4 {
                let idx = if l == 1 {
                    0
                } else {
                    ((i as f64) * (l as f64 - 1.0) / 3.0).round() as usize
                };
                for (a, &x) in acc.iter_mut().zip(frames[idx].iter()) {
                    *a += x as f64;
                }
            }
            let mean: Vec<f32> = acc.into_iter().map(|a| (a / 4.0) as f32).collect();
            Ok(VisualCondition { vector: normalize(mean)?, source: VisualSource::Video })
        }
    }
}

/// JSON descriptor the toy embedding provider understands.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualDescriptor {
    /// Caption-style class text, e.g. "a pure tone".
    pub class: String,
    #[serde(default = "default_scale")]
    pub scale: f32,
}

fn default_scale() -> f32 {
    1.0
}

/// Toy joint image-audio embedding provider: the "image" of a sound class
/// embeds exactly where the contrastive text tower puts that class, so the
/// visual bridge can be evaluated against text conditioning.
pub struct ToyVisualEmbedder<'a> {
    pub clap: &'a ToyClap,
}

impl ToyVisualEmbedder<'_> {
    pub fn embed(&self, descriptor: &VisualDescriptor) -> Vec<f32> {
        self.clap
            .embed_text_vec(&descriptor.class)
            .into_iter()
            .map(|v| v * descriptor.scale)
            .collect()
    }

    pub fn embed_json(&self, json: &str) -> Result<Vec<f32>, CoreError> {
        let d: VisualDescriptor = serde_json::from_str(json)?;
        Ok(self.embed(&d))
    }
}

/// The visual-to-audio bridge: a finetuned diffusion model plus the learned
/// projection that turns a visual embedding into one conditioning token.
pub struct V2aModel {
    pub ldm: LdmModel,
    /// Holds `v2a/wg.w`, shaped (visual dim, cond channels).
    pub wg: Params<f32>,
}

impl V2aModel {
    /// Fresh projection on top of an existing diffusion model.
    pub fn init(ldm: LdmModel, visual_dim: usize, seed: u64) -> Result<Self, CoreError> {
        let cfg = &ldm.denoiser.net.cfg;
        if cfg.in_channels != cfg.out_channels {
            return Err(CoreError::Config(
                "the visual bridge needs a plain denoiser, not an inpainting one".into(),
            ));
        }
        if visual_dim == 0 {
            return Err(CoreError::Config("visual dimension must be positive".into()));
        }
        let mut wg = Params::new();
        init_normal(
            &mut wg,
            seed,
            "v2a/wg.w",
            &[visual_dim, cfg.cond_channels],
            (1.0 / visual_dim as f64).sqrt(),
        );
        Ok(V2aModel { ldm, wg })
    }

    pub fn visual_dim(&self) -> usize {
        self.wg.get("v2a/wg.w").shape()[0]
    }

    /// Project a visual vector to the single conditioning token.
    pub fn project(&self, v: &[f32]) -> Result<CondSeq, CoreError> {
        let w = self
            .wg
            .get("v2a/wg.w")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| CoreError::Shape(format!("projection weight: {e}")))?;
        if v.len() != w.dim().0 {
            return Err(CoreError::Shape(format!(
                "visual vector has {} dims, projection expects {}",
                v.len(),
                w.dim().0
            )));
        }
        let row = Array2::from_shape_vec((1, v.len()), v.to_vec())
            .expect("row vector is always contiguous");
        Ok(row.dot(&w))
    }
}

pub fn save_v2a(path: &Path, model: &V2aModel) -> Result<String, CoreError> {
    let mut c = Container::new(V2A_MAGIC, 1);
    c.set_meta("denoiser", serde_json::to_string(&model.ldm.denoiser.net.cfg)?);
    c.set_meta("schedule", serde_json::to_string(&model.ldm.schedule.spec())?);
    c.set_meta("latent_scale", serde_json::to_string(&model.ldm.latent_scale)?);
    c.set_meta("drop_prob", serde_json::to_string(&model.ldm.drop_prob)?);
    c.set_meta("vae_digest", model.ldm.vae_digest.clone());
    c.set_meta("textenc_digest", model.ldm.textenc_digest.clone());
    c.insert_params(&model.ldm.denoiser.params);
    c.insert_params(&model.wg);
    let bytes = c.to_bytes();
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_v2a(path: &Path) -> Result<(V2aModel, String), CoreError> {
    let c = Container::read(path)?;
    c.expect_magic(&V2A_MAGIC)?;
    let cfg: DenoiserConfig = serde_json::from_str(c.require_meta("denoiser")?)?;
    let spec: ScheduleSpec = serde_json::from_str(c.require_meta("schedule")?)?;
    let latent_scale: f32 = serde_json::from_str(c.require_meta("latent_scale")?)?;
    let drop_prob: f64 = serde_json::from_str(c.require_meta("drop_prob")?)?;
    let unet = c.extract_params("unet/");
    let wg = c.extract_params("v2a/");
    if unet.len() == 0 || wg.len() == 0 {
        return Err(CoreError::Config("visual-bridge checkpoint is missing parameters".into()));
    }
    let ldm = LdmModel {
        denoiser: UNetDenoiser::from_params(&cfg, unet)?,
        schedule: spec.build()?,
        latent_scale,
        drop_prob,
        vae_digest: c.require_meta("vae_digest")?.to_string(),
        textenc_digest: c.require_meta("textenc_digest")?.to_string(),
    };
    let digest = sha256_hex(&c.to_bytes());
    Ok((V2aModel { ldm, wg }, digest))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct V2aOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for V2aOptions {
    fn default() -> Self {
        V2aOptions { steps: 500, batch_size: 2, lr: 1e-2, seed: 0 }
    }
}

pub struct V2aTraining {
    pub model: V2aModel,
    pub metrics: Vec<LdmMetricsRow>,
}

/// Learn the visual projection on (spectrogram, visual condition) pairs
/// with the denoising objective. The diffusion backbone stays frozen —
/// gradients flow through its cross-attention into the projection only.
pub fn v2a_finetune(
    items: &[(MelSpectrogram, VisualCondition)],
    stack: &Stack,
    opts: &V2aOptions,
) -> Result<V2aTraining, CoreError> {
    if items.is_empty() {
        return Err(CoreError::Train("the visual bridge needs at least one example".into()));
    }
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(CoreError::Config("steps and batch_size must be positive".into()));
    }
    let mut model = V2aModel::init(stack.ldm.clone(), items[0].1.vector.len(), opts.seed)?;
    for (i, (_, cond)) in items.iter().enumerate() {
        if cond.vector.len() != model.visual_dim() {
            return Err(CoreError::Shape(format!(
                "visual condition {i} has {} dims, expected {}",
                cond.vector.len(),
                model.visual_dim()
            )));
        }
    }
    let scale = model.ldm.latent_scale;
    let posteriors: Vec<_> = items
        .iter()
        .map(|(mel, _)| encode(&stack.vae, &stack.vae_cfg, mel))
        .collect::<Result<_, _>>()?;

    // One parameter store: frozen backbone + trainable projection. Only the
    // projection's gradients are applied.
    let mut params = model.ldm.denoiser.params.clone();
    params.insert("v2a/wg.w", model.wg.get("v2a/wg.w").clone());
    let net = &model.ldm.denoiser.net;
    let mut adam = Adam::<f32>::new();
    let mut metrics = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut pick_rng = substream(opts.seed, "v2a/pick", step as u64);
        let mut step_rng = substream(opts.seed, "v2a/step", step as u64);
        let mut g = Graph::<f32>::new();
        let mut losses = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            let i = uniform_usize(&mut pick_rng, items.len());
            let z0 = posteriors[i].sample(&mut step_rng).mapv(|v| v * scale);
            let t = 1 + uniform_usize(&mut step_rng, model.ldm.schedule.t_max());
            let eps: Array3<f32> = normal_array(&mut step_rng, z0.shape())
                .into_dimensionality::<ndarray::Ix3>()
                .expect("3-d latent");
            let z_t = q_sample(&z0, t, &eps, &model.ldm.schedule)?;
            let v = Array2::from_shape_vec((1, model.visual_dim()), items[i].1.vector.clone())
                .expect("row vector is always contiguous");
            let vi = g.input(v.into_dyn());
            let w = g.param(&params, "v2a/wg.w");
            let token = g.matmul(vi, w);
            losses.push(build_eps_loss(&mut g, net, &params, &z_t.into_dyn(), t, token, &eps.into_dyn()));
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l);
        }
        let total = g.scale(total, 1.0 / opts.batch_size as f64);
        let loss = g.scalar(total) as f64;
        if !loss.is_finite() {
            return Err(CoreError::Train(format!("non-finite bridge loss at step {step}")));
        }
        let mut grads = g.backward(total);
        grads.map.retain(|name, _| name.starts_with("v2a/"));
        adam.step(&mut params, &grads, opts.lr);
        metrics.push(LdmMetricsRow { step, loss });
    }
    *model.wg.get_mut("v2a/wg.w") = params.get("v2a/wg.w").clone();
    Ok(V2aTraining { model, metrics })
}

/// Sample audio from a visual condition: the projected token is the whole
/// conditioning sequence; the unconditional branch reuses the text
/// encoder's empty condition, exactly as in text-to-audio sampling.
pub fn v2a_sample(
    model: &V2aModel,
    stack: &Stack,
    visual: &VisualCondition,
    s: f64,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MelSpectrogram, CoreError> {
    model.ldm.verify_frozen(&stack.vae_digest, &stack.textenc_digest)?;
    let token = model.project(&visual.vector)?;
    let empty = stack.encoder.empty_condition()?;
    let (c, lh, lw) = stack.vae_cfg.latent_shape();
    let cfg = &model.ldm.denoiser.net.cfg;
    if cfg.out_channels != c || cfg.latent_h != lh || cfg.latent_w != lw {
        return Err(CoreError::Config(format!(
            "bridge latent ({}, {}, {}) does not match autoencoder latent ({c}, {lh}, {lw})",
            cfg.out_channels, cfg.latent_h, cfg.latent_w
        )));
    }
    let z = sample(
        &model.ldm.denoiser,
        &token,
        &empty.tokens,
        s,
        &model.ldm.schedule,
        (c, lh, lw),
        n_steps,
        false,
        rng,
    );
    let unscaled = z.mapv(|v| v / model.ldm.latent_scale);
    decode(&stack.vae, &stack.vae_cfg, &unscaled)
}

#[cfg(test)]
mod tests {
    use super::super::testkit::{fixture_mel, untrained_stack};
    use super::*;
    use crate::lddm::train::save_ldm;
    use crate::textenc::toyclap::JOINT_DIM;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn conditions_are_unit_normalized_and_pooled() {
        let e = vec![3.0f32, 4.0];
        let img = visual_condition(VisualInput::Image(&e)).unwrap();
        assert_eq!(img.source, VisualSource::Image);
        assert!(close(&img.vector, &[0.6, 0.8], 1e-6));
        let norm: f32 = img.vector.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);

        // Four identical frames behave exactly like the single image.
        let frames = vec![e.clone(), e.clone(), e.clone(), e.clone()];
        let vid = visual_condition(VisualInput::Video(&frames)).unwrap();
        assert_eq!(vid.source, VisualSource::Video);
        assert!(close(&vid.vector, &img.vector, 1e-6));

        // Permuting the four frames leaves the condition unchanged.
        let a = vec![1.0f32, 0.0];
        let b = vec![0.0f32, 1.0];
        let c = vec![1.0f32, 1.0];
        let d = vec![2.0f32, 0.5];
        let v1 = visual_condition(VisualInput::Video(&[a.clone(), b.clone(), c.clone(), d.clone()]))
            .unwrap();
        let v2 = visual_condition(VisualInput::Video(&[d, c, b, a])).unwrap();
        assert!(close(&v1.vector, &v2.vector, 1e-6));
    }

    #[test]
    fn video_pooling_picks_uniformly_spaced_frames() {
        // 9 frames of one-hot embeddings: uniform spacing picks 0, 3, 5, 8.
        let mut frames = Vec::new();
        for i in 0..9 {
            let mut f = vec![0.0f32; 9];
            f[i] = 1.0;
            frames.push(f);
        }
        let cond = visual_condition(VisualInput::Video(&frames)).unwrap();
        let hot: Vec<usize> =
            cond.vector.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![0, 3, 5, 8]);

        // A single frame is used for all four picks.
        let one = visual_condition(VisualInput::Video(&frames[..1])).unwrap();
        assert!(close(&one.vector, &visual_condition(VisualInput::Image(&frames[0])).unwrap().vector, 1e-6));
    }

    #[test]
    fn degenerate_visual_inputs_are_refused() {
        assert!(visual_condition(VisualInput::Video(&[])).is_err());
        assert!(visual_condition(VisualInput::Image(&[])).is_err());
        assert!(visual_condition(VisualInput::Image(&[0.0, 0.0])).is_err());
        assert!(visual_condition(VisualInput::Image(&[f32::NAN, 1.0])).is_err());
        let ragged = vec![vec![1.0f32, 2.0], vec![1.0f32]];
        assert!(visual_condition(VisualInput::Video(&ragged)).is_err());
    }

    #[test]
    fn toy_embedder_tracks_the_text_tower() {
        let stack = untrained_stack(90);
        let embedder = ToyVisualEmbedder { clap: &stack.encoder };
        let d: VisualDescriptor =
            serde_json::from_str(r#"{"class": "a pure tone", "scale": 2.0}"#).unwrap();
        let e = embedder.embed(&d);
        let text = stack.encoder.embed_text_vec("a pure tone");
        assert_eq!(e.len(), JOINT_DIM);
        assert!(close(&e, &text.iter().map(|v| v * 2.0).collect::<Vec<_>>(), 1e-6));

        // Scale cancels under normalization: the condition is scale-free.
        let c2 = visual_condition(VisualInput::Image(&e)).unwrap();
        let c1 = visual_condition(VisualInput::Image(&text)).unwrap();
        assert!(close(&c1.vector, &c2.vector, 1e-6));

        let half = embedder.embed_json(r#"{"class": "a pure tone"}"#).unwrap();
        assert!(close(&half, &text, 1e-6));
        assert!(embedder.embed_json(r#"{"class": "x", "alpha": 1}"#).is_err());
    }

    #[test]
    fn bridge_checkpoints_roundtrip() {
        let stack = untrained_stack(91);
        let model = V2aModel::init(stack.ldm.clone(), JOINT_DIM, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2a.ckpt");
        let d1 = save_v2a(&path, &model).unwrap();
        let (loaded, d2) = load_v2a(&path).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(loaded.visual_dim(), JOINT_DIM);
        assert_eq!(loaded.ldm.denoiser.net.cfg, model.ldm.denoiser.net.cfg);
        assert_eq!(loaded.wg.get("v2a/wg.w"), model.wg.get("v2a/wg.w"));
        for (name, value) in model.ldm.denoiser.params.iter() {
            assert_eq!(value, loaded.ldm.denoiser.params.get(name));
        }

        // A plain diffusion checkpoint is not a bridge checkpoint.
        let ldm_path = dir.path().join("ldm.ckpt");
        save_ldm(&ldm_path, &stack.ldm).unwrap();
        assert!(load_v2a(&ldm_path).is_err());

        // Projection shape checks.
        let token = model.project(&vec![0.5; JOINT_DIM]).unwrap();
        assert_eq!(token.dim(), (1, stack.ldm.denoiser.net.cfg.cond_channels));
        assert!(model.project(&[0.5; 3]).is_err());
    }

    #[test]
    fn finetuning_moves_only_the_projection() {
        let mut stack = untrained_stack(92);
        // The untrained output head is zero-initialized, which blocks every
        // upstream gradient — including the projection's. Nudge it off zero
        // to stand in for a trained backbone.
        {
            let p = &mut stack.ldm.denoiser.params;
            let shape = p.get("unet/out.w").shape().to_vec();
            let mut r = substream(92, "outw", 0);
            *p.get_mut("unet/out.w") = normal_array::<f32>(&mut r, &shape).mapv(|v| v * 0.05);
        }
        let mel = fixture_mel(93);
        let cond = visual_condition(VisualInput::Image(
            &stack.encoder.embed_text_vec("a pure tone"),
        ))
        .unwrap();
        let items = vec![(mel, cond)];
        let opts = V2aOptions { steps: 3, batch_size: 2, lr: 1e-2, seed: 6 };
        let run1 = v2a_finetune(&items, &stack, &opts).unwrap();
        let run2 = v2a_finetune(&items, &stack, &opts).unwrap();
        assert_eq!(run1.metrics, run2.metrics, "bridge training must be deterministic");
        assert!(run1.metrics.iter().all(|r| r.loss.is_finite()));

        for (name, value) in stack.ldm.denoiser.params.iter() {
            assert_eq!(
                value,
                run1.model.ldm.denoiser.params.get(name),
                "backbone parameter {name} must stay frozen"
            );
        }
        let init = V2aModel::init(stack.ldm.clone(), JOINT_DIM, opts.seed).unwrap();
        assert_ne!(
            init.wg.get("v2a/wg.w"),
            run1.model.wg.get("v2a/wg.w"),
            "the projection must actually train"
        );
    }

    #[test]
    fn sampling_from_visuals_is_seeded_and_ignores_the_text_branch_at_s1() {
        let stack = untrained_stack(94);
        let model = V2aModel::init(stack.ldm.clone(), JOINT_DIM, 18).unwrap();
        let cond = visual_condition(VisualInput::Image(
            &stack.encoder.embed_text_vec("a chirp rising"),
        ))
        .unwrap();

        let mut r1 = substream(95, "v2a", 0);
        let a = v2a_sample(&model, &stack, &cond, 2.0, 6, &mut r1).unwrap();
        assert_eq!(a.values.dim(), (80, 624));
        let mut r2 = substream(95, "v2a", 0);
        let b = v2a_sample(&model, &stack, &cond, 2.0, 6, &mut r2).unwrap();
        assert_eq!(a.values, b.values);

        // At s = 1 the unconditional branch is never evaluated: swapping in
        // a different text encoder (hence different empty condition) must
        // not change the sample. The autoencoder stays the same.
        let mut other = untrained_stack(94);
        other.encoder = untrained_stack(40).encoder;
        let mut r3 = substream(95, "v2a", 1);
        let c1 = v2a_sample(&model, &stack, &cond, 1.0, 6, &mut r3).unwrap();
        let mut r4 = substream(95, "v2a", 1);
        let c2 = v2a_sample(&model, &other, &cond, 1.0, 6, &mut r4).unwrap();
        assert_eq!(c1.values, c2.values, "s = 1 must not consult the empty condition");

        // Digest verification still guards the bridge path.
        let mut mismatched = untrained_stack(94);
        mismatched.vae_digest = "deadbeef".into();
        let mut r5 = substream(95, "v2a", 2);
        let err = v2a_sample(&model, &mismatched, &cond, 1.0, 6, &mut r5)
            .err()
            .expect("digest mismatch must be refused");
        assert!(matches!(err, CoreError::DigestMismatch(_)), "got {err}");
    }
}
