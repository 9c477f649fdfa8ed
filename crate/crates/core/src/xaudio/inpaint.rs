//! Mask-conditioned inpainting: a finetuned denoiser whose input channels
//! carry the noised latent, the masked-input latent, and the pooled mask,
//! plus the composed sampling path that keeps the unmasked region exact.

use ndarray::{s, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use t2a_nn::opt::Adam;
use t2a_nn::rng::{normal_array, substream, uniform, uniform_usize};
use t2a_nn::Graph;

use super::masks::{downsample_mask_max, gen_frame_mask, gen_irregular_mask, validate_mask, MaskKind};
use crate::error::CoreError;
use crate::lddm::denoiser::{build_eps_loss, UNetDenoiser};
use crate::lddm::stack::Stack;
use crate::lddm::train::{LdmMetricsRow, LdmModel};
use crate::lddm::{q_sample, sample, CondSeq, EpsModel};
use crate::specmel::MelSpectrogram;
use crate::specvae::encode;
use crate::textenc::{TextCondition, TextEncoder};

/// True iff the denoiser carries the inpainting context channels
/// (noised latent ‖ masked-input latent ‖ pooled mask).
pub fn is_inpainting(model: &LdmModel) -> bool {
    let cfg = &model.denoiser.net.cfg;
    cfg.in_channels == 2 * cfg.out_channels + 1
}

/// Widen a plain denoiser for inpainting: the first convolution grows from
/// C to 2C+1 input channels, with the new channels zero-initialized so the
/// extended model starts out computing exactly what the base model did.
pub fn extend_for_inpainting(base: &LdmModel) -> Result<LdmModel, CoreError> {
    let cfg = &base.denoiser.net.cfg;
    if cfg.in_channels != cfg.out_channels {
        return Err(CoreError::Config(format!(
            "expected a plain denoiser (equal input/output channels), got {} in / {} out",
            cfg.in_channels, cfg.out_channels
        )));
    }
    let c = cfg.out_channels;
    let mut wide = cfg.clone();
    wide.in_channels = 2 * c + 1;
    let mut params = base.denoiser.params.clone();
    let old = params
        .get("unet/in.w")
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| CoreError::Shape(format!("input conv weight: {e}")))?;
    let (w0, _cin, kh, kw) = old.dim();
    let mut next = ndarray::Array4::<f32>::zeros((w0, 2 * c + 1, kh, kw));
    next.slice_mut(s![.., ..c, .., ..]).assign(&old);
    *params.get_mut("unet/in.w") = next.into_dyn();
    Ok(LdmModel {
        denoiser: UNetDenoiser::from_params(&wide, params)?,
        schedule: base.schedule.clone(),
        latent_scale: base.latent_scale,
        drop_prob: base.drop_prob,
        vae_digest: base.vae_digest.clone(),
        textenc_digest: base.textenc_digest.clone(),
    })
}

/// Stack the three context blocks into the denoiser's input layout.
fn with_context(z: &Array3<f32>, ctx: &Array3<f32>, mask_lat: &Array3<f32>) -> Array3<f32> {
    ndarray::concatenate(Axis(0), &[z.view(), ctx.view(), mask_lat.view()])
        .expect("context channels share the latent grid")
}

/// Adapter that fixes the context channels so the generic sampling loop
/// sees an ordinary ε-model over the C latent channels.
pub struct InpaintEps<'a> {
    pub denoiser: &'a UNetDenoiser,
    pub ctx: &'a Array3<f32>,
    pub mask_lat: &'a Array3<f32>,
}

impl EpsModel for InpaintEps<'_> {
    fn eps(&self, z: &Array3<f32>, t: usize, cond: &CondSeq) -> Array3<f32> {
        self.denoiser.eps(&with_context(z, self.ctx, self.mask_lat), t, cond)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintFinetuneOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for InpaintFinetuneOptions {
    fn default() -> Self {
        InpaintFinetuneOptions { steps: 2000, batch_size: 2, lr: 1e-3, seed: 0 }
    }
}

/// Mutable finetuning state, advanced one masked example at a time.
pub struct InpaintTrainer {
    pub model: LdmModel,
    vae_cfg: crate::specvae::VaeConfig,
    vae: t2a_nn::Params<f32>,
    adam: Adam<f32>,
    lr: f64,
}

impl InpaintTrainer {
    /// Start from the plain diffusion model inside `stack`, widened for
    /// inpainting. Refuses stacks that already carry context channels.
    pub fn new(stack: &Stack, lr: f64) -> Result<Self, CoreError> {
        let model = extend_for_inpainting(&stack.ldm)?;
        Ok(InpaintTrainer {
            model,
            vae_cfg: stack.vae_cfg.clone(),
            vae: stack.vae.clone(),
            adam: Adam::new(),
            lr,
        })
    }

    /// One gradient step on one (spectrogram, mask, condition) triple:
    /// draw t and ε, noise the clean latent, and regress ε from
    /// [z_t ‖ masked-input latent ‖ pooled mask]. Returns the loss.
    pub fn step(
        &mut self,
        mel: &MelSpectrogram,
        mask: &Array2<f32>,
        cond: &TextCondition,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, CoreError> {
        validate_mask(mask)?;
        let scale = self.model.latent_scale;
        let post = encode(&self.vae, &self.vae_cfg, mel)?;
        let z0 = post.sample(rng).mapv(|v| v * scale);
        let ctx = masked_context(&self.vae, &self.vae_cfg, mel, mask, scale)?;
        let (_, lh, lw) = z0.dim();
        let mask_lat = downsample_mask_max(mask, lh, lw)?;
        let zin = with_context(&z0, &ctx, &mask_lat);

        let t = 1 + uniform_usize(rng, self.model.schedule.t_max());
        let eps: Array3<f32> = normal_array(rng, z0.shape())
            .into_dimensionality::<ndarray::Ix3>()
            .expect("3-d latent");
        // Only the first C channels diffuse; context channels stay clean.
        let c = z0.dim().0;
        let mut z_t = zin.clone();
        let noised = q_sample(&z0, t, &eps, &self.model.schedule)?;
        z_t.slice_mut(s![..c, .., ..]).assign(&noised);

        let mut g = Graph::<f32>::new();
        let cond_node = g.input(cond.tokens.clone().into_dyn());
        let loss_id = build_eps_loss(
            &mut g,
            &self.model.denoiser.net,
            &self.model.denoiser.params,
            &z_t.into_dyn(),
            t,
            cond_node,
            &eps.into_dyn(),
        );
        let loss = g.scalar(loss_id) as f64;
        if !loss.is_finite() {
            return Err(CoreError::Train(format!("non-finite inpainting loss at t = {t}")));
        }
        let grads = g.backward(loss_id);
        self.adam.step(&mut self.model.denoiser.params, &grads, self.lr);
        Ok(loss)
    }
}

/// Random training mask: uniform over the three irregular kinds and a
/// frame mask with p drawn from [0.3, 0.7].
fn training_mask(rng: &mut ChaCha8Rng) -> Array2<f32> {
    match uniform_usize(rng, 4) {
        0 => gen_irregular_mask(MaskKind::IrregularThin, rng),
        1 => gen_irregular_mask(MaskKind::IrregularMedium, rng),
        2 => gen_irregular_mask(MaskKind::IrregularThick, rng),
        _ => {
            let p = 0.3 + 0.4 * uniform(rng) as f64;
            gen_frame_mask(p, 10, rng).expect("p in (0.3, 0.7) is valid")
        }
    }
}

pub struct InpaintTraining {
    pub model: LdmModel,
    pub metrics: Vec<LdmMetricsRow>,
}

/// Finetune the stack's diffusion model for inpainting over captioned
/// spectrograms, sampling a fresh random mask per example. Deterministic
/// in `opts.seed`.
pub fn inpaint_finetune(
    train: &[(MelSpectrogram, String)],
    stack: &Stack,
    opts: &InpaintFinetuneOptions,
) -> Result<InpaintTraining, CoreError> {
    if train.is_empty() {
        return Err(CoreError::Train("inpainting finetune needs at least one example".into()));
    }
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(CoreError::Config("steps and batch_size must be positive".into()));
    }
    let mut trainer = InpaintTrainer::new(stack, opts.lr)?;
    let conds: Vec<TextCondition> = train
        .iter()
        .map(|(_, caption)| stack.encoder.encode_text(caption))
        .collect::<Result<_, _>>()?;
    let mut metrics = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut pick_rng = substream(opts.seed, "inp/pick", step as u64);
        let mut mask_rng = substream(opts.seed, "inp/mask", step as u64);
        let mut step_rng = substream(opts.seed, "inp/step", step as u64);
        let mut acc = 0.0f64;
        for _ in 0..opts.batch_size {
            let i = uniform_usize(&mut pick_rng, train.len());
            let mask = training_mask(&mut mask_rng);
            acc += trainer.step(&train[i].0, &mask, &conds[i], &mut step_rng)?;
        }
        metrics.push(LdmMetricsRow { step, loss: acc / opts.batch_size as f64 });
    }
    Ok(InpaintTraining { model: trainer.model, metrics })
}

/// Encode the mask-deleted input and scale it into diffusion space.
fn masked_context(
    vae: &t2a_nn::Params<f32>,
    vae_cfg: &crate::specvae::VaeConfig,
    mel: &MelSpectrogram,
    mask: &Array2<f32>,
    scale: f32,
) -> Result<Array3<f32>, CoreError> {
    let deleted = MelSpectrogram::new(&mel.values * &mask.mapv(|m| 1.0 - m))?;
    let post = encode(vae, vae_cfg, &deleted)?;
    Ok(post.mean.mapv(|v| v * scale))
}

/// Per-cell weight of the model output when composing the final result:
/// 0 on unmasked cells, 1 deep inside the mask, and a linear ramp over the
/// 2-frame seam along the time axis.
pub fn blend_weights(mask: &Array2<f32>) -> Array2<f32> {
    let (rows, cols) = mask.dim();
    let far = cols as i64 + 1;
    let mut weights = Array2::<f32>::zeros((rows, cols));
    for r in 0..rows {
        let mut dist = vec![far; cols];
        let mut run = far;
        for c in 0..cols {
            run = if mask[(r, c)] == 0.0 { 0 } else { (run + 1).min(far) };
            dist[c] = run;
        }
        run = far;
        for c in (0..cols).rev() {
            run = if mask[(r, c)] == 0.0 { 0 } else { (run + 1).min(far) };
            dist[c] = dist[c].min(run);
        }
        for c in 0..cols {
            weights[(r, c)] = (dist[c].min(3) as f32) / 3.0;
        }
    }
    weights
}

/// Paste the model output into the masked region of the input, blending
/// over a 2-frame seam. Cells outside the mask (weight 0) keep the input
/// values bit-for-bit; cells deep inside (weight 1) take the model output.
pub fn compose_with_seam(
    input: &Array2<f32>,
    model_out: &Array2<f32>,
    mask: &Array2<f32>,
) -> Array2<f32> {
    let w = blend_weights(mask);
    let mut out = input.clone();
    for ((r, c), &alpha) in w.indexed_iter() {
        if alpha == 1.0 {
            out[(r, c)] = model_out[(r, c)];
        } else if alpha > 0.0 {
            out[(r, c)] = (1.0 - alpha) * input[(r, c)] + alpha * model_out[(r, c)];
        }
    }
    out
}

/// Fill the masked region with the inpainting model: full reverse sampling
/// with the context channels pinned, then decode and compose so the
/// unmasked region comes straight from the input.
#[allow(clippy::too_many_arguments)]
pub fn inpaint(
    stack: &Stack,
    mel: &MelSpectrogram,
    mask: &Array2<f32>,
    prompt: &str,
    s: f64,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MelSpectrogram, CoreError> {
    validate_mask(mask)?;
    if !is_inpainting(&stack.ldm) {
        let cfg = &stack.ldm.denoiser.net.cfg;
        return Err(CoreError::Config(format!(
            "inpainting needs a denoiser with 2C+1 input channels, got {} in / {} out; \
             finetune the model for inpainting first",
            cfg.in_channels, cfg.out_channels
        )));
    }
    let scale = stack.ldm.latent_scale;
    let ctx = masked_context(&stack.vae, &stack.vae_cfg, mel, mask, scale)?;
    let (c, lh, lw) = ctx.dim();
    let mask_lat = downsample_mask_max(mask, lh, lw)?;
    let adapter = InpaintEps { denoiser: &stack.ldm.denoiser, ctx: &ctx, mask_lat: &mask_lat };
    let cond = stack.encoder.encode_text(prompt)?;
    let empty = stack.encoder.empty_condition()?;
    let z = sample(
        &adapter,
        &cond.tokens,
        &empty.tokens,
        s,
        &stack.ldm.schedule,
        (c, lh, lw),
        n_steps,
        false,
        rng,
    );
    let raw = stack.decode_scaled(&z)?;
    MelSpectrogram::new(compose_with_seam(&mel.values, &raw.values, mask))
}

/// Baseline fill: replace the masked region with Gaussian noise matched to
/// the unmasked region's mean and standard deviation, clamped to [0, 1].
pub fn noise_fill_baseline(
    mel: &MelSpectrogram,
    mask: &Array2<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<MelSpectrogram, CoreError> {
    validate_mask(mask)?;
    let mut mean = 0.0f64;
    let mut count = 0usize;
    for (&v, &m) in mel.values.iter().zip(mask.iter()) {
        if m == 0.0 {
            mean += v as f64;
            count += 1;
        }
    }
    let (mu, sigma) = if count > 1 {
        let mu = mean / count as f64;
        let mut var = 0.0f64;
        for (&v, &m) in mel.values.iter().zip(mask.iter()) {
            if m == 0.0 {
                var += (v as f64 - mu).powi(2);
            }
        }
        (mu, (var / (count - 1) as f64).sqrt())
    } else {
        (0.5, 0.25)
    };
    let (rows, cols) = mel.values.dim();
    let noise = normal_array::<f32>(rng, &[rows, cols]);
    let mut out = mel.values.clone();
    for ((r, c), v) in out.indexed_iter_mut() {
        if mask[(r, c)] == 1.0 {
            let draw = mu + sigma * noise[[r, c]] as f64;
            *v = draw.clamp(0.0, 1.0) as f32;
        }
    }
    MelSpectrogram::new(out)
}

/// Mean absolute difference over the masked cells (0 if the mask is empty).
pub fn masked_l1(a: &MelSpectrogram, b: &MelSpectrogram, mask: &Array2<f32>) -> f64 {
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for ((&x, &y), &m) in a.values.iter().zip(b.values.iter()).zip(mask.iter()) {
        if m == 1.0 {
            acc += (x as f64 - y as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}
