//! The loaded generation stack: frozen autoencoder + text encoder + the
//! diffusion model trained against them, with digest verification at load
//! time so mismatched component combinations are refused up front.

use std::path::Path;

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use t2a_nn::ckpt::sha256_hex_file;
use t2a_nn::Params;

use super::train::{load_ldm, LdmModel};
use super::{sample, strided_timesteps};
use crate::error::CoreError;
use crate::specmel::MelSpectrogram;
use crate::specvae::train::load_vae;
use crate::specvae::{decode, encode, VaeConfig};
use crate::textenc::toyclap::ToyClap;
use crate::textenc::TextEncoder;

/// Frozen autoencoder + text encoder + diffusion model, ready to sample.
pub struct Stack {
    pub vae_cfg: VaeConfig,
    pub vae: Params<f32>,
    pub encoder: ToyClap,
    pub ldm: LdmModel,
    pub vae_digest: String,
    pub textenc_digest: String,
    pub ldm_digest: String,
}

impl Stack {
    /// Load all three checkpoints and verify that the diffusion model was
    /// trained against exactly these frozen components. `allow_mismatch`
    /// downgrades a digest mismatch to a silent pass (for deliberate
    /// component swaps); shape incompatibilities are still refused.
    pub fn load(
        vae_path: &Path,
        textenc_path: &Path,
        ldm_path: &Path,
        allow_mismatch: bool,
    ) -> Result<Self, CoreError> {
        let (vae_cfg, vae, _disc, vae_digest) = load_vae(vae_path)?;
        let encoder = ToyClap::load(textenc_path)?;
        let textenc_digest = sha256_hex_file(textenc_path)?;
        let (ldm, ldm_digest) = load_ldm(ldm_path)?;
        if !allow_mismatch {
            ldm.verify_frozen(&vae_digest, &textenc_digest)?;
        }
        let (c, h, w) = vae_cfg.latent_shape();
        let cfg = &ldm.denoiser.net.cfg;
        if cfg.out_channels != c || cfg.latent_h != h || cfg.latent_w != w {
            return Err(CoreError::Config(format!(
                "diffusion latent ({}, {}, {}) does not match autoencoder latent ({c}, {h}, {w})",
                cfg.out_channels, cfg.latent_h, cfg.latent_w
            )));
        }
        Ok(Stack { vae_cfg, vae, encoder, ldm, vae_digest, textenc_digest, ldm_digest })
    }

    /// Latent shape the diffusion model samples in.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.vae_cfg.latent_shape()
    }

    /// Posterior mean of the autoencoder, scaled into diffusion space.
    pub fn encode_mean_scaled(&self, mel: &MelSpectrogram) -> Result<Array3<f32>, CoreError> {
        let post = encode(&self.vae, &self.vae_cfg, mel)?;
        Ok(post.mean.mapv(|v| v * self.ldm.latent_scale))
    }

    /// Decode a diffusion-space latent back to a spectrogram.
    pub fn decode_scaled(&self, z: &Array3<f32>) -> Result<MelSpectrogram, CoreError> {
        let unscaled = z.mapv(|v| v / self.ldm.latent_scale);
        decode(&self.vae, &self.vae_cfg, &unscaled)
    }

    /// Refuse inpainting-shaped denoisers in the plain sampling path.
    pub fn require_plain_denoiser(&self) -> Result<(), CoreError> {
        let cfg = &self.ldm.denoiser.net.cfg;
        if cfg.in_channels != cfg.out_channels {
            return Err(CoreError::Config(format!(
                "denoiser takes {} input channels but produces {}; this checkpoint \
                 carries extra conditioning channels and cannot run unconditional sampling",
                cfg.in_channels, cfg.out_channels
            )));
        }
        Ok(())
    }

    /// Text-to-audio: sample a latent under classifier-free guidance `s`
    /// and decode it. All randomness comes from `rng`.
    pub fn generate(
        &self,
        prompt: &str,
        s: f64,
        n_steps: usize,
        deterministic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<MelSpectrogram, CoreError> {
        self.require_plain_denoiser()?;
        let cond = self.encoder.encode_text(prompt)?;
        let empty = self.encoder.empty_condition()?;
        let z = sample(
            &self.ldm.denoiser,
            &cond.tokens,
            &empty.tokens,
            s,
            &self.ldm.schedule,
            self.latent_shape(),
            n_steps,
            deterministic,
            rng,
        );
        self.decode_scaled(&z)
    }

    /// The strided reverse-step grid `generate` uses for `n_steps`.
    pub fn step_grid(&self, n_steps: usize) -> Vec<usize> {
        strided_timesteps(self.ldm.schedule.t_max(), n_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lddm::denoiser::{DenoiserConfig, UNetDenoiser};
    use crate::lddm::train::save_ldm;
    use crate::lddm::ScheduleSpec;
    use crate::specvae::train::save_vae;
    use crate::specvae::{register_discs, register_vae, DISC_WINDOWS};
    use crate::textenc::tokenizer::Tokenizer;
    use t2a_nn::rng::substream;

    fn tiny_vae_cfg() -> VaeConfig {
        VaeConfig {
            latent_channels: 2,
            base_channels: 2,
            mult: vec![1, 2, 2, 4],
            residual_blocks: 1,
            kl_weight: 1e-4,
            gan_weight: 0.1,
        }
    }

    fn tiny_denoiser_cfg() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 2,
            out_channels: 2,
            model_channels: 4,
            heads: 2,
            cond_channels: crate::textenc::COND_DIM,
            mult: vec![1, 2],
            latent_h: 10,
            latent_w: 78,
        }
    }

    struct Saved {
        dir: tempfile::TempDir,
        vae: std::path::PathBuf,
        clap: std::path::PathBuf,
        ldm: std::path::PathBuf,
    }

    fn save_stack(vae_seed: u64) -> Saved {
        let dir = tempfile::tempdir().unwrap();
        let vae_cfg = tiny_vae_cfg();
        let mut vp = Params::new();
        register_vae(&mut vp, &vae_cfg, vae_seed);
        let mut dp = Params::new();
        register_discs(&mut dp, &DISC_WINDOWS, vae_seed + 1);
        let vae_path = dir.path().join("vae.ckpt");
        let vae_digest = save_vae(&vae_path, &vae_cfg, &vp, &dp).unwrap();

        let clap = ToyClap::new(Tokenizer::build(["a pure tone", "a chirp rising"]), 7);
        let clap_path = dir.path().join("clap.ckpt");
        clap.save(&clap_path).unwrap();
        let textenc_digest = sha256_hex_file(&clap_path).unwrap();

        let model = LdmModel {
            denoiser: UNetDenoiser::init(&tiny_denoiser_cfg(), 11).unwrap(),
            schedule: ScheduleSpec { t_steps: 40, ..ScheduleSpec::default() }.build().unwrap(),
            latent_scale: 1.0,
            drop_prob: 0.2,
            vae_digest,
            textenc_digest,
        };
        let ldm_path = dir.path().join("ldm.ckpt");
        save_ldm(&ldm_path, &model).unwrap();
        Saved { dir, vae: vae_path, clap: clap_path, ldm: ldm_path }
    }

    #[test]
    fn load_verifies_digests_and_latent_shapes() {
        let saved = save_stack(3);
        let stack = Stack::load(&saved.vae, &saved.clap, &saved.ldm, false).unwrap();
        assert_eq!(stack.latent_shape(), (2, 10, 78));
        assert!(!stack.ldm_digest.is_empty());

        // Swap in a different autoencoder: the digest chain must refuse it.
        let other = save_stack(99);
        let err = Stack::load(&other.vae, &saved.clap, &saved.ldm, false)
            .err()
            .expect("autoencoder swap must be refused");
        assert!(matches!(err, CoreError::DigestMismatch(_)), "got {err}");
        // Same swap is allowed when the caller opts in explicitly.
        assert!(Stack::load(&other.vae, &saved.clap, &saved.ldm, true).is_ok());
        drop(other);

        // A text-encoder swap is likewise refused.
        let clap2 = ToyClap::new(Tokenizer::build(["something else"]), 8);
        let clap2_path = saved.dir.path().join("clap2.ckpt");
        clap2.save(&clap2_path).unwrap();
        let err = Stack::load(&saved.vae, &clap2_path, &saved.ldm, false)
            .err()
            .expect("text encoder swap must be refused");
        assert!(matches!(err, CoreError::DigestMismatch(_)), "got {err}");
    }

    #[test]
    fn generate_is_seeded_and_rejects_context_checkpoints() {
        let saved = save_stack(5);
        let stack = Stack::load(&saved.vae, &saved.clap, &saved.ldm, false).unwrap();

        let mut r1 = substream(21, "stack", 0);
        let a = stack.generate("a pure tone", 2.0, 6, false, &mut r1).unwrap();
        let mut r2 = substream(21, "stack", 0);
        let b = stack.generate("a pure tone", 2.0, 6, false, &mut r2).unwrap();
        assert_eq!(a.values, b.values, "same seed must reproduce the sample");
        assert_eq!(a.values.dim(), (80, 624));

        let mut r3 = substream(22, "stack", 0);
        let c = stack.generate("a pure tone", 2.0, 6, false, &mut r3).unwrap();
        assert_ne!(a.values, c.values, "different seeds must differ");

        // An inpainting-shaped denoiser must be refused by the plain path.
        let mut widened = Stack::load(&saved.vae, &saved.clap, &saved.ldm, false).unwrap();
        let mut cfg = tiny_denoiser_cfg();
        cfg.in_channels = 2 * cfg.out_channels + 1;
        widened.ldm.denoiser = UNetDenoiser::init(&cfg, 11).unwrap();
        let mut r4 = substream(23, "stack", 0);
        let err = widened.generate("a pure tone", 2.0, 6, false, &mut r4).unwrap_err();
        assert!(matches!(err, CoreError::Config(_)), "got {err}");
    }
}
