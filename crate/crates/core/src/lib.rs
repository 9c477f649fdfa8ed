//! Text-to-audio pipeline on mel spectrograms: synthetic corpus and audio
//! I/O, prompt enhancement, a toy contrastive text/audio encoder, a
//! spectrogram VAE, latent diffusion with classifier-free guidance,
//! editing/inpainting/visual conditioning, and objective metrics.

pub mod error;
pub mod evalkit;
pub mod lddm;
pub mod promptforge;
pub mod specmel;
pub mod specvae;
pub mod textenc;
pub mod xaudio;

pub use error::CoreError;
