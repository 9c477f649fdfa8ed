//! Mel filterbank and the forward audio → mel transform.
//!
//! 80 triangular filters over 0–8000 Hz with corner points uniformly spaced
//! on the mel scale (`mel = 2595 * log10(1 + f/700)`), sampled at the 513
//! linear FFT bin centers and peak-normalized so every row has max 1. The
//! forward transform is: window-referenced linear amplitude, amplitude dB
//! (`20*log10(a + 1e-10)`) clamped to [-80, 0], then mapped affinely to
//! [0, 1].

use std::sync::OnceLock;

use ndarray::Array2;

use super::stft::{hann_sum, stft};
use super::{AudioClip, MelSpectrogram, CLIP_SAMPLES, FMAX, FMIN, FRAMES, HOP, N_BINS, N_FFT, N_MELS, SAMPLE_RATE};
use crate::error::CoreError;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0f64.powf(m / 2595.0) - 1.0)
}

fn build_filterbank() -> Array2<f32> {
    let mel_lo = hz_to_mel(FMIN as f64);
    let mel_hi = hz_to_mel(FMAX as f64);
    // 80 filters need 82 corner points.
    let pts: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    let mut fb = Array2::<f32>::zeros((N_MELS, N_BINS));
    for m in 0..N_MELS {
        let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        let mut peak = 0.0f64;
        for b in 0..N_BINS {
            let f = b as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            fb[(m, b)] = w as f32;
            peak = peak.max(w);
        }
        assert!(peak > 0.0, "mel filter {m} has no support on the FFT grid");
        for b in 0..N_BINS {
            fb[(m, b)] /= peak as f32;
        }
    }
    fb
}

/// Cached `(80, 513)` peak-normalized triangular filterbank.
pub fn filterbank() -> &'static Array2<f32> {
    static FB: OnceLock<Array2<f32>> = OnceLock::new();
    FB.get_or_init(build_filterbank)
}

/// Forward transform: 10 s / 16 kHz clip → `(80, 624)` mel in [0, 1].
pub fn mel(clip: &AudioClip) -> Result<MelSpectrogram, CoreError> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(CoreError::Shape(format!(
            "mel() needs {SAMPLE_RATE} Hz input, got {}",
            clip.sample_rate
        )));
    }
    if clip.samples.len() != CLIP_SAMPLES {
        return Err(CoreError::Shape(format!(
            "mel() needs exactly {CLIP_SAMPLES} samples, got {}",
            clip.samples.len()
        )));
    }
    let spec = stft(&clip.samples, N_FFT, HOP);
    let frames_raw = spec.dim().1;
    let mut mag = Array2::<f32>::zeros((N_BINS, frames_raw));
    for b in 0..N_BINS {
        for f in 0..frames_raw {
            mag[(b, f)] = spec[(b, f)].norm();
        }
    }
    let fb = filterbank();
    let amp_ref = hann_sum(N_FFT) / 2.0;
    let energies = fb.dot(&mag);
    let mut out = Array2::<f32>::zeros((N_MELS, FRAMES));
    for m in 0..N_MELS {
        for f in 0..FRAMES {
            let a = energies[(m, f)] / amp_ref;
            let db = (20.0 * ((a as f64) + 1e-10).log10()).clamp(-80.0, 0.0);
            out[(m, f)] = ((db + 80.0) / 80.0) as f32;
        }
    }
    MelSpectrogram::new(out)
}

/// Invert the dB/affine mapping back to window-referenced STFT magnitudes,
/// shape `(513, frames)`. Cells at the exact floor (0.0) map to true zero
/// amplitude rather than -80 dB so silent mels invert to silent audio.
pub fn mel_to_linear(values: &Array2<f32>) -> Array2<f32> {
    static PINV: OnceLock<Array2<f32>> = OnceLock::new();
    let pinv = PINV.get_or_init(|| {
        let fb = filterbank();
        let m = nalgebra::DMatrix::<f64>::from_fn(N_MELS, N_BINS, |r, c| fb[(r, c)] as f64);
        let p = m
            .pseudo_inverse(1e-10)
            .expect("mel filterbank pseudo-inverse");
        Array2::from_shape_fn((N_BINS, N_MELS), |(r, c)| p[(r, c)] as f32)
    });
    let (rows, frames) = values.dim();
    assert_eq!(rows, N_MELS, "mel_to_linear expects {N_MELS} rows");
    let mut amps = Array2::<f32>::zeros((N_MELS, frames));
    for m in 0..N_MELS {
        for f in 0..frames {
            let x = values[(m, f)];
            amps[(m, f)] = if x <= 0.0 {
                0.0
            } else {
                10.0f32.powf((x * 80.0 - 80.0) / 20.0)
            };
        }
    }
    let amp_ref = hann_sum(N_FFT) / 2.0;
    let mut lin = pinv.dot(&amps);
    lin.mapv_inplace(|v| (v * amp_ref).max(0.0));
    lin
}
