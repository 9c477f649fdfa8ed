//! Griffin–Lim phase reconstruction: mel → linear magnitudes via the cached
//! filterbank pseudo-inverse, then alternating projections between the
//! magnitude constraint and the set of consistent STFTs. The spectral
//! convergence error is tracked per iteration and is non-increasing.

use ndarray::Array2;
use rustfft::num_complex::Complex;

use super::melbank::mel_to_linear;
use super::stft::{istft, stft};
use super::{AudioClip, MelSpectrogram, CLIP_SAMPLES, FRAMES, HOP, N_BINS, N_FFT, SAMPLE_RATE};

/// Reconstruct a clip and return the spectral convergence error
/// `||, |STFT(x_k)| - S ||_F / ||S||_F` measured at each iteration.
pub fn griffin_lim_with_errors(mel: &MelSpectrogram, iterations: usize) -> (AudioClip, Vec<f32>) {
    // Invert to linear magnitudes; restore the 625th analysis frame the mel
    // crop dropped by repeating the last column.
    let lin624 = mel_to_linear(&mel.values);
    let frames = FRAMES + 1;
    let mut target = Array2::<f32>::zeros((N_BINS, frames));
    for b in 0..N_BINS {
        for f in 0..frames {
            target[(b, f)] = lin624[(b, f.min(FRAMES - 1))];
        }
    }
    let target_norm = target.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();

    // Zero-phase init.
    let mut spec = Array2::<Complex<f32>>::zeros((N_BINS, frames));
    for b in 0..N_BINS {
        for f in 0..frames {
            spec[(b, f)] = Complex::new(target[(b, f)], 0.0);
        }
    }
    let mut x = istft(&spec, N_FFT, HOP);
    let mut errors = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let est = stft(&x, N_FFT, HOP);
        let mut diff = 0.0f64;
        for b in 0..N_BINS {
            for f in 0..frames {
                let d = est[(b, f)].norm() as f64 - target[(b, f)] as f64;
                diff += d * d;
            }
        }
        errors.push(if target_norm > 0.0 { (diff.sqrt() / target_norm) as f32 } else { 0.0 });
        // Keep the estimated phase, impose the target magnitude.
        for b in 0..N_BINS {
            for f in 0..frames {
                let c = est[(b, f)];
                let n = c.norm();
                spec[(b, f)] = if n > 1e-12 {
                    c * (target[(b, f)] / n)
                } else {
                    Complex::new(target[(b, f)], 0.0)
                };
            }
        }
        x = istft(&spec, N_FFT, HOP);
    }
    x.truncate(CLIP_SAMPLES);
    x.resize(CLIP_SAMPLES, 0.0);
    for v in &mut x {
        *v = v.clamp(-1.0, 1.0);
    }
    (AudioClip { samples: x, sample_rate: SAMPLE_RATE }, errors)
}

/// Reconstruct audio from a mel spectrogram.
pub fn griffin_lim(mel: &MelSpectrogram, iterations: usize) -> AudioClip {
    griffin_lim_with_errors(mel, iterations).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specmel::melbank::mel;

    fn tone(freq: f64, amp: f64) -> AudioClip {
        let samples = (0..CLIP_SAMPLES)
            .map(|n| (amp * (2.0 * std::f64::consts::PI * freq * n as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        AudioClip { samples, sample_rate: SAMPLE_RATE }
    }

    fn goertzel_peak(x: &[f32]) -> f64 {
        // Coarse-to-fine scan for the strongest sinusoid in 100..2000 Hz.
        let mag = |freq: f64| {
            let w = 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE as f64;
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            let c = 2.0 * w.cos();
            for &v in x {
                let s0 = v as f64 + c * s1 - s2;
                s2 = s1;
                s1 = s0;
            }
            (s1 * s1 + s2 * s2 - c * s1 * s2).sqrt()
        };
        let mut best = (100.0, 0.0f64);
        let mut f = 100.0;
        while f <= 2000.0 {
            let m = mag(f);
            if m > best.1 {
                best = (f, m);
            }
            f += 5.0;
        }
        let mut fine = best;
        let mut g = best.0 - 5.0;
        while g <= best.0 + 5.0 {
            let m = mag(g);
            if m > fine.1 {
                fine = (g, m);
            }
            g += 0.5;
        }
        fine.0
    }

    #[test]
    fn error_is_non_increasing_and_tone_is_recovered() {
        let clip = tone(440.0, 0.6);
        let m = mel(&clip).unwrap();
        let (rec, errors) = griffin_lim_with_errors(&m, 32);
        assert_eq!(errors.len(), 32);
        for i in 1..errors.len() {
            assert!(
                errors[i] <= errors[i - 1] + 1e-5,
                "error increased at iter {i}: {} -> {}",
                errors[i - 1],
                errors[i]
            );
        }
        assert!(errors[31] <= errors[0]);
        // The dominant frequency survives the mel round trip within one mel
        // filter width (~36 Hz at 440 Hz).
        let peak = goertzel_peak(&rec.samples[16000..80000]);
        assert!((peak - 440.0).abs() < 36.0, "recovered peak {peak} Hz");
        assert_eq!(rec.samples.len(), CLIP_SAMPLES);
    }

    #[test]
    fn silent_mel_reconstructs_to_silence() {
        let m = MelSpectrogram::new(Array2::zeros((80, FRAMES))).unwrap();
        let (rec, errors) = griffin_lim_with_errors(&m, 4);
        assert!(rec.samples.iter().all(|&v| v == 0.0));
        assert!(errors.iter().all(|&e| e == 0.0));
    }
}
