//! STFT / inverse STFT with a periodic Hann window. Framing starts at
//! sample 0 with no centering: frame k covers `[k*hop, k*hop + n_fft)`,
//! zero-padded past the signal end, giving exactly `len/hop` frames. The
//! inverse uses windowed overlap-add normalized by the accumulated squared
//! window.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

/// Sum of the analysis window, used as the 0 dB reference for full-scale
/// sinusoids (|STFT| peak of a unit sine is ~sum/2).
pub fn hann_sum(n: usize) -> f32 {
    hann_window(n).iter().sum()
}

/// Complex STFT: returns `(n_fft/2 + 1, len/hop)` bins-by-frames.
pub fn stft(x: &[f32], n_fft: usize, hop: usize) -> Array2<Complex<f32>> {
    let frames = x.len() / hop;
    let bins = n_fft / 2 + 1;
    let window = hann_window(n_fft);
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Array2::<Complex<f32>>::zeros((bins, frames));
    let mut buf = vec![Complex::new(0.0f32, 0.0); n_fft];
    for f in 0..frames {
        let start = f * hop;
        for i in 0..n_fft {
            let v = if start + i < x.len() { x[start + i] } else { 0.0 };
            buf[i] = Complex::new(v * window[i], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            out[(b, f)] = buf[b];
        }
    }
    out
}

/// Windowed overlap-add inverse of [`stft`]; output length `frames * hop`.
pub fn istft(spec: &Array2<Complex<f32>>, n_fft: usize, hop: usize) -> Vec<f32> {
    let (bins, frames) = spec.dim();
    assert_eq!(bins, n_fft / 2 + 1, "istft bins mismatch");
    let window = hann_window(n_fft);
    let out_len = frames * hop;
    let mut acc = vec![0.0f64; out_len + n_fft];
    let mut wsq = vec![0.0f64; out_len + n_fft];
    let mut planner = FftPlanner::<f32>::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let mut buf = vec![Complex::new(0.0f32, 0.0); n_fft];
    for f in 0..frames {
        // DC and Nyquist must be real for a real signal; interior bins mirror
        // conjugated into the upper half.
        buf[0] = Complex::new(spec[(0, f)].re, 0.0);
        for b in 1..n_fft / 2 {
            buf[b] = spec[(b, f)];
            buf[n_fft - b] = spec[(b, f)].conj();
        }
        buf[n_fft / 2] = Complex::new(spec[(n_fft / 2, f)].re, 0.0);
        ifft.process(&mut buf);
        let start = f * hop;
        for i in 0..n_fft {
            let v = buf[i].re as f64 / n_fft as f64;
            acc[start + i] += v * window[i] as f64;
            wsq[start + i] += (window[i] as f64) * (window[i] as f64);
        }
    }
    (0..out_len)
        .map(|i| {
            if wsq[i] > 1e-9 {
                (acc[i] / wsq[i]) as f32
            } else {
                0.0
            }
        })
        .collect()
}
