//! Audio I/O, mel-spectrogram extraction and inversion, text normalization,
//! and the deterministic synthetic corpus generator.

pub mod corpus;
pub mod griffinlim;
pub mod manifest;
pub mod melbank;
pub mod resample;
pub mod stft;
pub mod textnorm;
pub mod wav;

use crate::CoreError;
use ndarray::Array2;

pub const SAMPLE_RATE: u32 = 16000;
pub const CLIP_SAMPLES: usize = 160000;
pub const N_FFT: usize = 1024;
pub const HOP: usize = 256;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 80;
pub const FRAMES: usize = 624;
pub const FMIN: f64 = 0.0;
pub const FMAX: f64 = 8000.0;

/// Mono 16 kHz audio. Durations other than 10 s exist transiently between
/// [`wav::load_audio`] and [`fit_duration`].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// 80x624 log-mel grid with every value in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f32>) -> Result<Self, CoreError> {
        if values.dim() != (N_MELS, FRAMES) {
            return Err(CoreError::Shape(format!(
                "mel grid must be {}x{}, got {:?}",
                N_MELS,
                FRAMES,
                values.dim()
            )));
        }
        for &v in values.iter() {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(CoreError::Shape(format!("mel value {v} outside [0,1]")));
            }
        }
        Ok(MelSpectrogram { values })
    }

}

/// Pad with trailing zeros or crop a seeded contiguous window to exactly
/// 10 s. Cropping offset is drawn from the provided substream so repeated
/// runs agree.
pub fn fit_duration(clip: &AudioClip, rng: &mut rand_chacha::ChaCha8Rng) -> AudioClip {
    assert_eq!(clip.sample_rate, SAMPLE_RATE, "fit_duration expects 16 kHz input");
    let n = clip.samples.len();
    let mut samples = clip.samples.clone();
    match n.cmp(&CLIP_SAMPLES) {
        std::cmp::Ordering::Less => samples.resize(CLIP_SAMPLES, 0.0),
        std::cmp::Ordering::Greater => {
            let max_off = n - CLIP_SAMPLES;
            let off = t2a_nn::rng::uniform_usize(rng, max_off + 1);
            samples = samples[off..off + CLIP_SAMPLES].to_vec();
        }
        std::cmp::Ordering::Equal => {}
    }
    AudioClip { samples, sample_rate: SAMPLE_RATE }
}

/// Write a mel grid to the simple binary container (magic "MEL1", u32 rows,
/// u32 cols, row-major f32 LE).
pub fn save_mel(mel: &MelSpectrogram, path: &std::path::Path) -> Result<(), CoreError> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (rows, cols) = mel.values.dim();
    let mut out = Vec::with_capacity(12 + rows * cols * 4);
    out.extend_from_slice(b"MEL1");
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in mel.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&out)?;
    Ok(())
}

pub fn load_mel(path: &std::path::Path) -> Result<MelSpectrogram, CoreError> {
    let bytes = std::fs::read(path)?;
    let grid = parse_mel_bytes(&bytes)
        .map_err(|e| CoreError::BadMel(format!("{}: {e}", path.display())))?;
    MelSpectrogram::new(grid)
}

/// Parse the MEL1 container into a raw grid (shape not yet validated).
pub fn parse_mel_bytes(bytes: &[u8]) -> Result<Array2<f32>, String> {
    if bytes.len() < 12 {
        return Err("shorter than header".into());
    }
    if &bytes[0..4] != b"MEL1" {
        return Err("bad magic".into());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let need = 12 + rows * cols * 4;
    if bytes.len() != need {
        return Err(format!("expected {need} bytes for {rows}x{cols}, got {}", bytes.len()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[12..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())
}
