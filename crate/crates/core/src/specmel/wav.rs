//! Hand-rolled RIFF/WAVE codec. The reader accepts PCM 8/16/24/32-bit and
//! float32, any channel count (averaged to mono) and any sample rate
//! (resampled to 16 kHz); unknown chunks are skipped. The writer emits
//! 16-bit PCM mono 16 kHz, optionally with a LIST/INFO ICMT comment chunk
//! used to stamp generated audio with its config digest.

use super::resample::resample;
use super::{AudioClip, SAMPLE_RATE};
use crate::CoreError;
use std::io::Write;
use std::path::Path;

pub fn load_audio(path: &Path) -> Result<AudioClip, CoreError> {
    let bytes = std::fs::read(path)?;
    decode_wav(&bytes).map_err(|e| CoreError::BadWav(format!("{}: {e}", path.display())))
}

/// Decode bytes into mono 16 kHz samples.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut fmt: Option<Fmt> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes")) as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(format!("chunk {:?} runs past end of file", String::from_utf8_lossy(id)));
        }
        match id {
            b"fmt " => fmt = Some(parse_fmt(&bytes[body_start..body_end])?),
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }
    let fmt = fmt.ok_or("missing fmt chunk")?;
    let data = data.ok_or("missing data chunk")?;
    let interleaved = decode_samples(&fmt, data)?;
    if interleaved.is_empty() {
        return Err("zero-length audio".into());
    }

    // Average channels to mono.
    let ch = fmt.channels as usize;
    let frames = interleaved.len() / ch;
    let mut mono = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0f64;
        for c in 0..ch {
            acc += interleaved[f * ch + c] as f64;
        }
        mono.push((acc / ch as f64) as f32);
    }

    let samples = if fmt.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample(&mono, fmt.sample_rate, SAMPLE_RATE)
    };
    Ok(AudioClip { samples, sample_rate: SAMPLE_RATE })
}

struct Fmt {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn parse_fmt(body: &[u8]) -> Result<Fmt, String> {
    if body.len() < 16 {
        return Err("fmt chunk too short".into());
    }
    let mut format = u16::from_le_bytes(body[0..2].try_into().expect("2 bytes"));
    let channels = u16::from_le_bytes(body[2..4].try_into().expect("2 bytes"));
    let sample_rate = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    let bits = u16::from_le_bytes(body[14..16].try_into().expect("2 bytes"));
    if format == FORMAT_EXTENSIBLE {
        // Sub-format GUID starts at offset 24; its first two bytes are the
        // real format tag.
        if body.len() < 26 {
            return Err("extensible fmt chunk too short".into());
        }
        format = u16::from_le_bytes(body[24..26].try_into().expect("2 bytes"));
    }
    if channels == 0 {
        return Err("zero channels".into());
    }
    if sample_rate == 0 {
        return Err("zero sample rate".into());
    }
    Ok(Fmt { format, channels, sample_rate, bits })
}

fn decode_samples(fmt: &Fmt, data: &[u8]) -> Result<Vec<f32>, String> {
    match (fmt.format, fmt.bits) {
        (FORMAT_PCM, 8) => Ok(data.iter().map(|&b| (b as f32 - 128.0) / 128.0).collect()),
        (FORMAT_PCM, 16) => Ok(data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().expect("2 bytes")) as f32 / 32768.0)
            .collect()),
        (FORMAT_PCM, 24) => Ok(data
            .chunks_exact(3)
            .map(|c| {
                let v = ((c[2] as i32) << 24 | (c[1] as i32) << 16 | (c[0] as i32) << 8) >> 8;
                v as f32 / 8388608.0
            })
            .collect()),
        (FORMAT_PCM, 32) => Ok(data
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")) as f32 / 2147483648.0)
            .collect()),
        (FORMAT_FLOAT, 32) => Ok(data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()),
        (f, b) => Err(format!("unsupported wav encoding: format {f}, {b} bits")),
    }
}

/// Encode mono 16 kHz samples as 16-bit PCM, with an optional ICMT comment.
pub fn encode_wav(samples: &[f32], comment: Option<&str>) -> Vec<u8> {
    let mut data = Vec::with_capacity(samples.len() * 2);
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        data.extend_from_slice(&v.to_le_bytes());
    }

    let mut list = Vec::new();
    if let Some(c) = comment {
        // LIST { INFO { ICMT <text NUL, padded to even> } }
        let mut text = c.as_bytes().to_vec();
        text.push(0);
        if text.len() & 1 == 1 {
            text.push(0);
        }
        list.extend_from_slice(b"LIST");
        list.extend_from_slice(&((4 + 8 + text.len()) as u32).to_le_bytes());
        list.extend_from_slice(b"INFO");
        list.extend_from_slice(b"ICMT");
        list.extend_from_slice(&(text.len() as u32).to_le_bytes());
        list.extend_from_slice(&text);
    }

    let riff_size = 4 + (8 + 16) + list.len() + (8 + data.len());
    let mut out = Vec::with_capacity(8 + riff_size);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(riff_size as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(&list);
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(&data);
    out
}

pub fn write_audio(path: &Path, samples: &[f32], comment: Option<&str>) -> Result<(), CoreError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = encode_wav(samples, comment);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    Ok(())
}

/// Pull the ICMT comment back out of a wav file (digest verification).
pub fn read_comment(bytes: &[u8]) -> Option<String> {
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().ok()?) as usize;
        let body = bytes.get(pos + 8..pos + 8 + size)?;
        if id == b"LIST" && body.len() >= 12 && &body[0..4] == b"INFO" && &body[4..8] == b"ICMT" {
            let n = u32::from_le_bytes(body[8..12].try_into().ok()?) as usize;
            let text = body.get(12..12 + n)?;
            let end = text.iter().position(|&b| b == 0).unwrap_or(text.len());
            return Some(String::from_utf8_lossy(&text[..end]).into_owned());
        }
        pos += 8 + size + (size & 1);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_16bit_mono() {
        let samples: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.01).sin() * 0.5).collect();
        let bytes = encode_wav(&samples, None);
        let clip = decode_wav(&bytes).unwrap();
        assert_eq!(clip.sample_rate, SAMPLE_RATE);
        assert_eq!(clip.samples.len(), samples.len());
        for (a, b) in clip.samples.iter().zip(samples.iter()) {
            assert!((a - b).abs() < 1.0 / 32000.0, "{a} vs {b}");
        }
    }

    #[test]
    fn comment_chunk_roundtrips_and_is_skipped_by_decoder() {
        let samples = vec![0.1f32; 64];
        let bytes = encode_wav(&samples, Some("digest=abc123"));
        assert_eq!(read_comment(&bytes).as_deref(), Some("digest=abc123"));
        let clip = decode_wav(&bytes).unwrap();
        assert_eq!(clip.samples.len(), 64);
    }

    #[test]
    fn stereo_is_averaged() {
        // Hand-build a 2-channel 16 kHz PCM16 wav: L = 0.5, R = -0.5.
        let mut data = Vec::new();
        for _ in 0..100 {
            data.extend_from_slice(&(16384i16).to_le_bytes());
            data.extend_from_slice(&(-16384i16).to_le_bytes());
        }
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((4 + 24 + 8 + data.len()) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&64000u32.to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(&data);
        let clip = decode_wav(&out).unwrap();
        assert_eq!(clip.samples.len(), 100);
        for &v in &clip.samples {
            assert!(v.abs() < 1e-4, "L/R should cancel, got {v}");
        }
    }

    #[test]
    fn float32_and_24bit_supported() {
        let mk = |fmt: u16, bits: u16, data: Vec<u8>| {
            let mut out = Vec::new();
            out.extend_from_slice(b"RIFF");
            out.extend_from_slice(&((4 + 24 + 8 + data.len()) as u32).to_le_bytes());
            out.extend_from_slice(b"WAVE");
            out.extend_from_slice(b"fmt ");
            out.extend_from_slice(&16u32.to_le_bytes());
            out.extend_from_slice(&fmt.to_le_bytes());
            out.extend_from_slice(&1u16.to_le_bytes());
            out.extend_from_slice(&16000u32.to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(&bits.to_le_bytes());
            out.extend_from_slice(b"data");
            out.extend_from_slice(&(data.len() as u32).to_le_bytes());
            out.extend_from_slice(&data);
            out
        };
        let f = mk(3, 32, 0.75f32.to_le_bytes().to_vec());
        let clip = decode_wav(&f).unwrap();
        assert!((clip.samples[0] - 0.75).abs() < 1e-6);

        // 24-bit: value 0x400000 = 2^22 -> 0.5
        let p = mk(1, 24, vec![0x00, 0x00, 0x40]);
        let clip = decode_wav(&p).unwrap();
        assert!((clip.samples[0] - 0.5).abs() < 1e-6);

        // 24-bit negative: 0xC00000 as signed 24-bit = -2^22 -> -0.5
        let n = mk(1, 24, vec![0x00, 0x00, 0xC0]);
        let clip = decode_wav(&n).unwrap();
        assert!((clip.samples[0] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let samples = vec![0.2f32; 32];
        let inner = encode_wav(&samples, None);
        // Splice a junk chunk between fmt and data.
        let mut out = Vec::new();
        out.extend_from_slice(&inner[..36]);
        out.extend_from_slice(b"junk");
        out.extend_from_slice(&3u32.to_le_bytes());
        out.extend_from_slice(b"abc\0"); // padded to even
        out.extend_from_slice(&inner[36..]);
        let total = out.len() as u32 - 8;
        out[4..8].copy_from_slice(&total.to_le_bytes());
        let clip = decode_wav(&out).unwrap();
        assert_eq!(clip.samples.len(), 32);
    }

    #[test]
    fn garbage_rejected() {
        assert!(decode_wav(b"not a wav at all").is_err());
        let empty = encode_wav(&[], None);
        assert!(decode_wav(&empty).is_err(), "zero-length audio must error");
    }
}
