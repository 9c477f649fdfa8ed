//! Dataset manifest: one JSON record per line pairing an audio file with a
//! caption, its provenance, and class labels.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSource {
    /// Original caption shipped with the audio.
    Human,
    /// Caption produced by the expert distillation stage.
    Distilled,
    /// Caption/audio pair produced by concept reprogramming.
    Reprogrammed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioTextPair {
    /// Path of the WAV file, relative to the manifest's directory.
    pub audio_ref: String,
    pub caption: String,
    pub source: CaptionSource,
    pub labels: Vec<String>,
}

pub fn write_manifest(path: &Path, records: &[AudioTextPair]) -> Result<(), CoreError> {
    let mut out = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<AudioTextPair>, CoreError> {
    let f = fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AudioTextPair = serde_json::from_str(&line).map_err(|e| {
            CoreError::BadManifest(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<AudioTextPair> {
        vec![
            AudioTextPair {
                audio_ref: "tone_000.wav".into(),
                caption: "a tone sound".into(),
                source: CaptionSource::Human,
                labels: vec!["tone".into()],
            },
            AudioTextPair {
                audio_ref: "chirp_001.wav".into(),
                caption: "a rising chirp , bright".into(),
                source: CaptionSource::Reprogrammed,
                labels: vec!["chirp".into(), "tone".into()],
            },
        ]
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let recs = sample();
        write_manifest(&path, &recs).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, recs);
        // One JSON object per line.
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().all(|l| l.starts_with('{') && l.ends_with('}')));
    }

    #[test]
    fn source_serializes_lowercase() {
        let s = serde_json::to_string(&CaptionSource::Distilled).unwrap();
        assert_eq!(s, "\"distilled\"");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"audio_ref\":\"a.wav\",\"caption\":\"x\",\"source\":\"human\",\"labels\":[],\"extra\":1}\n",
        )
        .unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn blank_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gaps.jsonl");
        let recs = sample();
        let mut text = String::new();
        for r in &recs {
            text.push_str(&serde_json::to_string(r).unwrap());
            text.push_str("\n\n");
        }
        std::fs::write(&path, text).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), recs);
    }
}
