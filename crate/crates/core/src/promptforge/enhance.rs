//! Manifest enhancement: fill in missing captions by expert distillation
//! and optionally materialize reprogrammed copies of every row (the same
//! reprogramming the LDM training loop applies online).

use std::path::Path;

use serde::{Deserialize, Serialize};
use t2a_nn::rng::substream;

use super::experts::{distill_caption, AlignmentScorer, CaptionExpert};
use super::{reprogram, sample_concepts, CaptionedClip, ConceptClip, SamplingStrategy, WordBanks};
use crate::error::CoreError;
use crate::specmel::manifest::{AudioTextPair, CaptionSource};
use crate::specmel::wav::{load_audio, write_audio};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    /// Minimum selection score for a distilled caption; rows below it drop.
    pub threshold: f32,
    /// Reprogrammed copies to materialize per row (0 = distillation only).
    pub reprogram_copies: usize,
    /// Distribution over concepts-per-example.
    pub strategy: SamplingStrategy,
    /// Overlay concept audio instead of temporal concatenation.
    pub mix: bool,
    pub seed: u64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            threshold: 0.3,
            reprogram_copies: 0,
            strategy: SamplingStrategy::default(),
            mix: false,
            seed: 0,
        }
    }
}

/// Enhance `records` (audio under `dir`): rows with captions pass through
/// unchanged; caption-less rows are distilled (dropped when no candidate
/// clears the threshold); then `reprogram_copies` rows per input row are
/// synthesized, their composed audio written next to the originals.
pub fn enhance_manifest(
    records: &[AudioTextPair],
    dir: &Path,
    database: &[ConceptClip],
    experts: &[&dyn CaptionExpert],
    scorer: &dyn AlignmentScorer,
    config: &EnhanceConfig,
) -> Result<Vec<AudioTextPair>, CoreError> {
    let banks = WordBanks::default();
    let mut out: Vec<AudioTextPair> = Vec::new();
    for (row, rec) in records.iter().enumerate() {
        let captioned = if rec.caption.is_empty() {
            match distill_caption(&rec.audio_ref, experts, scorer, config.threshold)? {
                Some(c) => {
                    let mut r = rec.clone();
                    r.caption = c.text;
                    r.source = CaptionSource::Distilled;
                    r
                }
                None => continue,
            }
        } else {
            rec.clone()
        };

        if config.reprogram_copies > 0 && !database.is_empty() {
            let base_clip = load_audio(&dir.join(&captioned.audio_ref))?;
            let base = CaptionedClip {
                caption: captioned.caption.clone(),
                clip: base_clip,
                labels: captioned.labels.clone(),
            };
            for copy in 0..config.reprogram_copies {
                let mut rng = substream(config.seed, &format!("enhance/reprogram/{copy}"), row as u64);
                let concepts = sample_concepts(database, &config.strategy, &mut rng);
                if concepts.is_empty() {
                    // Identity reprogram: reference the original audio.
                    out.push(AudioTextPair {
                        audio_ref: captioned.audio_ref.clone(),
                        caption: base.caption.clone(),
                        source: CaptionSource::Reprogrammed,
                        labels: base.labels.clone(),
                    });
                    continue;
                }
                let composed = reprogram(&base, &concepts, &banks, config.mix, &mut rng);
                let stem = captioned.audio_ref.trim_end_matches(".wav");
                let name = format!("{stem}_rp{copy:02}.wav");
                write_audio(&dir.join(&name), &composed.clip.samples, None)?;
                out.push(AudioTextPair {
                    audio_ref: name,
                    caption: composed.caption,
                    source: CaptionSource::Reprogrammed,
                    labels: composed.labels,
                });
            }
        }
        out.push(captioned);
    }
    if out.is_empty() {
        return Err(CoreError::BadManifest(
            "manifest enhancement produced no rows".into(),
        ));
    }
    Ok(out)
}
