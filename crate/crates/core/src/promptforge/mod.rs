//! Prompt enhancement: distill captions for language-free audio, then
//! dynamically reprogram training pairs by splicing single-label concept
//! clips into the audio and rewriting the caption through slot templates.
//!
//! Slot tokens: `X` = current caption, `&` = concept label, `v`/`q`/`a`/`n`
//! = verb/quantifier/adjective/noun drawn from fixed word banks. Each
//! template encodes temporal order words, so audio composition is temporal
//! concatenation matching the caption's order (mixing is available behind a
//! flag for ablation studies).

pub mod enhance;
pub mod experts;

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use t2a_nn::rng::{uniform, uniform_usize};

use crate::error::CoreError;
use crate::specmel::wav::load_audio;
use crate::specmel::{AudioClip, CLIP_SAMPLES, SAMPLE_RATE};

/// One entry of the single-label sound event database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEntry {
    pub label: String,
    pub audio_ref: String,
}

/// A concept with its audio loaded into memory.
#[derive(Debug, Clone)]
pub struct ConceptClip {
    pub label: String,
    pub clip: AudioClip,
}

/// An in-memory caption/audio pair, the unit reprogramming operates on.
#[derive(Debug, Clone)]
pub struct CaptionedClip {
    pub caption: String,
    pub clip: AudioClip,
    pub labels: Vec<String>,
}

pub fn read_concepts(path: &Path) -> Result<Vec<ConceptEntry>, CoreError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ConceptEntry = serde_json::from_str(line)
            .map_err(|err| CoreError::BadManifest(format!("{}:{}: {err}", path.display(), i + 1)))?;
        if e.label.is_empty() {
            return Err(CoreError::BadManifest(format!(
                "{}:{}: empty concept label",
                path.display(),
                i + 1
            )));
        }
        out.push(e);
    }
    Ok(out)
}

pub fn write_concepts(path: &Path, entries: &[ConceptEntry]) -> Result<(), CoreError> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Load every concept's audio relative to `dir`.
pub fn load_concept_clips(entries: &[ConceptEntry], dir: &Path) -> Result<Vec<ConceptClip>, CoreError> {
    entries
        .iter()
        .map(|e| {
            Ok(ConceptClip {
                label: e.label.clone(),
                clip: load_audio(&dir.join(&e.audio_ref))?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Word banks and templates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordBanks {
    pub v: Vec<String>,
    pub a: Vec<String>,
    pub n: Vec<String>,
    pub q: Vec<String>,
}

impl Default for WordBanks {
    fn default() -> Self {
        let list = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        WordBanks {
            v: list(&["hearing", "noticing", "listening to", "appearing"]),
            a: list(&["clear", "noisy", "close-up", "weird", "clean"]),
            n: list(&["audio", "sound", "voice"]),
            q: list(&["a", "the", "some"]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReprogramTemplate {
    pub id: usize,
    pub pattern: &'static str,
}

impl ReprogramTemplate {
    /// Whether the base audio precedes the concept clip in time, per the
    /// template's order words ("X before …" → base first, "after …, X" →
    /// concept first).
    pub fn base_first(&self) -> bool {
        matches!(self.id, 1 | 2 | 3 | 4 | 5 | 9)
    }
}

/// The twelve reprogramming templates, ids 1..=12.
pub const TEMPLATES: [ReprogramTemplate; 12] = [
    ReprogramTemplate { id: 1, pattern: "before v q a n of &, X" },
    ReprogramTemplate { id: 2, pattern: "X before v q a n of &," },
    ReprogramTemplate { id: 3, pattern: "in front of v q a n of &, X" },
    ReprogramTemplate { id: 4, pattern: "first is X second is q a n of &" },
    ReprogramTemplate { id: 5, pattern: "after X, v q a n of &" },
    ReprogramTemplate { id: 6, pattern: "after v q a n of &, X" },
    ReprogramTemplate { id: 7, pattern: "behind v q a n of &, X" },
    ReprogramTemplate { id: 8, pattern: "v q a n of &, then X" },
    ReprogramTemplate { id: 9, pattern: "v q a n of &, following X" },
    ReprogramTemplate { id: 10, pattern: "v q a n of &, later X" },
    ReprogramTemplate { id: 11, pattern: "X after v q a n of &" },
    ReprogramTemplate { id: 12, pattern: "before X, v q a n of &" },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    V,
    Q,
    A,
    N,
}

/// Fill a template's slots. `pick` supplies the bank word for each v/q/a/n
/// slot, called in left-to-right pattern order. A trailing comma left at the
/// end of the caption is tidied away.
fn fill_with(tpl: &ReprogramTemplate, x: &str, label: &str, mut pick: impl FnMut(Slot) -> String) -> String {
    let mut parts: Vec<String> = Vec::new();
    for token in tpl.pattern.split_whitespace() {
        let (core, comma) = match token.strip_suffix(',') {
            Some(c) => (c, true),
            None => (token, false),
        };
        let filled = match core {
            "X" => x.to_string(),
            "&" => label.to_string(),
            "v" => pick(Slot::V),
            "q" => pick(Slot::Q),
            "a" => pick(Slot::A),
            "n" => pick(Slot::N),
            lit => lit.to_string(),
        };
        parts.push(if comma { format!("{filled},") } else { filled });
    }
    let mut caption = parts.join(" ");
    if let Some(stripped) = caption.strip_suffix(',') {
        caption = stripped.trim_end().to_string();
    }
    caption
}

fn pick_from<'b>(bank: &'b [String], rng: &mut ChaCha8Rng) -> &'b str {
    &bank[uniform_usize(rng, bank.len())]
}

// ---------------------------------------------------------------------------
// Concept sampling
// ---------------------------------------------------------------------------

/// Distribution over the number of concepts N ∈ {0, 1, 2} per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub probs: [f64; 3],
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        SamplingStrategy { probs: [1.0 / 3.0; 3] }
    }
}

impl SamplingStrategy {
    pub fn new(probs: [f64; 3]) -> Result<Self, CoreError> {
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!(
                "concept-count probabilities must be in [0,1] and sum to 1, got {probs:?}"
            )));
        }
        Ok(SamplingStrategy { probs })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u = uniform(rng);
        if u < self.probs[0] {
            0
        } else if u < self.probs[0] + self.probs[1] {
            1
        } else {
            2
        }
    }
}

/// Draw N concepts uniformly without replacement; N comes from the strategy
/// and is clamped to the database size.
pub fn sample_concepts<'a>(
    database: &'a [ConceptClip],
    strategy: &SamplingStrategy,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a ConceptClip> {
    assert!(!database.is_empty(), "concept database is empty");
    let n = strategy.sample(rng).min(database.len());
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    while chosen.len() < n {
        let idx = uniform_usize(rng, database.len());
        if !chosen.contains(&idx) {
            chosen.push(idx);
        }
    }
    chosen.into_iter().map(|i| &database[i]).collect()
}

// ---------------------------------------------------------------------------
// Audio composition and reprogramming
// ---------------------------------------------------------------------------

/// Temporally concatenate two clips into exactly 10 s: each keeps a leading
/// portion proportional to its length. With `mix`, the clips are overlaid
/// instead (both fit to 10 s, summed, clamped).
pub fn compose_audio(base: &AudioClip, concept: &AudioClip, base_first: bool, mix: bool) -> AudioClip {
    let fit = |c: &AudioClip, keep: usize| -> Vec<f32> {
        let mut v: Vec<f32> = c.samples.iter().copied().take(keep).collect();
        v.resize(keep, 0.0);
        v
    };
    let samples = if mix {
        let a = fit(base, CLIP_SAMPLES);
        let b = fit(concept, CLIP_SAMPLES);
        a.iter().zip(&b).map(|(&x, &y)| (x + y).clamp(-1.0, 1.0)).collect()
    } else {
        let lb = base.samples.len().max(1);
        let lc = concept.samples.len().max(1);
        let base_keep = ((CLIP_SAMPLES as f64 * lb as f64 / (lb + lc) as f64).round() as usize)
            .clamp(1, CLIP_SAMPLES - 1);
        let concept_keep = CLIP_SAMPLES - base_keep;
        let (first, second) = if base_first {
            (fit(base, base_keep), fit(concept, concept_keep))
        } else {
            (fit(concept, concept_keep), fit(base, base_keep))
        };
        let mut s = first;
        s.extend_from_slice(&second);
        s
    };
    AudioClip { samples, sample_rate: SAMPLE_RATE }
}

/// Apply one template per concept, rewriting caption and audio together.
/// RNG order per concept: template index, then bank draws left to right.
/// With no concepts this is the identity.
pub fn reprogram(
    pair: &CaptionedClip,
    concepts: &[&ConceptClip],
    banks: &WordBanks,
    mix: bool,
    rng: &mut ChaCha8Rng,
) -> CaptionedClip {
    let mut out = pair.clone();
    for concept in concepts {
        let tpl = &TEMPLATES[uniform_usize(rng, TEMPLATES.len())];
        out.caption = fill_with(tpl, &out.caption, &concept.label, |slot| {
            match slot {
                Slot::V => pick_from(&banks.v, rng),
                Slot::Q => pick_from(&banks.q, rng),
                Slot::A => pick_from(&banks.a, rng),
                Slot::N => pick_from(&banks.n, rng),
            }
            .to_string()
        });
        out.clip = compose_audio(&out.clip, &concept.clip, tpl.base_first(), mix);
        out.labels.push(concept.label.clone());
    }
    out
}

// ---------------------------------------------------------------------------
// Grammar membership oracle
// ---------------------------------------------------------------------------

fn bank_alternation(bank: &[String]) -> String {
    bank.iter().map(|w| regex::escape(w)).collect::<Vec<_>>().join("|")
}

fn template_regex(tpl: &ReprogramTemplate, labels_alt: &str, banks: &WordBanks) -> String {
    let mut parts: Vec<String> = Vec::new();
    for token in tpl.pattern.split_whitespace() {
        let (core, comma) = match token.strip_suffix(',') {
            Some(c) => (c, true),
            None => (token, false),
        };
        let piece = match core {
            "X" => "(.+)".to_string(),
            "&" => format!("(?:{labels_alt})"),
            "v" => format!("(?:{})", bank_alternation(&banks.v)),
            "q" => format!("(?:{})", bank_alternation(&banks.q)),
            "a" => format!("(?:{})", bank_alternation(&banks.a)),
            "n" => format!("(?:{})", bank_alternation(&banks.n)),
            lit => regex::escape(lit),
        };
        parts.push(if comma { format!("{piece},") } else { piece });
    }
    let mut body = parts.join(" ");
    if let Some(stripped) = body.strip_suffix(',') {
        body = stripped.to_string();
    }
    format!("^{body}$")
}

/// Whether `caption` is derivable from `base` by nesting the twelve
/// templates (with the given labels/banks) zero or more times.
pub fn caption_in_grammar(caption: &str, base: &str, labels: &[String], banks: &WordBanks) -> bool {
    if caption == base {
        return true;
    }
    if labels.is_empty() {
        return false;
    }
    let labels_alt = labels.iter().map(|l| regex::escape(l)).collect::<Vec<_>>().join("|");
    for tpl in &TEMPLATES {
        let re = regex::Regex::new(&template_regex(tpl, &labels_alt, banks)).expect("template regex");
        // (.+) is greedy; also try lazy to catch nested captions containing
        // separator text that the greedy match would swallow.
        for pattern in [re, regex::Regex::new(&template_regex(tpl, &labels_alt, banks).replace("(.+)", "(.+?)")).unwrap()] {
            if let Some(caps) = pattern.captures(caption) {
                if let Some(inner) = caps.get(1) {
                    if caption_in_grammar(inner.as_str(), base, labels, banks) {
                        return true;
                    }
                }
            }
        }
    }
    false
}
