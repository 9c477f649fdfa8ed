//! Caption distillation: pluggable experts propose candidate captions for
//! uncaptioned audio, an alignment scorer ranks every candidate, and the
//! best-scoring candidate is kept if it clears a threshold.

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertKind {
    Captioning,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionCandidate {
    pub text: String,
    pub expert: ExpertKind,
    pub score: f32,
}

/// Proposes candidate captions for an audio file.
pub trait CaptionExpert {
    fn kind(&self) -> ExpertKind;
    fn propose(&self, audio_ref: &str) -> Result<Vec<String>, CoreError>;
}

/// Scores audio/text alignment in [-1, 1] (higher = better aligned).
pub trait AlignmentScorer {
    fn score(&self, audio_ref: &str, text: &str) -> Result<f32, CoreError>;
}

/// Embeds audio and text into a shared space; used by the retrieval expert.
pub trait Embedder {
    fn embed_audio(&self, audio_ref: &str) -> Result<Vec<f32>, CoreError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, CoreError>;
}

/// Score every expert's candidates and return the argmax if it reaches
/// `threshold`. Ties break by expert registration order, then
/// lexicographically. Experts that fail are skipped; if all fail, error.
pub fn distill_caption(
    audio_ref: &str,
    experts: &[&dyn CaptionExpert],
    scorer: &dyn AlignmentScorer,
    threshold: f32,
) -> Result<Option<CaptionCandidate>, CoreError> {
    assert!(!experts.is_empty(), "at least one expert must be registered");
    let mut candidates: Vec<(usize, CaptionCandidate)> = Vec::new();
    let mut failures = 0usize;
    for (idx, expert) in experts.iter().enumerate() {
        match expert.propose(audio_ref) {
            Ok(texts) => {
                for text in texts {
                    let score = scorer.score(audio_ref, &text)?;
                    candidates.push((idx, CaptionCandidate { text, expert: expert.kind(), score }));
                }
            }
            Err(_) => failures += 1,
        }
    }
    if failures == experts.len() {
        return Err(CoreError::BadManifest(format!(
            "every caption expert failed on {audio_ref}"
        )));
    }
    candidates.sort_by(|(ia, a), (ib, b)| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(ia.cmp(ib))
            .then(a.text.cmp(&b.text))
    });
    Ok(candidates
        .into_iter()
        .map(|(_, c)| c)
        .next()
        .filter(|c| c.score >= threshold))
}

// ---------------------------------------------------------------------------
// Toy experts
// ---------------------------------------------------------------------------

/// Captioning expert for the synthetic corpus: reads the class from the
/// file name stem (`tone_003.wav` → "tone") and emits templated captions.
pub struct LabelTemplateExpert;

impl CaptionExpert for LabelTemplateExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Captioning
    }

    fn propose(&self, audio_ref: &str) -> Result<Vec<String>, CoreError> {
        let stem = std::path::Path::new(audio_ref)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CoreError::BadManifest(format!("bad audio ref {audio_ref}")))?;
        let label = stem.split('_').next().unwrap_or(stem);
        if label.is_empty() {
            return Err(CoreError::BadManifest(format!("no label in {audio_ref}")));
        }
        Ok(vec![
            format!("a {label} sound"),
            format!("the sound of a {label}"),
            format!("a clear {label} sound"),
        ])
    }
}

/// Retrieval expert: nearest caption from a fixed pool by cosine similarity
/// in the embedder's shared audio/text space.
pub struct RetrievalExpert<'e, E: Embedder> {
    pub pool: Vec<String>,
    pub embedder: &'e E,
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

impl<E: Embedder> CaptionExpert for RetrievalExpert<'_, E> {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Retrieval
    }

    fn propose(&self, audio_ref: &str) -> Result<Vec<String>, CoreError> {
        if self.pool.is_empty() {
            return Err(CoreError::BadManifest("retrieval pool is empty".into()));
        }
        let audio = self.embedder.embed_audio(audio_ref)?;
        let mut best: Option<(f32, &String)> = None;
        for text in &self.pool {
            let sim = cosine(&audio, &self.embedder.embed_text(text)?);
            if best.map_or(true, |(s, t)| sim > s || (sim == s && text < t)) {
                best = Some((sim, text));
            }
        }
        Ok(vec![best.unwrap().1.clone()])
    }
}
