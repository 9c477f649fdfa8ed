//! Trade-off curves: alignment vs realism as the guidance scale grows, and
//! faithfulness vs realism as the edit strength grows.

use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::evalkit::{clap_eval, frechet_distance, EmbeddingProvider, EmbeddingSet};
use crate::lddm::stack::Stack;
use crate::specmel::MelSpectrogram;
use crate::xaudio::{mel_mse, sdedit, EditRequest};
use t2a_nn::rng::substream;

/// One guidance-sweep row.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidancePoint {
    pub s: f64,
    pub alignment: f64,
    pub frechet: f64,
}

/// One edit-strength sweep row. `faithfulness` is prompt alignment;
/// `realism` is 1 − MSE against the edited input.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeditPoint {
    pub t0: f64,
    pub faithfulness: f64,
    pub realism: f64,
}

/// Generate one clip per prompt; clip `k` draws all of its randomness from
/// `substream(seed, label, k)`, so any row of a sweep can be reproduced in
/// isolation.
pub fn generate_batch(
    stack: &Stack,
    prompts: &[String],
    s: f64,
    n_steps: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<MelSpectrogram>, CoreError> {
    let mut out = Vec::with_capacity(prompts.len());
    for (k, prompt) in prompts.iter().enumerate() {
        let mut rng: ChaCha8Rng = substream(seed, label, k as u64);
        out.push(stack.generate(prompt, s, n_steps, false, &mut rng)?);
    }
    Ok(out)
}

/// Sweep the guidance scale: for each `s`, generate one clip per prompt and
/// score mean prompt alignment plus the Fréchet distance to `reference`.
#[allow(clippy::too_many_arguments)]
pub fn guidance_curve<P: EmbeddingProvider>(
    stack: &Stack,
    provider: &P,
    reference: &EmbeddingSet,
    prompts: &[String],
    scales: &[f64],
    n_steps: usize,
    seed: u64,
) -> Result<Vec<GuidancePoint>, CoreError> {
    if prompts.is_empty() || scales.is_empty() {
        return Err(CoreError::Config("guidance sweep needs prompts and scales".into()));
    }
    let mut points = Vec::with_capacity(scales.len());
    for &s in scales {
        let label = format!("sweep/s/{s}");
        let mels = generate_batch(stack, prompts, s, n_steps, seed, &label)?;
        let alignment = clap_eval(&stack.encoder, &mels, &prompts.to_vec())?;
        let gen_set = EmbeddingSet::from_mels(provider, &mels)?;
        let frechet = frechet_distance(&gen_set, reference)?;
        points.push(GuidancePoint { s, alignment, frechet });
    }
    Ok(points)
}

/// Sweep the edit strength: for each `t0`, run `n_seeds` edits of `init`
/// under `prompt` and average prompt alignment (faithfulness) and
/// 1 − MSE against the input (realism).
#[allow(clippy::too_many_arguments)]
pub fn sdedit_curve(
    stack: &Stack,
    init: &MelSpectrogram,
    prompt: &str,
    t0s: &[f64],
    n_seeds: usize,
    total_steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Vec<SdeditPoint>, CoreError> {
    if t0s.is_empty() || n_seeds == 0 {
        return Err(CoreError::Config("edit sweep needs strengths and seeds".into()));
    }
    let mut points = Vec::with_capacity(t0s.len());
    for &t0 in t0s {
        let label = format!("sweep/t0/{t0}");
        let mut mels = Vec::with_capacity(n_seeds);
        for k in 0..n_seeds {
            let mut rng: ChaCha8Rng = substream(seed, &label, k as u64);
            let req = EditRequest {
                init_audio: init.clone(),
                prompt: prompt.to_string(),
                t0,
                total_steps,
                guidance,
            };
            mels.push(sdedit(stack, &req, &mut rng)?);
        }
        let captions = vec![prompt.to_string(); n_seeds];
        let faithfulness = clap_eval(&stack.encoder, &mels, &captions)?;
        let realism = mels.iter().map(|m| 1.0 - mel_mse(m, init)).sum::<f64>() / n_seeds as f64;
        points.push(SdeditPoint { t0, faithfulness, realism });
    }
    Ok(points)
}

pub fn guidance_csv(points: &[GuidancePoint]) -> String {
    let mut out = String::from("s,alignment,frechet\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.s, p.alignment, p.frechet));
    }
    out
}

pub fn sdedit_csv(points: &[SdeditPoint]) -> String {
    let mut out = String::from("t0,faithfulness,realism\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.t0, p.faithfulness, p.realism));
    }
    out
}

/// Count strict increases in a sequence expected to be non-increasing.
pub fn count_inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}
