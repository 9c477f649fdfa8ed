//! The trainable toy contrastive audio/text model. One weight set serves
//! three roles: per-token conditioning sequences (through a fixed frozen
//! projection to 1024), pooled-vector alignment scoring, and retrieval
//! evaluation. Towers output unit-norm vectors in a 128-d joint space and
//! train with a symmetric InfoNCE objective over in-batch pairs.

use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use t2a_nn::ckpt::Container;
use t2a_nn::layers::{Attention, Conv2d, Embedding, GroupNorm, LayerNorm, Linear};
use t2a_nn::rng::{substream, uniform_usize};
use t2a_nn::{Graph, Id, Params};

use super::tokenizer::Tokenizer;
use super::{TextCondition, TextEncoder, COND_DIM, COND_TOKENS};
use crate::error::CoreError;
use crate::specmel::{MelSpectrogram, FRAMES, N_MELS};

pub const MAGIC: [u8; 4] = *b"TXE1";

/// Joint-space width shared by both towers.
pub const JOINT_DIM: usize = 128;
/// Per-token text state width before the fixed conditioning projection.
pub const TEXT_DIM: usize = 64;
const HEADS: usize = 4;
const AUDIO_CH: [usize; 3] = [8, 16, 32];

/// A training example: mel, caption, and class label (labels only verify
/// that the contrastive task is non-degenerate and score retrieval).
#[derive(Debug, Clone)]
pub struct ClapItem {
    pub mel: MelSpectrogram,
    pub caption: String,
    pub label: String,
}

pub struct ToyClap {
    pub params: Params<f32>,
    pub tokenizer: Tokenizer,
}

struct Layers {
    tok_embed: Embedding,
    attn: Attention,
    text_ln: LayerNorm,
    text_out: Linear,
    aconv: [Conv2d; 3],
    agn: [GroupNorm; 3],
    audio_out: Linear,
}

fn layers(vocab: usize) -> Layers {
    Layers {
        tok_embed: Embedding::new("clap/tok_embed", vocab, TEXT_DIM),
        attn: Attention::new("clap/attn", TEXT_DIM, TEXT_DIM, HEADS),
        text_ln: LayerNorm::new("clap/text_ln", TEXT_DIM),
        text_out: Linear::new("clap/text_out", TEXT_DIM, JOINT_DIM),
        aconv: [
            Conv2d::new("clap/aconv1", 1, AUDIO_CH[0], 3, 2, 1),
            Conv2d::new("clap/aconv2", AUDIO_CH[0], AUDIO_CH[1], 3, 2, 1),
            Conv2d::new("clap/aconv3", AUDIO_CH[1], AUDIO_CH[2], 3, 2, 1),
        ],
        agn: [
            GroupNorm::new("clap/agn1", AUDIO_CH[0], 4),
            GroupNorm::new("clap/agn2", AUDIO_CH[1], 4),
            GroupNorm::new("clap/agn3", AUDIO_CH[2], 4),
        ],
        audio_out: Linear::new("clap/audio_out", AUDIO_CH[2], JOINT_DIM),
    }
}

impl ToyClap {
    /// Fresh model with seeded initialization.
    pub fn new(tokenizer: Tokenizer, seed: u64) -> Self {
        let mut p = Params::<f32>::new();
        let l = layers(tokenizer.vocab_size());
        l.tok_embed.register(&mut p, seed);
        t2a_nn::layers::init_normal(&mut p, seed, "clap/pos_embed", &[COND_TOKENS, TEXT_DIM], 0.05);
        l.attn.register(&mut p, seed);
        l.text_ln.register(&mut p);
        l.text_out.register(&mut p, seed);
        for c in &l.aconv {
            c.register(&mut p, seed);
        }
        for gn in &l.agn {
            gn.register(&mut p);
        }
        l.audio_out.register(&mut p, seed);
        // Learned in log space; exp(2.659) ≈ 1/0.07.
        p.insert(
            "clap/logit_scale",
            ArrayD::from_elem(IxDyn(&[1, 1]), (1.0f32 / 0.07).ln()),
        );
        // Fixed conditioning projection: seeded once, never trained.
        t2a_nn::layers::init_normal(
            &mut p,
            seed,
            "clap/cond_proj",
            &[TEXT_DIM, COND_DIM],
            1.0 / (TEXT_DIM as f64).sqrt(),
        );
        ToyClap { params: p, tokenizer }
    }

    /// Per-token text states `(77, TEXT_DIM)` plus the real-token count.
    fn text_states(&self, g: &mut Graph<f32>, caption: &str) -> (Id, usize) {
        let l = layers(self.tokenizer.vocab_size());
        let (ids, real) = self.tokenizer.encode_fixed(caption, COND_TOKENS);
        let emb = l.tok_embed.apply(g, &self.params, ids);
        let pos = g.param(&self.params, "clap/pos_embed");
        let x = g.add(emb, pos);
        let a = l.attn.apply(g, &self.params, x, x);
        let res = g.add(x, a);
        (l.text_ln.apply(g, &self.params, res), real)
    }

    /// Unit-normalize each row of `(B, D)`.
    fn unit_norm_rows(g: &mut Graph<f32>, x: Id, rows: usize, dim: usize) -> Id {
        let sq = g.sqr(x);
        let t = g.transpose2(sq);
        let col_means = g.mean_rows(t); // (B): per-row mean of sq
        let sums = g.scale(col_means, dim as f64);
        let safe = g.add_scalar(sums, 1e-12);
        let norms = g.sqrt(safe);
        let ones = g.input(Array1::<f32>::ones(rows).into_dyn());
        let inv = g.div(ones, norms);
        g.row_scale(x, inv)
    }

    /// Pooled unit-norm text embedding `(1, JOINT_DIM)`.
    fn text_embedding(&self, g: &mut Graph<f32>, caption: &str) -> Id {
        let l = layers(self.tokenizer.vocab_size());
        let (states, real) = self.text_states(g, caption);
        // Mean over real tokens; an empty caption pools over all pad states.
        let pooled_src = if real > 0 {
            g.slice_axis(states, 0, 0, real)
        } else {
            states
        };
        let mean = g.mean_rows(pooled_src); // (TEXT_DIM)
        let row = g.reshape(mean, &[1, TEXT_DIM]);
        let out = l.text_out.apply(g, &self.params, row);
        Self::unit_norm_rows(g, out, 1, JOINT_DIM)
    }

    /// Pooled unit-norm audio embedding `(1, JOINT_DIM)`.
    fn audio_embedding(&self, g: &mut Graph<f32>, mel: &MelSpectrogram) -> Id {
        let l = layers(self.tokenizer.vocab_size());
        let x0 = g.input(mel.values.clone().into_shape_with_order(IxDyn(&[1, N_MELS, FRAMES])).unwrap());
        let mut x = x0;
        for (conv, gn) in l.aconv.iter().zip(&l.agn) {
            x = conv.apply(g, &self.params, x);
            x = gn.apply(g, &self.params, x);
            x = g.silu(x);
        }
        // (32, 10, 78) → global average per channel.
        let flat = g.reshape(x, &[AUDIO_CH[2], (N_MELS / 8) * (FRAMES / 8)]);
        let t = g.transpose2(flat);
        let pooled = g.mean_rows(t); // (32)
        let row = g.reshape(pooled, &[1, AUDIO_CH[2]]);
        let out = l.audio_out.apply(g, &self.params, row);
        Self::unit_norm_rows(g, out, 1, JOINT_DIM)
    }

    /// Cosine alignment of a mel/caption pair in [-1, 1]. Batch-free by
    /// construction: the score depends only on the two inputs.
    pub fn score_alignment(&self, mel: &MelSpectrogram, caption: &str) -> f32 {
        let mut g = Graph::<f32>::new();
        let a = self.audio_embedding(&mut g, mel);
        let t = self.text_embedding(&mut g, caption);
        let prod = g.mul(a, t);
        let dot = g.sum(prod);
        g.scalar(dot).clamp(-1.0, 1.0)
    }

    /// Pooled embeddings as plain vectors (for retrieval evaluation).
    pub fn embed_audio_vec(&self, mel: &MelSpectrogram) -> Vec<f32> {
        let mut g = Graph::<f32>::new();
        let a = self.audio_embedding(&mut g, mel);
        g.value(a).iter().copied().collect()
    }

    pub fn embed_text_vec(&self, caption: &str) -> Vec<f32> {
        let mut g = Graph::<f32>::new();
        let t = self.text_embedding(&mut g, caption);
        g.value(t).iter().copied().collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let mut c = Container::new(MAGIC, 1);
        c.set_meta("vocab", serde_json::to_string(self.tokenizer.words())?);
        c.set_meta("text_dim", TEXT_DIM.to_string());
        c.set_meta("joint_dim", JOINT_DIM.to_string());
        c.insert_params(&self.params);
        c.write(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let c = Container::read(path)?;
        c.expect_magic(&MAGIC)?;
        let words: Vec<String> = serde_json::from_str(c.require_meta("vocab")?)?;
        let tokenizer = Tokenizer::from_words(words);
        let params = c.extract_params("");
        if !params.contains("clap/cond_proj") {
            return Err(CoreError::Config("toy-clap checkpoint missing parameters".into()));
        }
        Ok(ToyClap { params, tokenizer })
    }
}

impl TextEncoder for ToyClap {
    fn name(&self) -> &'static str {
        "toy-clap"
    }

    /// `(77, 1024)` conditioning sequence: per-token states through the
    /// fixed frozen projection. Deterministic given the checkpoint.
    fn encode_text(&self, caption: &str) -> Result<TextCondition, CoreError> {
        let mut g = Graph::<f32>::new();
        let (states, _) = self.text_states(&mut g, caption);
        let proj = g.frozen(&self.params, "clap/cond_proj");
        let cond = g.matmul(states, proj);
        let values = g
            .value(cond)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("(77,1024)")
            .to_owned();
        let is_empty = self.tokenizer.encode(caption).is_empty();
        TextCondition::new(values, is_empty)
    }
}

/// Per-epoch mean losses from [`train_toy_contrastive`].
pub struct ClapTraining {
    pub model: ToyClap,
    pub epoch_losses: Vec<f64>,
}

/// Train with symmetric InfoNCE over shuffled in-batch pairs.
pub fn train_toy_contrastive(
    items: &[ClapItem],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<ClapTraining, CoreError> {
    let mut labels: Vec<&str> = items.iter().map(|i| i.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(CoreError::Config(format!(
            "contrastive training needs ≥2 classes, got {}",
            labels.len()
        )));
    }
    assert!(batch >= 2, "contrastive batch must hold ≥2 pairs");
    let tokenizer = Tokenizer::build(items.iter().map(|i| i.caption.as_str()));
    let mut model = ToyClap::new(tokenizer, seed);
    let mut opt = t2a_nn::opt::Adam::new();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        // Seeded Fisher–Yates shuffle.
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = substream(seed, "clap/shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, uniform_usize(&mut rng, i + 1));
        }
        let mut losses = Vec::new();
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let loss = contrastive_step(&mut model, &mut opt, items, chunk, lr);
            losses.push(loss);
        }
        epoch_losses.push(losses.iter().sum::<f64>() / losses.len().max(1) as f64);
    }
    Ok(ClapTraining { model, epoch_losses })
}

fn contrastive_step(
    model: &mut ToyClap,
    opt: &mut t2a_nn::opt::Adam<f32>,
    items: &[ClapItem],
    chunk: &[usize],
    lr: f64,
) -> f64 {
    let b = chunk.len();
    let mut g = Graph::<f32>::new();
    let audio_rows: Vec<Id> = chunk.iter().map(|&i| model.audio_embedding(&mut g, &items[i].mel)).collect();
    let text_rows: Vec<Id> = chunk.iter().map(|&i| model.text_embedding(&mut g, &items[i].caption)).collect();
    let a = g.concat(&audio_rows, 0);
    let t = g.concat(&text_rows, 0);
    let logits = g.matmul_flags(t, a, false, true); // (B,B): text rows vs audio cols
    // Scale all logits by the learned temperature (clamped like CLIP).
    let ls = g.param(&model.params, "clap/logit_scale");
    let ls_clamped = g.clamp(ls, -10.0, 100.0f64.ln());
    let es = g.exp(ls_clamped);
    let flat = g.reshape(logits, &[b * b, 1]);
    let scaled_flat = g.matmul(flat, es);
    let scaled = g.reshape(scaled_flat, &[b, b]);
    let targets: Vec<usize> = (0..b).collect();
    let loss_t = g.cross_entropy_rows(scaled, targets.clone());
    let scaled_t = g.transpose2(scaled);
    let loss_a = g.cross_entropy_rows(scaled_t, targets);
    let both = g.add(loss_t, loss_a);
    let loss = g.scale(both, 0.5);
    let grads = g.backward(loss);
    opt.step(&mut model.params, &grads, lr);
    g.scalar(loss) as f64
}

/// Audio→caption retrieval accuracy over the unique captions of `items`.
pub fn retrieval_at_1(model: &ToyClap, items: &[ClapItem]) -> f64 {
    let mut captions: Vec<&str> = items.iter().map(|i| i.caption.as_str()).collect();
    captions.sort_unstable();
    captions.dedup();
    let text_embs: Vec<Vec<f32>> = captions.iter().map(|c| model.embed_text_vec(c)).collect();
    let mut correct = 0usize;
    for item in items {
        let a = model.embed_audio_vec(&item.mel);
        let best = text_embs
            .iter()
            .enumerate()
            .max_by(|(_, x), (_, y)| {
                let sx: f32 = x.iter().zip(&a).map(|(u, v)| u * v).sum();
                let sy: f32 = y.iter().zip(&a).map(|(u, v)| u * v).sum();
                sx.partial_cmp(&sy).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap();
        if captions[best] == item.caption {
            correct += 1;
        }
    }
    correct as f64 / items.len() as f64
}
