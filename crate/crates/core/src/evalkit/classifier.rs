//! A small mel-spectrogram classifier over the four synthetic corpus
//! classes. Its penultimate activations double as the embedding space for
//! Fréchet statistics, and its softmax outputs feed the paired KL metric.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::CoreError;
use crate::evalkit::{ClassPosterior, EmbeddingProvider};
use crate::specmel::{MelSpectrogram, FRAMES, N_MELS};
use t2a_nn::ckpt::{sha256_hex, Container};
use t2a_nn::graph::{Graph, Params};
use t2a_nn::layers::Linear;
use t2a_nn::opt::Adam;
use t2a_nn::rng::{substream, uniform_usize};

pub const CLS_MAGIC: [u8; 4] = *b"CLS1";

/// Mean-pooling factor applied to both mel axes before the dense layers.
const POOL: usize = 8;
const POOLED_H: usize = N_MELS / POOL; // 10
const POOLED_W: usize = FRAMES / POOL; // 78
const FEAT_DIM: usize = POOLED_H * POOLED_W; // 780
/// Width of the hidden layer; also the embedding dimension.
pub const EMBED_DIM: usize = 64;
pub const N_CLASSES: usize = 4;

#[derive(Debug, Clone)]
pub struct ToyMelClassifier {
    pub params: Params<f32>,
}

fn l1() -> Linear {
    Linear::new("cls/l1", FEAT_DIM, EMBED_DIM)
}

fn l2() -> Linear {
    Linear::new("cls/l2", EMBED_DIM, N_CLASSES)
}

/// POOL×POOL mean pooling followed by flattening, on the host.
fn pooled_features(mel: &MelSpectrogram) -> Vec<f32> {
    let mut out = Vec::with_capacity(FEAT_DIM);
    let inv = 1.0f32 / (POOL * POOL) as f32;
    for bi in 0..POOLED_H {
        for bj in 0..POOLED_W {
            let mut s = 0.0f32;
            for di in 0..POOL {
                for dj in 0..POOL {
                    s += mel.values[(bi * POOL + di, bj * POOL + dj)];
                }
            }
            out.push(s * inv);
        }
    }
    out
}

fn stack_features(mels: &[&MelSpectrogram]) -> ArrayD<f32> {
    let rows: Vec<Vec<f32>> = t2a_nn::par::par_map(mels, |_, m| pooled_features(m));
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    ArrayD::from_shape_vec(IxDyn(&[mels.len(), FEAT_DIM]), flat).expect("row-major stacking")
}

impl ToyMelClassifier {
    pub fn init(seed: u64) -> Self {
        let mut params = Params::<f32>::new();
        l1().register(&mut params, seed);
        l2().register(&mut params, seed);
        ToyMelClassifier { params }
    }

    /// Hidden activations for a batch of pooled-feature rows.
    fn hidden(&self, g: &mut Graph<f32>, x: t2a_nn::graph::Id) -> t2a_nn::graph::Id {
        let h = l1().apply(g, &self.params, x);
        g.relu(h)
    }

    fn logits_from(&self, g: &mut Graph<f32>, x: t2a_nn::graph::Id) -> t2a_nn::graph::Id {
        let h = self.hidden(g, x);
        l2().apply(g, &self.params, h)
    }

    /// Raw class logits for one spectrogram.
    pub fn logits(&self, mel: &MelSpectrogram) -> Vec<f32> {
        let mut g = Graph::<f32>::new();
        let x = g.input(stack_features(&[mel]));
        let out = self.logits_from(&mut g, x);
        g.value(out).iter().copied().collect()
    }

    /// Penultimate (hidden) activations for one spectrogram.
    pub fn penultimate(&self, mel: &MelSpectrogram) -> Vec<f32> {
        let mut g = Graph::<f32>::new();
        let x = g.input(stack_features(&[mel]));
        let out = self.hidden(&mut g, x);
        g.value(out).iter().copied().collect()
    }

    /// Softmax posterior over the corpus classes, computed in f64.
    pub fn posterior(&self, mel: &MelSpectrogram) -> ClassPosterior {
        let logits = self.logits(mel);
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = logits.iter().map(|&v| ((v as f64) - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f32> = exps.iter().map(|&e| (e / total) as f32).collect();
        ClassPosterior::new(probs).expect("softmax output is a valid simplex")
    }

    pub fn predict(&self, mel: &MelSpectrogram) -> usize {
        let logits = self.logits(mel);
        logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("non-empty logits")
    }

    pub fn save(&self, path: &Path) -> Result<String, CoreError> {
        let mut c = Container::new(CLS_MAGIC, 1);
        c.insert_params(&self.params);
        let bytes = c.to_bytes();
        c.write(path)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<(Self, String), CoreError> {
        let c = Container::read(path)?;
        c.expect_magic(&CLS_MAGIC)?;
        let params = c.extract_params("cls/");
        if params.is_empty() {
            return Err(CoreError::Ckpt(t2a_nn::NnError::BadContainer(
                "no cls/ parameters in checkpoint".into(),
            )));
        }
        Ok((ToyMelClassifier { params }, sha256_hex(&c.to_bytes())))
    }
}

impl EmbeddingProvider for ToyMelClassifier {
    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed(&self, mel: &MelSpectrogram) -> Vec<f32> {
        self.penultimate(mel)
    }
}

/// A labeled training example; `label` indexes the corpus classes.
#[derive(Debug, Clone)]
pub struct LabeledMel {
    pub mel: MelSpectrogram,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct ClassifierOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        ClassifierOptions { steps: 200, batch: 16, lr: 3e-3, seed: 0 }
    }
}

#[derive(Debug)]
pub struct ClassifierTraining {
    pub model: ToyMelClassifier,
    pub losses: Vec<f32>,
}

/// Cross-entropy training over labeled spectrograms.
pub fn train_classifier(
    items: &[LabeledMel],
    opts: &ClassifierOptions,
) -> Result<ClassifierTraining, CoreError> {
    if items.len() < 2 {
        return Err(CoreError::Train("classifier training needs at least 2 examples".into()));
    }
    if opts.batch == 0 || opts.steps == 0 {
        return Err(CoreError::Config("batch and steps must be positive".into()));
    }
    for (i, it) in items.iter().enumerate() {
        if it.label >= N_CLASSES {
            return Err(CoreError::Config(format!(
                "example {i} has label {}, expected < {N_CLASSES}",
                it.label
            )));
        }
    }
    let mut model = ToyMelClassifier::init(opts.seed);
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut rng = substream(opts.seed, "cls/batch", step as u64);
        let picks: Vec<usize> =
            (0..opts.batch).map(|_| uniform_usize(&mut rng, items.len())).collect();
        let mels: Vec<&MelSpectrogram> = picks.iter().map(|&i| &items[i].mel).collect();
        let targets: Vec<usize> = picks.iter().map(|&i| items[i].label).collect();
        let mut g = Graph::<f32>::new();
        let x = g.input(stack_features(&mels));
        let logits = model.logits_from(&mut g, x);
        let loss = g.cross_entropy_rows(logits, targets);
        let lv = g.value(loss)[[]];
        if !lv.is_finite() {
            return Err(CoreError::Train(format!("non-finite loss at step {step}")));
        }
        losses.push(lv);
        let grads = g.backward(loss);
        adam.step(&mut model.params, &grads, opts.lr);
    }
    Ok(ClassifierTraining { model, losses })
}

/// Fraction of examples whose argmax class matches the label.
pub fn accuracy(model: &ToyMelClassifier, items: &[LabeledMel]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let hits =
        t2a_nn::par::par_map(items, |_, it| usize::from(model.predict(&it.mel) == it.label));
    hits.iter().sum::<usize>() as f64 / items.len() as f64
}

/// Labeled corpus slice: `count` clips per class drawn from `seed`, with
/// clip indices starting at `index_base` so train and eval splits can be
/// kept disjoint.
pub fn labeled_corpus(seed: u64, count: usize, index_base: u64) -> Vec<LabeledMel> {
    use crate::specmel::corpus::{clip_for, ToyClass};
    use crate::specmel::melbank::mel;
    let mut items = Vec::with_capacity(4 * count);
    for (label, class) in ToyClass::ALL.into_iter().enumerate() {
        for k in 0..count {
            let clip = clip_for(seed, class, index_base + k as u64);
            items.push(LabeledMel {
                mel: mel(&clip).expect("synthetic clips produce valid spectrograms"),
                label,
            });
        }
    }
    items
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn trained() -> &'static ClassifierTraining {
        static CELL: OnceLock<ClassifierTraining> = OnceLock::new();
        CELL.get_or_init(|| {
            let items = labeled_corpus(7, 6, 0);
            train_classifier(
                &items,
                &ClassifierOptions { steps: 120, batch: 12, lr: 3e-3, seed: 11 },
            )
            .expect("training converges")
        })
    }

    #[test]
    fn training_reduces_loss_and_classifies_held_out_clips() {
        let t = trained();
        let first: f32 = t.losses[..10].iter().sum::<f32>() / 10.0;
        let last: f32 = t.losses[t.losses.len() - 10..].iter().sum::<f32>() / 10.0;
        assert!(
            last < 0.5 * first,
            "loss did not drop: first {first:.4}, last {last:.4}"
        );
        // Held-out clips: same generator, disjoint indices.
        let eval = labeled_corpus(7, 4, 100);
        let acc = accuracy(&t.model, &eval);
        assert!(acc >= 0.9, "held-out accuracy {acc}");
    }

    #[test]
    fn posteriors_are_valid_and_match_the_argmax() {
        let t = trained();
        let eval = labeled_corpus(7, 1, 200);
        for it in &eval {
            let p = t.model.posterior(&it.mel);
            assert_eq!(p.probs.len(), N_CLASSES);
            let total: f64 = p.probs.iter().map(|&v| v as f64).sum();
            assert!((total - 1.0).abs() <= 1e-6);
            let arg = p
                .probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(arg, t.model.predict(&it.mel));
        }
    }

    #[test]
    fn embeddings_come_from_the_hidden_layer() {
        let model = ToyMelClassifier::init(3);
        let eval = labeled_corpus(9, 1, 0);
        let e = model.embed(&eval[0].mel);
        assert_eq!(e.len(), EMBED_DIM);
        assert_eq!(model.dim(), EMBED_DIM);
        assert_eq!(e, model.penultimate(&eval[0].mel));
        // ReLU output: non-negative everywhere.
        assert!(e.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let items = labeled_corpus(5, 2, 0);
        let opts = ClassifierOptions { steps: 8, batch: 4, lr: 1e-3, seed: 21 };
        let a = train_classifier(&items, &opts).unwrap();
        let b = train_classifier(&items, &opts).unwrap();
        assert_eq!(a.losses, b.losses);
        for (name, arr) in a.model.params.iter() {
            assert_eq!(arr, b.model.params.get(name), "param {name} differs");
        }
    }

    #[test]
    fn checkpoints_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.bin");
        let model = ToyMelClassifier::init(13);
        let digest = model.save(&path).unwrap();
        let (loaded, digest2) = ToyMelClassifier::load(&path).unwrap();
        assert_eq!(digest, digest2);
        for (name, arr) in model.params.iter() {
            assert_eq!(arr, loaded.params.get(name), "param {name} differs");
        }
        // Wrong magic is refused.
        let other = dir.path().join("other.bin");
        let c = Container::new(*b"XXX1", 1);
        c.write(&other).unwrap();
        assert!(ToyMelClassifier::load(&other).is_err());
    }

    #[test]
    fn bad_training_inputs_are_refused() {
        let items = labeled_corpus(5, 1, 0);
        assert!(train_classifier(&items[..1], &ClassifierOptions::default()).is_err());
        let mut bad = items.clone();
        bad[0].label = 9;
        assert!(train_classifier(&bad, &ClassifierOptions::default()).is_err());
        let zero = ClassifierOptions { steps: 0, ..ClassifierOptions::default() };
        assert!(train_classifier(&items, &zero).is_err());
    }
}
