//! Objective evaluation: embedding-space Fréchet distance, paired
//! classifier-KL, alignment scoring, and the trade-off curve harnesses.

pub mod classifier;
pub mod curves;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::CoreError;
use crate::specmel::MelSpectrogram;
use crate::textenc::toyclap::ToyClap;
use t2a_nn::par;

/// Eigenvalues this far below zero are treated as numerical noise and
/// clamped; anything worse fails the square root.
const EIG_TOL: f64 = 1e-8;
/// Probability floor for KL computations.
const PROB_FLOOR: f64 = 1e-10;

/// N × d matrix of audio embeddings from a pluggable provider.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Array2<f32>,
}

impl EmbeddingSet {
    pub fn new(vectors: Array2<f32>) -> Result<Self, CoreError> {
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Config("embedding set contains non-finite values".into()));
        }
        Ok(EmbeddingSet { vectors })
    }

    /// Embed a batch of spectrograms with `provider`, in parallel.
    pub fn from_mels<P: EmbeddingProvider>(
        provider: &P,
        mels: &[MelSpectrogram],
    ) -> Result<Self, CoreError> {
        if mels.is_empty() {
            return Err(CoreError::Config("cannot embed an empty set".into()));
        }
        let rows = par::par_map(mels, |_, mel| provider.embed(mel));
        let d = provider.dim();
        let mut vectors = Array2::<f32>::zeros((rows.len(), d));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(CoreError::Shape(format!(
                    "provider returned {} dims for clip {i}, expected {d}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                vectors[(i, j)] = v;
            }
        }
        EmbeddingSet::new(vectors)
    }

    pub fn len(&self) -> usize {
        self.vectors.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim().1
    }
}

/// Anything that maps a spectrogram to a fixed-size embedding.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, mel: &MelSpectrogram) -> Vec<f32>;
}

/// A simplex vector over corpus classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub probs: Vec<f32>,
}

impl ClassPosterior {
    pub fn new(probs: Vec<f32>) -> Result<Self, CoreError> {
        if probs.is_empty() {
            return Err(CoreError::Config("posterior needs at least one class".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CoreError::Config("posterior must be non-negative and finite".into()));
        }
        let total: f64 = probs.iter().map(|&p| p as f64).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(CoreError::Config(format!("posterior sums to {total}, expected 1")));
        }
        Ok(ClassPosterior { probs })
    }
}

fn mean_and_cov(x: &Array2<f32>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mut mu = DVector::<f64>::zeros(d);
    for row in x.rows() {
        for (j, &v) in row.iter().enumerate() {
            mu[j] += v as f64;
        }
    }
    mu /= n as f64;
    // Unbiased covariance of the centered rows.
    let mut centered = DMatrix::<f64>::zeros(n, d);
    for (i, row) in x.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            centered[(i, j)] = v as f64 - mu[j];
        }
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

/// Symmetric PSD square root by eigen-decomposition. Eigenvalues in
/// [−EIG_TOL, 0) are clamped to zero; anything below fails.
fn sqrtm_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>, CoreError> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -EIG_TOL {
            return Err(CoreError::Numeric(format!(
                "{what} has eigenvalue {v}, beyond the −{EIG_TOL} tolerance"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Fréchet distance between two embedding distributions:
/// ‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2}).
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, CoreError> {
    if a.dim() != b.dim() {
        return Err(CoreError::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(CoreError::Config(
            "Fréchet statistics need at least 2 vectors per set".into(),
        ));
    }
    let (mu_a, cov_a) = mean_and_cov(&a.vectors);
    let (mu_b, cov_b) = mean_and_cov(&b.vectors);
    // Tr((Σ_A Σ_B)^{1/2}) via the symmetric equivalent √Σ_A Σ_B √Σ_A.
    let sa = sqrtm_psd(&cov_a, "covariance of set A")?;
    let inner = &sa * &cov_b * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut tr_sqrt = 0.0f64;
    for &v in eig.eigenvalues.iter() {
        if v < -EIG_TOL {
            return Err(CoreError::Numeric(format!(
                "cross-covariance product has eigenvalue {v}, beyond the −{EIG_TOL} tolerance"
            )));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let dmu = &mu_a - &mu_b;
    Ok(dmu.norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

/// Mean over pairs of KL(ref_i ‖ gen_i) with probability flooring.
pub fn kl_metric(gen: &[ClassPosterior], reference: &[ClassPosterior]) -> Result<f64, CoreError> {
    if gen.len() != reference.len() {
        return Err(CoreError::Shape(format!(
            "paired lists must match: {} generated vs {} reference",
            gen.len(),
            reference.len()
        )));
    }
    if gen.is_empty() {
        return Err(CoreError::Config("KL metric needs at least one pair".into()));
    }
    let mut total = 0.0f64;
    for (i, (g, r)) in gen.iter().zip(reference).enumerate() {
        if g.probs.len() != r.probs.len() {
            return Err(CoreError::Shape(format!(
                "pair {i}: {} vs {} classes",
                g.probs.len(),
                r.probs.len()
            )));
        }
        let mut kl = 0.0f64;
        for (&gp, &rp) in g.probs.iter().zip(&r.probs) {
            let rp = (rp as f64).max(PROB_FLOOR);
            let gp = (gp as f64).max(PROB_FLOOR);
            kl += rp * (rp / gp).ln();
        }
        total += kl;
    }
    Ok(total / gen.len() as f64)
}

/// Mean alignment score over (spectrogram, caption) pairs.
pub fn clap_eval(
    model: &ToyClap,
    mels: &[MelSpectrogram],
    captions: &[String],
) -> Result<f64, CoreError> {
    if mels.len() != captions.len() {
        return Err(CoreError::Shape(format!(
            "paired lists must match: {} clips vs {} captions",
            mels.len(),
            captions.len()
        )));
    }
    if mels.is_empty() {
        return Err(CoreError::Config("alignment scoring needs at least one pair".into()));
    }
    let scores = par::par_map_range(mels.len(), |i| {
        model.score_alignment(&mels[i], &captions[i]) as f64
    });
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub config_digest: String,
}

/// CSV report with the standard header.
pub fn metric_report_csv(entries: &[MetricEntry]) -> String {
    let mut out = String::from("metric,value,n,config_digest\n");
    for e in entries {
        out.push_str(&format!("{},{},{},{}\n", e.metric, e.value, e.n, e.config_digest));
    }
    out
}
