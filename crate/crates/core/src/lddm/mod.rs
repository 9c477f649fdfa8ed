//! Latent diffusion: the fixed noise schedule, closed-form forward process,
//! ε-prediction objective, classifier-free guidance, and the ancestral
//! reverse sampler (with strided fast sampling and a zero-noise mode).

pub mod denoiser;
pub mod stack;
pub mod train;

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use t2a_nn::rng::{normal_array, uniform, uniform_usize};

use crate::error::CoreError;
use crate::textenc::TextCondition;

/// Cross-attention conditioning sequence, `(tokens, cond_channels)`-shaped.
/// Text conditions contribute their token matrix; visual conditioning passes
/// a single-token matrix through the same interface.
pub type CondSeq = Array2<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Schedule constants, sufficient to rebuild a [`NoiseSchedule`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, CoreError> {
        make_schedule(self.kind, self.t_steps, self.beta_min, self.beta_max)
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { kind: ScheduleKind::Linear, t_steps: 1000, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

/// Diffusion schedule: β₁..β_T and the cumulative α_t := ∏_{s≤t} √(1−β_s)
/// (so α_t² is the conventional signal-variance product ᾱ_t).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub betas: Vec<f64>,
    pub alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    /// Total step count T.
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// β_t for t ∈ [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// α_t = ∏_{s≤t} √(1−β_s); α_0 = 1 by convention.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cum[t - 1]
        }
    }

    /// ᾱ_t = α_t².
    pub fn abar(&self, t: usize) -> f64 {
        let a = self.alpha(t);
        a * a
    }

    /// Posterior variance β̃_t = ((1−ᾱ_{t−1})/(1−ᾱ_t))·β_t for t ∈ [1, T].
    pub fn beta_tilde(&self, t: usize) -> f64 {
        (1.0 - self.abar(t - 1)) / (1.0 - self.abar(t)) * self.beta(t)
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.kind,
            t_steps: self.t_max(),
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }
}

/// Build a schedule. `Linear` interpolates β from `beta_min` to `beta_max`
/// over T steps.
pub fn make_schedule(
    kind: ScheduleKind,
    t_steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule, CoreError> {
    if t_steps < 1 {
        return Err(CoreError::Config("schedule needs T ≥ 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(CoreError::Config(format!(
            "schedule bounds need 0 < β_min ≤ β_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect(),
    };
    let mut alphas_cum = Vec::with_capacity(t_steps);
    let mut acc = 1.0f64;
    for &b in &betas {
        acc *= (1.0 - b).sqrt();
        alphas_cum.push(acc);
    }
    Ok(NoiseSchedule { kind, beta_min, beta_max, betas, alphas_cum })
}

/// Closed-form forward process: z_t = α_t·z0 + √(1−α_t²)·ε.
pub fn q_sample(
    z0: &Array3<f32>,
    t: usize,
    eps: &Array3<f32>,
    schedule: &NoiseSchedule,
) -> Result<Array3<f32>, CoreError> {
    if t < 1 || t > schedule.t_max() {
        return Err(CoreError::Config(format!(
            "q_sample t={t} outside [1, {}]",
            schedule.t_max()
        )));
    }
    if z0.dim() != eps.dim() {
        return Err(CoreError::Shape(format!(
            "noise shape {:?} must match z0 shape {:?}",
            eps.dim(),
            z0.dim()
        )));
    }
    let a = schedule.alpha(t);
    let sig = (1.0 - a * a).sqrt();
    let mut out = z0.clone();
    ndarray::Zip::from(&mut out).and(eps).for_each(|z, &e| {
        *z = (a * *z as f64 + sig * e as f64) as f32;
    });
    Ok(out)
}

/// ε-prediction model interface; the trained denoiser and the test oracles
/// both implement it.
pub trait EpsModel {
    fn eps(&self, z: &Array3<f32>, t: usize, cond: &CondSeq) -> Array3<f32>;
}

/// Classifier-free guidance: ε̃ = ε_∅ + s·(ε_c − ε_∅). At s = 1 the
/// conditional branch is returned directly so the output is bit-identical
/// to ε_θ(z, t, c).
pub fn guided_eps<M: EpsModel>(
    model: &M,
    z: &Array3<f32>,
    t: usize,
    cond: &CondSeq,
    empty: &CondSeq,
    s: f64,
) -> Array3<f32> {
    assert!(s.is_finite(), "guidance scale must be finite");
    if s == 1.0 {
        return model.eps(z, t, cond);
    }
    let e_uncond = model.eps(z, t, empty);
    if s == 0.0 {
        return e_uncond;
    }
    let e_cond = model.eps(z, t, cond);
    let mut out = e_uncond.clone();
    ndarray::Zip::from(&mut out).and(&e_cond).for_each(|u, &c| {
        *u = (*u as f64 + s * (c as f64 - *u as f64)) as f32;
    });
    out
}

/// Replace the condition with c_∅ with probability `p_drop`.
pub fn drop_condition(
    cond: &TextCondition,
    empty: &TextCondition,
    p_drop: f64,
    rng: &mut ChaCha8Rng,
) -> TextCondition {
    assert!((0.0..=1.0).contains(&p_drop), "p_drop must be in [0,1]");
    if uniform(rng) < p_drop {
        empty.clone()
    } else {
        cond.clone()
    }
}

/// One generalized ancestral update from `t_cur` to `t_prev < t_cur`.
/// `noise` of `None` takes the deterministic (zero-noise) branch; the final
/// step to t_prev = 0 has zero posterior variance regardless.
pub fn ancestral_step(
    z: &Array3<f32>,
    t_cur: usize,
    t_prev: usize,
    eps_hat: &Array3<f32>,
    schedule: &NoiseSchedule,
    noise: Option<&Array3<f32>>,
) -> Array3<f32> {
    assert!(t_prev < t_cur && t_cur <= schedule.t_max(), "bad step pair ({t_cur}, {t_prev})");
    let abar_cur = schedule.abar(t_cur);
    let abar_prev = schedule.abar(t_prev);
    let beta_eff = 1.0 - abar_cur / abar_prev;
    let k = beta_eff / (1.0 - abar_cur).sqrt();
    let inv = 1.0 / (1.0 - beta_eff).sqrt();
    let sigma = ((1.0 - abar_prev) / (1.0 - abar_cur) * beta_eff).max(0.0).sqrt();
    let mut out = z.clone();
    match noise {
        Some(n) => {
            assert_eq!(n.dim(), z.dim(), "noise shape mismatch");
            ndarray::Zip::from(&mut out).and(eps_hat).and(n).for_each(|zv, &e, &nv| {
                *zv = ((*zv as f64 - k * e as f64) * inv + sigma * nv as f64) as f32;
            });
        }
        None => {
            ndarray::Zip::from(&mut out).and(eps_hat).for_each(|zv, &e| {
                *zv = ((*zv as f64 - k * e as f64) * inv) as f32;
            });
        }
    }
    out
}

/// Single reverse step t → t−1 with the DDPM posterior mean and σ_t² = β̃_t;
/// no noise is added at t = 1.
pub fn p_sample_step(
    z: &Array3<f32>,
    t: usize,
    eps_hat: &Array3<f32>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f32>, CoreError> {
    if t < 1 || t > schedule.t_max() {
        return Err(CoreError::Config(format!(
            "p_sample_step t={t} outside [1, {}]",
            schedule.t_max()
        )));
    }
    let noise: Option<Array3<f32>> = if t > 1 {
        Some(
            normal_array(rng, z.shape())
                .into_dimensionality::<ndarray::Ix3>()
                .expect("3-d latent"),
        )
    } else {
        None
    };
    Ok(ancestral_step(z, t, t - 1, eps_hat, schedule, noise.as_ref()))
}

/// Uniformly strided descending timestep subset of [1, T], starting at T and
/// ending at 1. `n` is clamped to [1, T]; `n = T` yields every step.
pub fn strided_timesteps(t_max: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, t_max);
    if n == 1 {
        return vec![t_max];
    }
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let pos = t_max as f64 - (t_max - 1) as f64 * i as f64 / (n - 1) as f64;
        let t = pos.round() as usize;
        if ts.last() != Some(&t) {
            ts.push(t);
        }
    }
    ts
}

/// Run the guided reverse chain over a descending timestep slice, starting
/// from `z` (assumed noised to `ts[0]`). The final transition lands at t = 0.
/// `deterministic` suppresses all per-step noise.
#[allow(clippy::too_many_arguments)]
pub fn reverse_chain<M: EpsModel>(
    model: &M,
    cond: &CondSeq,
    empty: &CondSeq,
    s: f64,
    schedule: &NoiseSchedule,
    mut z: Array3<f32>,
    ts: &[usize],
    deterministic: bool,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let dims = [z.dim().0, z.dim().1, z.dim().2];
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let eps_hat = guided_eps(model, &z, t, cond, empty, s);
        let noise: Option<Array3<f32>> = if deterministic || t_prev == 0 {
            None
        } else {
            Some(
                normal_array(rng, &dims)
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("3-d latent"),
            )
        };
        z = ancestral_step(&z, t, t_prev, &eps_hat, schedule, noise.as_ref());
    }
    z
}

/// Full reverse loop from z_T ~ N(0, I) with classifier-free guidance at
/// every step, over a strided timestep subset. `deterministic` suppresses
/// all per-step noise (the initial z_T draw still comes from `rng`).
#[allow(clippy::too_many_arguments)]
pub fn sample<M: EpsModel>(
    model: &M,
    cond: &CondSeq,
    empty: &CondSeq,
    s: f64,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    n_steps: usize,
    deterministic: bool,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let dims = [shape.0, shape.1, shape.2];
    let z: Array3<f32> = normal_array(rng, &dims)
        .into_dimensionality::<ndarray::Ix3>()
        .expect("3-d latent");
    let ts = strided_timesteps(schedule.t_max(), n_steps);
    reverse_chain(model, cond, empty, s, schedule, z, &ts, deterministic, rng)
}

/// Eq.-1 objective on one latent: draw t uniform in [1, T] and ε ~ N(0, I),
/// return mean((ε_θ(q_sample(z0, t, ε), t, c) − ε)²).
pub fn training_loss<M: EpsModel>(
    model: &M,
    z0: &Array3<f32>,
    cond: &CondSeq,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64, CoreError> {
    let t = 1 + uniform_usize(rng, schedule.t_max());
    let eps: Array3<f32> = normal_array(rng, z0.shape())
        .into_dimensionality::<ndarray::Ix3>()
        .expect("3-d latent");
    let z_t = q_sample(z0, t, &eps, schedule)?;
    let eps_hat = model.eps(&z_t, t, cond);
    let mut acc = 0.0f64;
    for (&a, &b) in eps_hat.iter().zip(eps.iter()) {
        let d = a as f64 - b as f64;
        acc += d * d;
    }
    let loss = acc / eps.len() as f64;
    if !loss.is_finite() {
        return Err(CoreError::Train(format!("non-finite diffusion loss at t={t}")));
    }
    Ok(loss)
}
