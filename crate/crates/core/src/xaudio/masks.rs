//! Binary spectrogram masks for inpainting: irregular free-form masks
//! (unions of dilated strokes and boxes in three coverage classes) and
//! frame-wise masks that drop whole stretches of time frames.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use t2a_nn::rng::{substream, uniform, uniform_usize};

use crate::error::CoreError;
use crate::specmel::{FRAMES, N_MELS};

/// Irregular coverage classes plus the frame-wise family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    IrregularThin,
    IrregularMedium,
    IrregularThick,
    Frame,
}

impl MaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskKind::IrregularThin => "irregular-thin",
            MaskKind::IrregularMedium => "irregular-medium",
            MaskKind::IrregularThick => "irregular-thick",
            MaskKind::Frame => "frame",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s {
            "irregular-thin" => Ok(MaskKind::IrregularThin),
            "irregular-medium" => Ok(MaskKind::IrregularMedium),
            "irregular-thick" => Ok(MaskKind::IrregularThick),
            "frame" => Ok(MaskKind::Frame),
            other => Err(CoreError::Config(format!("unknown mask kind {other:?}"))),
        }
    }
}

fn default_p() -> f64 {
    0.5
}
fn default_span() -> usize {
    10
}

/// Declarative mask description, as carried in configs and run records.
/// `p` and `span` only apply to the frame family.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub kind: MaskKind,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_span")]
    pub span: usize,
    #[serde(default)]
    pub seed: u64,
}

impl MaskSpec {
    /// Materialize the mask this spec describes, deterministically in `seed`.
    pub fn generate(&self) -> Result<Array2<f32>, CoreError> {
        let mut rng = substream(self.seed, "mask", 0);
        match self.kind {
            MaskKind::Frame => gen_frame_mask(self.p, self.span, &mut rng),
            kind => Ok(gen_irregular_mask(kind, &mut rng)),
        }
    }
}

/// Fraction of masked cells.
pub fn mask_coverage(mask: &Array2<f32>) -> f64 {
    let total: f64 = mask.iter().map(|&v| v as f64).sum();
    total / mask.len() as f64
}

/// Frame-wise mask: each frame starts a run of `span` fully-masked frames
/// with probability `p / span`, runs merge where they overlap, so overall
/// frame coverage approaches `1 − (1 − p/span)^span`.
pub fn gen_frame_mask(p: f64, span: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f32>, CoreError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CoreError::Config(format!("frame-mask p must lie in (0, 1), got {p}")));
    }
    if span == 0 {
        return Err(CoreError::Config("frame-mask span must be at least 1".into()));
    }
    let q = p / span as f64;
    let mut mask = Array2::<f32>::zeros((N_MELS, FRAMES));
    for c in 0..FRAMES {
        if (uniform(rng) as f64) < q {
            for cc in c..(c + span).min(FRAMES) {
                mask.column_mut(cc).fill(1.0);
            }
        }
    }
    Ok(mask)
}

struct IrregularParams {
    /// Per-mask target coverage is drawn uniformly from this interior range;
    /// shapes are added until the target is crossed.
    target: (f64, f64),
    /// Stroke dilation radius range (inclusive).
    radius: (usize, usize),
    /// Box height and width ranges (inclusive).
    box_h: (usize, usize),
    box_w: (usize, usize),
}

fn irregular_params(kind: MaskKind) -> IrregularParams {
    match kind {
        MaskKind::IrregularThin => IrregularParams {
            target: (0.06, 0.12),
            radius: (1, 2),
            box_h: (4, 10),
            box_w: (8, 24),
        },
        MaskKind::IrregularMedium => IrregularParams {
            target: (0.17, 0.28),
            radius: (3, 6),
            box_h: (10, 24),
            box_w: (20, 60),
        },
        MaskKind::IrregularThick => IrregularParams {
            target: (0.38, 0.50),
            radius: (7, 12),
            box_h: (18, 38),
            box_w: (40, 110),
        },
        MaskKind::Frame => unreachable!("frame masks use gen_frame_mask"),
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    range.0 + uniform_usize(rng, range.1 - range.0 + 1)
}

fn stamp_disk(mask: &mut Array2<f32>, r: i64, c: i64, radius: i64) {
    let (rows, cols) = (N_MELS as i64, FRAMES as i64);
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            if dr * dr + dc * dc > radius * radius {
                continue;
            }
            let (rr, cc) = (r + dr, c + dc);
            if rr >= 0 && rr < rows && cc >= 0 && cc < cols {
                mask[(rr as usize, cc as usize)] = 1.0;
            }
        }
    }
}

fn stamp_polyline(mask: &mut Array2<f32>, rng: &mut ChaCha8Rng, radius: usize) {
    let mut r = uniform_usize(rng, N_MELS) as f64;
    let mut c = uniform_usize(rng, FRAMES) as f64;
    let segments = 2 + uniform_usize(rng, 3);
    for _ in 0..segments {
        let dr = (uniform(rng) as f64 - 0.5) * 50.0;
        let dc = (uniform(rng) as f64 - 0.5) * 180.0;
        let steps = dr.abs().max(dc.abs()).ceil().max(1.0) as usize;
        for k in 0..=steps {
            let f = k as f64 / steps as f64;
            stamp_disk(mask, (r + dr * f).round() as i64, (c + dc * f).round() as i64, radius as i64);
        }
        r = (r + dr).clamp(0.0, (N_MELS - 1) as f64);
        c = (c + dc).clamp(0.0, (FRAMES - 1) as f64);
    }
}

fn stamp_box(mask: &mut Array2<f32>, rng: &mut ChaCha8Rng, params: &IrregularParams) {
    let h = uniform_in(rng, params.box_h).min(N_MELS);
    let w = uniform_in(rng, params.box_w).min(FRAMES);
    let r0 = uniform_usize(rng, N_MELS - h + 1);
    let c0 = uniform_usize(rng, FRAMES - w + 1);
    for r in r0..r0 + h {
        for c in c0..c0 + w {
            mask[(r, c)] = 1.0;
        }
    }
}

/// Irregular mask: union of dilated random polylines and random boxes,
/// accumulated until a per-mask coverage target drawn from the kind's band
/// is crossed. Expected coverage: thin ≈ 5–15%, medium ≈ 15–35%,
/// thick ≈ 35–60%.
pub fn gen_irregular_mask(kind: MaskKind, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let params = irregular_params(kind);
    let target =
        params.target.0 + (uniform(rng) as f64) * (params.target.1 - params.target.0);
    let mut mask = Array2::<f32>::zeros((N_MELS, FRAMES));
    // Hard cap keeps degenerate RNG streams from looping forever.
    for _ in 0..10_000 {
        if mask_coverage(&mask) >= target {
            break;
        }
        if (uniform(rng) as f64) < 0.7 {
            let radius = uniform_in(rng, params.radius);
            stamp_polyline(&mut mask, rng, radius);
        } else {
            stamp_box(&mut mask, rng, &params);
        }
    }
    mask
}

/// Max-pool a pixel mask down to the latent grid: a latent cell is masked
/// iff any pixel in its receptive block is. Returns a one-channel map.
pub fn downsample_mask_max(
    mask: &Array2<f32>,
    latent_h: usize,
    latent_w: usize,
) -> Result<Array3<f32>, CoreError> {
    let (rows, cols) = mask.dim();
    if latent_h == 0 || latent_w == 0 || rows % latent_h != 0 || cols % latent_w != 0 {
        return Err(CoreError::Shape(format!(
            "mask {rows}×{cols} does not pool evenly onto a {latent_h}×{latent_w} latent grid"
        )));
    }
    let (fh, fw) = (rows / latent_h, cols / latent_w);
    let mut out = Array3::<f32>::zeros((1, latent_h, latent_w));
    for lr in 0..latent_h {
        for lc in 0..latent_w {
            let mut m = 0.0f32;
            for r in lr * fh..(lr + 1) * fh {
                for c in lc * fw..(lc + 1) * fw {
                    m = m.max(mask[(r, c)]);
                }
            }
            out[(0, lr, lc)] = m;
        }
    }
    Ok(out)
}

/// Validate that `mask` is a binary pixel grid of the spectrogram shape.
pub fn validate_mask(mask: &Array2<f32>) -> Result<(), CoreError> {
    if mask.dim() != (N_MELS, FRAMES) {
        return Err(CoreError::Shape(format!(
            "mask shape {:?} does not match the {N_MELS}×{FRAMES} spectrogram grid",
            mask.dim()
        )));
    }
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CoreError::Shape("mask values must be exactly 0 or 1".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_coverage_formula(p: f64, span: usize) -> f64 {
        1.0 - (1.0 - p / span as f64).powi(span as i32)
    }

    #[test]
    fn frame_masks_match_the_closed_form_coverage() {
        for &p in &[0.3, 0.5, 0.7] {
            let mut acc = 0.0f64;
            for i in 0..1000u64 {
                let mut rng = substream(40, "mask/frame", i);
                let mask = gen_frame_mask(p, 10, &mut rng).unwrap();
                acc += mask_coverage(&mask);
            }
            let mean = acc / 1000.0;
            let expect = frame_coverage_formula(p, 10);
            assert!(
                (mean - expect).abs() <= 0.02,
                "p = {p}: mean coverage {mean:.4} vs closed form {expect:.4}"
            );
        }
    }

    #[test]
    fn frame_masks_are_full_height_binary_and_seeded() {
        let mut rng = substream(41, "mask", 0);
        let mask = gen_frame_mask(0.5, 10, &mut rng).unwrap();
        validate_mask(&mask).unwrap();
        for c in 0..FRAMES {
            let col_sum: f32 = mask.column(c).sum();
            assert!(
                col_sum == 0.0 || col_sum == N_MELS as f32,
                "frame-mask column {c} is partially masked"
            );
        }
        let mut rng2 = substream(41, "mask", 0);
        let again = gen_frame_mask(0.5, 10, &mut rng2).unwrap();
        assert_eq!(mask, again, "same seed must yield the same mask");

        // Vanishing p: no span fires on this stream.
        let mut rng3 = substream(41, "mask", 1);
        let empty = gen_frame_mask(1e-12, 10, &mut rng3).unwrap();
        assert_eq!(mask_coverage(&empty), 0.0);
    }

    #[test]
    fn frame_mask_preconditions_are_enforced() {
        let mut rng = substream(42, "mask", 0);
        assert!(gen_frame_mask(0.0, 10, &mut rng).is_err());
        assert!(gen_frame_mask(1.0, 10, &mut rng).is_err());
        assert!(gen_frame_mask(-0.2, 10, &mut rng).is_err());
        assert!(gen_frame_mask(0.5, 0, &mut rng).is_err());
    }

    #[test]
    fn irregular_masks_land_in_their_coverage_bands() {
        let bands = [
            (MaskKind::IrregularThin, 0.05, 0.15),
            (MaskKind::IrregularMedium, 0.15, 0.35),
            (MaskKind::IrregularThick, 0.35, 0.60),
        ];
        for (kind, lo, hi) in bands {
            let mut acc = 0.0f64;
            for i in 0..1000u64 {
                let mut rng = substream(43, kind.as_str(), i);
                acc += mask_coverage(&gen_irregular_mask(kind, &mut rng));
            }
            let mean = acc / 1000.0;
            assert!(
                mean >= lo && mean <= hi,
                "{}: mean coverage {mean:.4} outside [{lo}, {hi}]",
                kind.as_str()
            );
        }
    }

    #[test]
    fn irregular_masks_are_binary_partial_height_and_seeded() {
        let mut rng = substream(44, "mask", 0);
        let mask = gen_irregular_mask(MaskKind::IrregularMedium, &mut rng);
        validate_mask(&mask).unwrap();
        let partial = (0..FRAMES).any(|c| {
            let s: f32 = mask.column(c).sum();
            s > 0.0 && s < N_MELS as f32
        });
        assert!(partial, "irregular masks should mask columns partially");
        let mut rng2 = substream(44, "mask", 0);
        assert_eq!(mask, gen_irregular_mask(MaskKind::IrregularMedium, &mut rng2));
        let mut rng3 = substream(44, "mask", 1);
        assert_ne!(mask, gen_irregular_mask(MaskKind::IrregularMedium, &mut rng3));
    }

    #[test]
    fn mask_spec_dispatches_and_parses() {
        let spec: MaskSpec =
            serde_json::from_str(r#"{"kind": "irregular-thin", "seed": 9}"#).unwrap();
        assert_eq!(spec.kind, MaskKind::IrregularThin);
        assert_eq!(spec.p, 0.5);
        assert_eq!(spec.span, 10);
        let mask = spec.generate().unwrap();
        validate_mask(&mask).unwrap();
        assert_eq!(mask, spec.generate().unwrap(), "spec generation must be deterministic");

        let frame = MaskSpec { kind: MaskKind::Frame, p: 0.5, span: 10, seed: 3 };
        let fm = frame.generate().unwrap();
        assert!(mask_coverage(&fm) > 0.0);

        assert!(serde_json::from_str::<MaskSpec>(r#"{"kind": "frame", "extra": 1}"#).is_err());
        assert_eq!(MaskKind::parse("irregular-thick").unwrap(), MaskKind::IrregularThick);
        assert!(MaskKind::parse("round").is_err());
        assert_eq!(
            serde_json::to_string(&MaskKind::IrregularMedium).unwrap(),
            "\"irregular-medium\""
        );
    }

    #[test]
    fn downsampling_pools_by_max() {
        let mut mask = Array2::<f32>::zeros((N_MELS, FRAMES));
        mask[(9, 17)] = 1.0; // latent cell (1, 2) under 8×8 pooling
        let lat = downsample_mask_max(&mask, 10, 78).unwrap();
        assert_eq!(lat.dim(), (1, 10, 78));
        let ones: Vec<_> =
            lat.indexed_iter().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![(0, 1, 2)]);

        let zero = downsample_mask_max(&Array2::zeros((N_MELS, FRAMES)), 10, 78).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        assert!(downsample_mask_max(&mask, 7, 78).is_err());
    }
}
