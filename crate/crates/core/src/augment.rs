//! Seeded two-view augmentation: crop → resize → flip → rotate → jitter → noise.
//!
//! Every random choice is drawn from a ChaCha stream seeded by
//! [`crate::seed::view_seed`], so a view depends only on
//! `(image, spec, sample_seed, view_index)` and never on processing order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// `hash(global_seed, epoch, sample_index, view_index)`.
    PerSampleView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    /// `(min, max)` fraction of the image area kept by the crop.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Maximum additive brightness shift.
    pub brightness: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Allowed counter-clockwise rotations in degrees (multiples of 90).
    pub rotations: Vec<u32>,
    pub seed_policy: SeedPolicy,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            noise_sigma: 0.02,
            rotations: vec![0, 90, 180, 270],
            seed_policy: SeedPolicy::PerSampleView,
        }
    }
}

impl AugmentationSpec {
    /// A spec whose chain is the identity.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            noise_sigma: 0.0,
            rotations: vec![0],
            seed_policy: SeedPolicy::PerSampleView,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "augmentation.crop_scale must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "augmentation.flip_prob must be in [0, 1], got {}",
                self.flip_prob
            )));
        }
        if !(self.brightness >= 0.0) || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::Config(
                "augmentation.brightness must be >= 0 and contrast in [0, 1)".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "augmentation.noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.rotations.is_empty() || self.rotations.iter().any(|r| r % 90 != 0 || *r >= 360) {
            return Err(Error::Config(format!(
                "augmentation.rotations must be a non-empty subset of {{0, 90, 180, 270}}, got {:?}",
                self.rotations
            )));
        }
        Ok(())
    }
}

/// Two independently augmented views of `image` (`[C × H × W]`, values in `[0, 1]`).
pub fn make_views(image: &Tensor, spec: &AugmentationSpec, sample_seed: u64) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    if image.rank() != 3 {
        return Err(Error::Contract(format!("image must be [C×H×W], got {:?}", image.shape())));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Precondition("image values must lie in [0, 1]".into()));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let min_side = spec.crop_scale.0.sqrt() * h.min(w) as f64;
    if min_side < 1.0 {
        return Err(Error::Config(format!(
            "crop scale {} yields a crop side of {min_side:.3} px (< 1 px)",
            spec.crop_scale.0
        )));
    }
    if h != w && spec.rotations.iter().any(|r| r % 180 != 0) {
        return Err(Error::Config(format!(
            "quarter-turn rotations need a square image, got {h}×{w}"
        )));
    }
    let _ = c;
    let v1 = augment(image, spec, seed::view_seed(sample_seed, 0));
    let v2 = augment(image, spec, seed::view_seed(sample_seed, 1));
    Ok((v1, v2))
}

fn augment(image: &Tensor, spec: &AugmentationSpec, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    let (lo, hi) = spec.crop_scale;
    if lo < 1.0 || hi < 1.0 {
        out = random_resized_crop(&out, rng.random_range(lo..=hi), &mut rng);
    }
    if spec.flip_prob > 0.0 && rng.random::<f64>() < spec.flip_prob {
        out = flip_horizontal(&out);
    }
    let quarter_turns = spec.rotations[rng.random_range(0..spec.rotations.len())] / 90;
    for _ in 0..quarter_turns {
        out = rotate_quarter(&out);
    }
    if spec.brightness > 0.0 || spec.contrast > 0.0 {
        let factor = 1.0 + sym_uniform(&mut rng, spec.contrast);
        let shift = sym_uniform(&mut rng, spec.brightness);
        let mean = out.sum() / out.numel() as f64;
        out = out.map(|v| (v - mean) * factor + mean + shift);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    out.map(|v| v.clamp(0.0, 1.0))
}

fn sym_uniform(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Crops a window covering `area_frac` of the image (same aspect ratio) at a
/// random position and resizes it back with corner-aligned bilinear sampling.
fn random_resized_crop(image: &Tensor, area_frac: f64, rng: &mut impl Rng) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let side = area_frac.sqrt();
    let (ch, cw) = (side * h as f64, side * w as f64);
    let top = rng.random_range(0.0..=(h as f64 - ch).max(0.0));
    let left = rng.random_range(0.0..=(w as f64 - cw).max(0.0));
    resize_window(image, top, left, ch, cw, h, w)
}

/// Bilinear resize of a `[C × H × W]` image with corner-aligned sampling.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    resize_window(image, 0.0, 0.0, h, w, out_h, out_w)
}

/// Samples the window `[top, top + ch) × [left, left + cw)` onto an
/// `out_h × out_w` grid, mapping output corners to the centres of the
/// window's corner pixels.
pub fn resize_window(image: &Tensor, top: f64, left: f64, ch: f64, cw: f64, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let step = |extent: f64, n: usize| if n > 1 { (extent - 1.0) / (n - 1) as f64 } else { 0.0 };
    let (sy, sx) = (step(ch, out_h), step(cw, out_w));
    let d = image.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for i in 0..out_h {
        let y = top + i as f64 * sy;
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for j in 0..out_w {
            let x = left + j as f64 * sx;
            let x0 = (x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            for ch_i in 0..c {
                let at = |yy: usize, xx: usize| d[(ch_i * h + yy) * w + xx];
                let top_row = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                let bottom_row = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                out[(ch_i * out_h + i) * out_w + j] = (1.0 - fy) * top_row + fy * bottom_row;
            }
        }
    }
    Tensor::from_parts(vec![c, out_h, out_w], out)
}

pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ch * h + i) * w + j] = d[(ch * h + i) * w + (w - 1 - j)];
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

/// One counter-clockwise quarter turn of a square image.
pub fn rotate_quarter(image: &Tensor) -> Tensor {
    let (c, n) = (image.shape()[0], image.shape()[1]);
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        for i in 0..n {
            for j in 0..n {
                out[(ch * n + i) * n + j] = d[(ch * n + j) * n + (n - 1 - i)];
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}
