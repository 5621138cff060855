//! Input-level augmentation: weak geometric transforms and a single-magnitude
//! strong intensity transform.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, Sample};
use crate::error::{DafosError, Result};

/// Upper bound of the strong-augmentation magnitude range.
pub const STRONG_MAGNITUDE_LIMIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    None,
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub mode: AugmentMode,
    pub flip_prob: f64,
    pub max_rotate_deg: f64,
    /// Smallest side fraction kept by the random resized crop.
    pub min_crop_scale: f64,
    /// Std of additive jitter for vector inputs.
    pub jitter_std: f64,
    pub strong_magnitude_max: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            mode: AugmentMode::Strong,
            flip_prob: 0.5,
            max_rotate_deg: 10.0,
            min_crop_scale: 0.85,
            jitter_std: 0.05,
            strong_magnitude_max: STRONG_MAGNITUDE_LIMIT,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            mode: AugmentMode::None,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=STRONG_MAGNITUDE_LIMIT).contains(&self.strong_magnitude_max) {
            return Err(DafosError::config(
                "augment.strong_magnitude_max",
                format!("must lie in [0, {STRONG_MAGNITUDE_LIMIT}]"),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(DafosError::config("augment.flip_prob", "must lie in [0, 1]"));
        }
        if !(self.min_crop_scale > 0.0 && self.min_crop_scale <= 1.0) {
            return Err(DafosError::config("augment.min_crop_scale", "must lie in (0, 1]"));
        }
        if self.jitter_std < 0.0 || self.max_rotate_deg < 0.0 {
            return Err(DafosError::config("augment", "jitter and rotation must be nonnegative"));
        }
        Ok(())
    }

    /// Support samples never receive the strong transform.
    pub fn for_support(&self) -> Self {
        Self {
            mode: self.mode.min(AugmentMode::Weak),
            ..*self
        }
    }
}

/// Draws a strong-augmentation magnitude uniformly from `[0, max]`.
pub fn strong_magnitude<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> Result<f64> {
    policy.validate()?;
    Ok(rng.random::<f64>() * policy.strong_magnitude_max)
}

/// Horizontal mirror: `out[c, y, x] = in[c, y, W-1-x]`.
pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let mut out = ImageTensor::zeros(img.channels, img.height, img.width);
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.get(c, y, img.width - 1 - x));
            }
        }
    }
    out
}

/// Rotation about the image centre with nearest-neighbour sampling; uncovered
/// pixels are zero.
pub fn rotate(img: &ImageTensor, degrees: f64) -> ImageTensor {
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((img.height as f64 - 1.0) / 2.0, (img.width as f64 - 1.0) / 2.0);
    let mut out = ImageTensor::zeros(img.channels, img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = (c * dx + s * dy + cx).round();
            let sy = (-s * dx + c * dy + cy).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < img.width && (sy as usize) < img.height {
                for ch in 0..img.channels {
                    out.set(ch, y, x, img.get(ch, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

/// Crops a `scale`-sized square at `(top, left)` (fractions of the free
/// margin) and resizes it back with nearest-neighbour sampling.
pub fn resized_crop(img: &ImageTensor, scale: f64, top: f64, left: f64) -> ImageTensor {
    let ch = ((img.height as f64 * scale).round() as usize).clamp(1, img.height);
    let cw = ((img.width as f64 * scale).round() as usize).clamp(1, img.width);
    let y0 = ((img.height - ch) as f64 * top).round() as usize;
    let x0 = ((img.width - cw) as f64 * left).round() as usize;
    let mut out = ImageTensor::zeros(img.channels, img.height, img.width);
    for y in 0..img.height {
        let sy = y0 + (y * ch / img.height).min(ch - 1);
        for x in 0..img.width {
            let sx = x0 + (x * cw / img.width).min(cw - 1);
            for c in 0..img.channels {
                out.set(c, y, x, img.get(c, sy, sx));
            }
        }
    }
    out
}

fn random_sign<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Applies `policy` to `sample`. `None` is the identity; `Weak` applies the
/// geometric transforms (or jitter for vectors); `Strong` additionally applies
/// `x ← (1 ± m)·x ± m` with one magnitude `m ∈ [0, strong_magnitude_max]`.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, policy: &AugmentPolicy, rng: &mut R) -> Result<Sample> {
    policy.validate()?;
    if policy.mode == AugmentMode::None {
        return Ok(sample.clone());
    }
    let mut out = match sample {
        Sample::Image(img) => {
            let mut img = if rng.random::<f64>() < policy.flip_prob {
                hflip(img)
            } else {
                img.clone()
            };
            if policy.max_rotate_deg > 0.0 {
                let deg = (rng.random::<f64>() * 2.0 - 1.0) * policy.max_rotate_deg;
                img = rotate(&img, deg);
            }
            if policy.min_crop_scale < 1.0 {
                let scale = policy.min_crop_scale + rng.random::<f64>() * (1.0 - policy.min_crop_scale);
                img = resized_crop(&img, scale, rng.random(), rng.random());
            }
            Sample::Image(img)
        }
        Sample::Vector(v) => {
            if policy.jitter_std > 0.0 {
                let normal = Normal::new(0.0, policy.jitter_std).expect("finite std");
                Sample::Vector(v.iter().map(|x| x + normal.sample(rng)).collect())
            } else {
                Sample::Vector(v.clone())
            }
        }
    };
    if policy.mode == AugmentMode::Strong {
        let m = strong_magnitude(policy, rng)?;
        let (a, b) = (1.0 + m * random_sign(rng), m * random_sign(rng));
        match &mut out {
            Sample::Image(img) => img.data.iter_mut().for_each(|x| *x = (a * *x + b).clamp(0.0, 1.0)),
            Sample::Vector(v) => v.iter_mut().for_each(|x| *x = a * *x + b),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use rand::SeedableRng;

    fn ramp(w: usize, h: usize) -> ImageTensor {
        let mut img = ImageTensor::zeros(3, h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.set(c, y, x, (c * 100 + y * 10 + x) as f64 / 1000.0);
                }
            }
        }
        img
    }

    #[test]
    fn none_is_bitwise_identity() {
        let s = Sample::Image(ramp(5, 4));
        let out = augment(&s, &AugmentPolicy::none(), &mut DetRng::seed_from_u64(0)).unwrap();
        assert_eq!(out, s);
        let v = Sample::Vector(vec![0.1, -3.0]);
        assert_eq!(augment(&v, &AugmentPolicy::none(), &mut DetRng::seed_from_u64(0)).unwrap(), v);
    }

    #[test]
    fn hflip_mirrors_columns() {
        let img = ramp(5, 4);
        let f = hflip(&img);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(f.get(c, y, x), img.get(c, y, 4 - x));
                }
            }
        }
    }

    #[test]
    fn zero_rotation_and_full_crop_are_identity() {
        let img = ramp(6, 6);
        assert_eq!(rotate(&img, 0.0), img);
        assert_eq!(resized_crop(&img, 1.0, 0.3, 0.7), img);
    }

    #[test]
    fn strong_magnitude_stays_in_range() {
        let policy = AugmentPolicy::default();
        let mut rng = DetRng::seed_from_u64(11);
        let max = (0..10_000)
            .map(|_| strong_magnitude(&policy, &mut rng).unwrap())
            .fold(0.0f64, f64::max);
        assert!(max <= 0.5 && max > 0.49, "{max}");
    }

    #[test]
    fn out_of_range_magnitude_is_rejected() {
        let policy = AugmentPolicy {
            strong_magnitude_max: 0.8,
            ..Default::default()
        };
        let err = augment(&Sample::Vector(vec![1.0]), &policy, &mut DetRng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("strong_magnitude_max"));
    }

    #[test]
    fn augment_preserves_shape() {
        let s = Sample::Image(ramp(8, 8));
        let out = augment(&s, &AugmentPolicy::default(), &mut DetRng::seed_from_u64(5)).unwrap();
        assert_eq!(out.flat_len(), s.flat_len());
        if let Sample::Image(img) = out {
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn support_policy_drops_strong() {
        assert_eq!(AugmentPolicy::default().for_support().mode, AugmentMode::Weak);
        assert_eq!(AugmentPolicy::none().for_support().mode, AugmentMode::None);
    }
}
