use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::Domain;
use crate::error::{DafosError, Result};

/// Images are resized to `IMAGE_SIDE × IMAGE_SIDE` RGB on load.
pub const IMAGE_SIDE: usize = 84;

/// Lazy reference to one sample; materialized by [`crate::backbone`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRef {
    File(PathBuf),
    Synthetic {
        domain: Domain,
        class: u32,
        index: u32,
    },
}

/// CHW float image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    /// Loads an image file as RGB, resized to `side × side`.
    pub fn load(path: &std::path::Path, side: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| DafosError::Data(format!("cannot decode {}: {e}", path.display())))?
            .resize_exact(side as u32, side as u32, image::imageops::FilterType::Triangle)
            .to_rgb8();
        let mut out = Self::zeros(3, side, side);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f64 / 255.0);
            }
        }
        Ok(out)
    }
}

/// A materialized input sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Vector(Vec<f64>),
    Image(ImageTensor),
}

impl Sample {
    pub fn flat_len(&self) -> usize {
        match self {
            Sample::Vector(v) => v.len(),
            Sample::Image(img) => img.data.len(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Sample::Vector(v) => v,
            Sample::Image(img) => &img.data,
        }
    }
}
