//! Data ingestion, augmentation and the subnet input resize.
//!
//! Batches follow the `[Resize(...), normalize]` pipeline shape: geometric
//! augmentation happens on [0,1] pixel values, the subnet branch resizes its
//! copy, and per-channel normalization is applied last, just before the
//! forward pass. The main branch is never resized by this path.

mod cifar;
mod resize;
mod synth;

pub use cifar::{load_cifar10_binary, Split};
pub use resize::{resize_shorter_side, sample_resolution, ResolutionRange};
pub use synth::{synth_dataset, SynthConfig};

use ndarray::{Array4, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// In-memory image classification dataset. Pixel values live in [0, 1];
/// normalization constants are applied per batch by [`Normalize`].
#[derive(Debug, Clone)]
pub struct Dataset {
    /// (N, C, H, W) in [0, 1].
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(ndarray::Axis(0), i)
    }

    /// Copy the rows at `indices` into one (B, C, H, W) batch.
    pub fn gather(&self, indices: &[usize]) -> (Array4<f32>, Vec<usize>) {
        let (_, c, h, w) = self.images.dim();
        let mut batch = Array4::<f32>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (bi, &i) in indices.iter().enumerate() {
            batch.index_axis_mut(ndarray::Axis(0), bi).assign(&self.image(i));
            labels.push(self.labels[i]);
        }
        (batch, labels)
    }
}

/// Per-channel normalization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalize {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalize {
    pub fn identity(channels: usize) -> Self {
        Normalize { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn apply(&self, batch: &Array4<f32>) -> Result<Array4<f32>> {
        let (_, c, _, _) = batch.dim();
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::Shape(format!(
                "normalization constants for {} channels, batch has {c}",
                self.mean.len()
            )));
        }
        if let Some(i) = self.std.iter().position(|&s| s <= 0.0) {
            return Err(Error::Config(format!("data.normalize.std[{i}]: must be > 0")));
        }
        let mut out = batch.clone();
        for ci in 0..c {
            let mean = self.mean[ci];
            let inv = 1.0 / self.std[ci];
            out.index_axis_mut(ndarray::Axis(1), ci)
                .mapv_inplace(|v| (v - mean) * inv);
        }
        Ok(out)
    }
}

/// Augmentation hook. Only horizontal flip and padded random crop ship;
/// anything further plugs in by name through [`Augment::Named`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Augment {
    None,
    Standard { flip: bool, crop_padding: usize },
    /// Extension point: resolved against augmentations registered by the
    /// embedding application; the core crate ships none.
    Named { name: String },
}

impl Augment {
    pub fn standard() -> Self {
        Augment::Standard { flip: true, crop_padding: 4 }
    }

    /// Apply to a [0,1] batch. Pure per-sample given the rng stream.
    pub fn apply(&self, batch: &mut Array4<f32>, rng: &mut impl Rng) -> Result<()> {
        match self {
            Augment::None => Ok(()),
            Augment::Standard { flip, crop_padding } => {
                let (b, _c, _h, _w) = batch.dim();
                for i in 0..b {
                    let mut img = batch.index_axis_mut(ndarray::Axis(0), i);
                    if *flip && rng.random_bool(0.5) {
                        img.invert_axis(ndarray::Axis(2));
                    }
                    if *crop_padding > 0 {
                        let p = *crop_padding;
                        let dy = rng.random_range(0..=2 * p) as isize - p as isize;
                        let dx = rng.random_range(0..=2 * p) as isize - p as isize;
                        shift_zero_pad(&mut img, dy, dx);
                    }
                }
                Ok(())
            }
            Augment::Named { name } => Err(Error::Config(format!(
                "data.augment: no augmentation named `{name}` is registered"
            ))),
        }
    }
}

/// Translate by (dy, dx) filling vacated pixels with zeros; equivalent to
/// zero-padding by max(|dy|,|dx|) and cropping at the shifted origin.
fn shift_zero_pad(img: &mut ndarray::ArrayViewMut3<'_, f32>, dy: isize, dx: isize) {
    if dy == 0 && dx == 0 {
        return;
    }
    let (c, h, w) = img.dim();
    let src = img.to_owned();
    img.fill(0.0);
    for ci in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                img[[ci, y, x]] = src[[ci, sy as usize, sx as usize]];
            }
        }
    }
}

/// Resize-then-center-crop used by the evaluation protocol.
pub fn resize_center_crop(batch: &Array4<f32>, resize_to: usize, crop: usize) -> Result<Array4<f32>> {
    if resize_to < crop {
        return Err(Error::Config(format!(
            "eval.resize ({resize_to}) must be >= eval.crop ({crop})"
        )));
    }
    let resized = resize_shorter_side(batch, resize_to)?;
    let (b, c, h, w) = resized.dim();
    if h < crop || w < crop {
        return Err(Error::Shape(format!("cannot crop {crop} from {h}x{w}")));
    }
    let y0 = (h - crop) / 2;
    let x0 = (w - crop) / 2;
    let mut out = Array4::<f32>::zeros((b, c, crop, crop));
    out.assign(&resized.slice(ndarray::s![.., .., y0..y0 + crop, x0..x0 + crop]));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn normalize_applies_per_channel() {
        let mut batch = Array4::<f32>::zeros((1, 2, 2, 2));
        batch.index_axis_mut(ndarray::Axis(1), 0).fill(0.5);
        batch.index_axis_mut(ndarray::Axis(1), 1).fill(1.0);
        let norm = Normalize { mean: vec![0.5, 0.0], std: vec![0.5, 2.0] };
        let out = norm.apply(&batch).unwrap();
        assert_eq!(out[[0, 0, 0, 0]], 0.0);
        assert_eq!(out[[0, 1, 0, 0]], 0.5);

        assert!(Normalize { mean: vec![0.0], std: vec![1.0] }.apply(&batch).is_err());
    }

    #[test]
    fn augment_none_is_identity_and_named_is_an_error() {
        let mut rng = stream(0, Stream::Augment, 0, 0);
        let mut batch = Array4::<f32>::from_elem((2, 3, 4, 4), 0.25);
        let copy = batch.clone();
        Augment::None.apply(&mut batch, &mut rng).unwrap();
        assert_eq!(batch, copy);
        let err = Augment::Named { name: "jitter".into() }.apply(&mut batch, &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn center_crop_protocol() {
        let batch = Array4::<f32>::from_shape_fn((1, 1, 6, 8), |(_, _, y, x)| (y * 8 + x) as f32);
        let out = resize_center_crop(&batch, 6, 4).unwrap();
        assert_eq!(out.dim(), (1, 1, 4, 4));
        // resize to the current shorter side is identity, so the crop window
        // starts at (1, 2)
        assert_eq!(out[[0, 0, 0, 0]], (1 * 8 + 2) as f32);
    }
}
