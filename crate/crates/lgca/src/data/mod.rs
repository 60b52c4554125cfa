//! Segmentation samples, batches, dataset manifests and sources.

use ndarray::{Array2, Array3, Array4, Axis};
use thiserror::Error;

mod augment;
mod disk;
pub mod resize;
mod synth;
mod tiling;

pub use augment::{augment, AugmentParams};
pub use disk::{
    load_image_rgb, load_split, save_color_mask, save_dataset, save_index_mask, Manifest,
};
pub use synth::synth_shapes;
pub use tiling::{stitch_masks, tile_image, tile_offsets};

/// Mask value excluded from loss and metrics.
pub const IGNORE: i64 = 255;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: std::path::PathBuf,
        source: image::ImageError,
    },
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}

/// One image/mask pair. Image is `[3, H, W]` in `[0, 1]`; mask holds class
/// indices or [`IGNORE`].
#[derive(Clone, Debug)]
pub struct SegSample {
    pub image: Array3<f64>,
    pub mask: Array2<i64>,
}

impl SegSample {
    pub fn size(&self) -> (usize, usize) {
        let d = self.mask.dim();
        (d.0, d.1)
    }

    pub fn validate(&self, classes: usize) -> Result<(), DataError> {
        let (c, h, w) = self.image.dim();
        if c != 3 {
            return Err(invalid(format!("image must have 3 channels, got {c}")));
        }
        if self.mask.dim() != (h, w) {
            return Err(invalid(format!(
                "mask {:?} does not match image {h}x{w}",
                self.mask.dim()
            )));
        }
        for &m in self.mask.iter() {
            if m != IGNORE && !(0..classes as i64).contains(&m) {
                return Err(invalid(format!("mask value {m} outside 0..{classes}")));
            }
        }
        Ok(())
    }
}

/// A batch of equally sized samples: images `[B, 3, H, W]`, masks `[B, H, W]`.
#[derive(Clone, Debug)]
pub struct SegBatch {
    pub images: Array4<f64>,
    pub masks: Array3<i64>,
}

impl SegBatch {
    pub fn from_samples(samples: &[&SegSample]) -> Result<SegBatch, DataError> {
        let first = samples.first().ok_or_else(|| invalid("empty batch"))?;
        let (h, w) = first.size();
        let b = samples.len();
        let mut images = Array4::<f64>::zeros((b, 3, h, w));
        let mut masks = Array3::<i64>::from_elem((b, h, w), IGNORE);
        for (i, s) in samples.iter().enumerate() {
            if s.size() != (h, w) {
                return Err(invalid(format!(
                    "sample {i} is {:?}, expected {h}x{w}",
                    s.size()
                )));
            }
            images.index_axis_mut(Axis(0), i).assign(&s.image);
            masks.index_axis_mut(Axis(0), i).assign(&s.mask);
        }
        Ok(SegBatch { images, masks })
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (usize, usize) {
        let d = self.images.dim();
        (d.2, d.3)
    }

    /// Checks the batch contract: shared shapes, class range, and spatial
    /// dims divisible by the deepest encoder stride.
    pub fn validate(&self, classes: usize) -> Result<(), DataError> {
        let (b, c, h, w) = self.images.dim();
        if c != 3 {
            return Err(invalid(format!("images must have 3 channels, got {c}")));
        }
        if self.masks.dim() != (b, h, w) {
            return Err(invalid("mask/image shape mismatch".to_string()));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(invalid(format!("batch size {h}x{w} not divisible by 32")));
        }
        for &m in self.masks.iter() {
            if m != IGNORE && !(0..classes as i64).contains(&m) {
                return Err(invalid(format!("mask value {m} outside 0..{classes}")));
            }
        }
        Ok(())
    }
}
