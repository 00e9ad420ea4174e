//! Sequences, frames, masks and exemplar/search crops.

pub mod crop;
pub mod dataset;
pub mod synthetic;

use std::path::PathBuf;
use std::sync::Arc;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

pub use crop::{crop_exemplar_search, ContextWindow, CropPair};
pub use dataset::{load_dataset, write_sequence, DatasetStream};
pub use synthetic::{generate_synthetic_sequence, SyntheticSpec};

/// Binary foreground grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Tight box around foreground pixels (pixel `i` spans `[i-0.5, i+0.5]`).
    pub fn tight_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| BBox::from_corners(x0 as f64 - 0.5, y0 as f64 - 0.5, x1 as f64 + 0.5, y1 as f64 + 0.5))
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    pub fn from_image(img: &GrayImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self {
            width: w,
            height: h,
            data: img.pixels().map(|p| p.0[0] >= 128).collect(),
        }
    }

    /// `1×H×W` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![1, self.height, self.width],
            self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// A frame held in memory or on disk.
#[derive(Clone, Debug)]
pub enum FrameRef {
    Memory(Arc<RgbImage>),
    Path(PathBuf),
}

impl FrameRef {
    pub fn load(&self) -> Result<Arc<RgbImage>> {
        match self {
            FrameRef::Memory(img) => Ok(Arc::clone(img)),
            FrameRef::Path(p) => Ok(Arc::new(image::open(p)?.to_rgb8())),
        }
    }
}

#[derive(Clone, Debug)]
pub enum MaskRef {
    Memory(Arc<Mask>),
    Path(PathBuf),
}

impl MaskRef {
    pub fn load(&self) -> Result<Arc<Mask>> {
        match self {
            MaskRef::Memory(m) => Ok(Arc::clone(m)),
            MaskRef::Path(p) => Ok(Arc::new(Mask::from_image(&image::open(p)?.to_luma8()))),
        }
    }
}

/// An annotated sequence.
#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub id: String,
    pub frames: Vec<FrameRef>,
    pub boxes: Vec<BBox>,
    /// Per-frame mask, absent for box-only annotations.
    pub masks: Vec<Option<MaskRef>>,
    /// False while the target is fully occluded.
    pub visible: Vec<bool>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::Dataset(format!("sequence {} has no frames", self.id)));
        }
        if self.boxes.len() != n || self.masks.len() != n || self.visible.len() != n {
            return Err(Error::Dataset(format!("sequence {} has inconsistent lengths", self.id)));
        }
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }
}

/// `3×H×W` tensor with values in `[0, 255]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = p.0[c] as f64;
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Inverse of [`image_to_tensor`], rounding and clamping to `u8`.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return crate::error::shape_err(format!("expected 3 channels, got {c}"));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|k| t.data()[k * w * h + i].round().clamp(0.0, 255.0) as u8))
    }))
}

/// Per-channel mean color.
pub fn mean_color(img: &RgbImage) -> [f64; 3] {
    let mut s = [0.0; 3];
    for p in img.pixels() {
        for c in 0..3 {
            s[c] += p.0[c] as f64;
        }
    }
    let n = (img.width() * img.height()).max(1) as f64;
    s.map(|v| v / n)
}
