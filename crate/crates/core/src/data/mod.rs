//! Dataset plumbing: grayscale images, PGM I/O, resizing, augmentation,
//! dataset indices and the synthetic ellipse generator.

mod augment;
mod index;
mod pgm;
mod resize;
mod synth;

pub use augment::{apply_affine, augment, AffineParams, AugmentConfig, FillMode};
pub use index::{load_index, parse_index, DatasetIndex, SampleRecord, Split};
pub use pgm::{decode_pgm, encode_pgm, load_pgm, save_pgm};
pub use resize::{resize, ResizeMode};
pub use synth::{
    ellipse_contains, synth_generate, synth_sample, synth_split_is_test, Ellipse, SynthSample,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::invalid(
                "image",
                format!("{width}×{height} image with {} pixels", pixels.len()),
            ));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// `v / 255` as a `1×1×H×W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&v| v as f32 / 255.0).collect();
        Tensor::new(&[1, 1, self.height, self.width], data).expect("valid image dims")
    }

    /// A `1×1×H×W` tensor holding 1 where the mask is non-zero.
    pub fn to_binary_tensor(&self) -> Tensor {
        let data = self
            .pixels
            .iter()
            .map(|&v| if v > 0 { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[1, 1, self.height, self.width], data).expect("valid image dims")
    }

    /// Quantizes a single-image tensor (`…×H×W`, values in `[0, 1]`) to bytes
    /// with `round(p·255)`.
    pub fn from_probabilities(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() < 2 || shape[..shape.len() - 2].iter().product::<usize>() != 1 {
            return Err(Error::shape(
                "from_probabilities",
                format!("single image expected, got {shape:?}"),
            ));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let pixels = t
            .data()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::new(w, h, pixels)
    }

    /// `{0, 255}` mask of `p ≥ threshold`.
    pub fn from_threshold(t: &Tensor, threshold: f32) -> Result<Self> {
        let mut img = Self::from_probabilities(t)?;
        for (px, &p) in img.pixels.iter_mut().zip(t.data()) {
            *px = if p >= threshold { 255 } else { 0 };
        }
        Ok(img)
    }
}
