use rand::Rng;

use super::resize::bilinear;
use super::GrayImage;
use crate::error::{Error, Result};

/// How samples falling outside the source are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FillMode {
    /// Replicate the nearest edge pixel.
    #[default]
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotation angles are drawn from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Shifts are drawn from `[-f, f]` of the width/height, per axis.
    pub max_shift_frac: f64,
    pub fill: FillMode,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 10.0,
            max_shift_frac: 0.10,
            fill: FillMode::Nearest,
            enabled: true,
        }
    }
}

/// Rotation about the image centre followed by a shift (in pixels; positive
/// moves content right/down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub angle_deg: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        angle_deg: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };
}

/// Applies the same transform to an image (bilinear) and its mask
/// (nearest), filling from the nearest edge.
pub fn apply_affine(
    image: &GrayImage,
    mask: &GrayImage,
    params: &AffineParams,
) -> Result<(GrayImage, GrayImage)> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::shape(
            "augment",
            format!(
                "image {}×{} vs mask {}×{}",
                image.width, image.height, mask.width, mask.height
            ),
        ));
    }
    if *params == AffineParams::IDENTITY {
        return Ok((image.clone(), mask.clone()));
    }
    let (w, h) = (image.width, image.height);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = params.angle_deg.to_radians().sin_cos();
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    let mut img_out = Vec::with_capacity(w * h);
    let mut mask_out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - params.shift_x;
            let dy = y as f64 - cy - params.shift_y;
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, max_x);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, max_y);
            img_out.push(bilinear(image, sx, sy));
            mask_out.push(mask.get(sx.round() as usize, sy.round() as usize));
        }
    }
    Ok((
        GrayImage::new(w, h, img_out)?,
        GrayImage::new(w, h, mask_out)?,
    ))
}

/// Draws one rotation and one shift per axis and applies them to both
/// `image` and `mask`.
pub fn augment<R: Rng + ?Sized>(
    image: &GrayImage,
    mask: &GrayImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(GrayImage, GrayImage)> {
    if !cfg.enabled {
        return apply_affine(image, mask, &AffineParams::IDENTITY);
    }
    if !(cfg.max_rotation_deg >= 0.0) || !(0.0..0.5).contains(&cfg.max_shift_frac) {
        return Err(Error::invalid("augment", format!("{cfg:?}")));
    }
    let r = cfg.max_rotation_deg;
    let f = cfg.max_shift_frac;
    let params = AffineParams {
        angle_deg: rng.random_range(-r..=r),
        shift_x: rng.random_range(-f..=f) * image.width as f64,
        shift_y: rng.random_range(-f..=f) * image.height as f64,
    };
    apply_affine(image, mask, &params)
}
