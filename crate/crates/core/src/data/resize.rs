use super::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    /// Half-pixel-centred bilinear interpolation, for images.
    Bilinear,
    /// Nearest neighbour, for masks (keeps them binary).
    Nearest,
}

/// Resamples `image` to `target×target`.
pub fn resize(image: &GrayImage, target: usize, mode: ResizeMode) -> GrayImage {
    assert!(target >= 1, "resize target must be at least 1");
    if image.width == target && image.height == target {
        return image.clone();
    }
    let sx = image.width as f64 / target as f64;
    let sy = image.height as f64 / target as f64;
    let mut pixels = Vec::with_capacity(target * target);
    for y in 0..target {
        for x in 0..target {
            let v = match mode {
                ResizeMode::Nearest => {
                    let ix = (((x as f64 + 0.5) * sx) as usize).min(image.width - 1);
                    let iy = (((y as f64 + 0.5) * sy) as usize).min(image.height - 1);
                    image.get(ix, iy)
                }
                ResizeMode::Bilinear => {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (image.width - 1) as f64);
                    let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (image.height - 1) as f64);
                    bilinear(image, fx, fy)
                }
            };
            pixels.push(v);
        }
    }
    GrayImage {
        width: target,
        height: target,
        pixels,
    }
}

/// Bilinear sample at in-bounds real coordinates, rounded to a byte.
pub(crate) fn bilinear(image: &GrayImage, fx: f64, fy: f64) -> u8 {
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(image.width - 1);
    let y1 = (y0 + 1).min(image.height - 1);
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let p = |x, y| image.get(x, y) as f64;
    let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
    let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
    (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8
}
