use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{save_pgm, GrayImage};
use crate::error::{Error, Result};

/// Fraction of generated samples without any ellipse.
pub const EMPTY_FRACTION: f64 = 0.3;
pub const NOISE_SIGMA: f64 = 0.05;

/// Axis-aligned filled ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Fill level in `[0, 1]`.
    pub intensity: f64,
}

/// `((x - cx) / a)² + ((y - cy) / b)² ≤ 1` at pixel `(x, y)`.
pub fn ellipse_contains(e: &Ellipse, x: usize, y: usize) -> bool {
    let dx = (x as f64 - e.cx) / e.a;
    let dy = (y as f64 - e.cy) / e.b;
    dx * dx + dy * dy <= 1.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: GrayImage,
    pub mask: GrayImage,
    pub ellipses: Vec<Ellipse>,
}

/// Draws one sample: noisy dark background with 0–2 bright ellipses.
pub fn synth_sample<R: Rng + ?Sized>(size: usize, rng: &mut R) -> SynthSample {
    let s = size as f64;
    let count = if rng.random_bool(EMPTY_FRACTION) {
        0
    } else {
        rng.random_range(1..=2)
    };
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| Ellipse {
            cx: rng.random_range(0.25 * s..0.75 * s),
            cy: rng.random_range(0.25 * s..0.75 * s),
            a: rng.random_range(s / 10.0..s / 4.0),
            b: rng.random_range(s / 10.0..s / 4.0),
            intensity: rng.random_range(0.6..0.9),
        })
        .collect();
    let background = rng.random_range(0.05..0.2);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let inside = ellipses
                .iter()
                .filter(|e| ellipse_contains(e, x, y))
                .map(|e| e.intensity);
            let level = inside.fold(background, f64::max);
            let v = (level + noise.sample(rng)).clamp(0.0, 1.0);
            image.push((v * 255.0).round() as u8);
            mask.push(if level > background { 255 } else { 0 });
        }
    }
    SynthSample {
        image: GrayImage {
            width: size,
            height: size,
            pixels: image,
        },
        mask: GrayImage {
            width: size,
            height: size,
            pixels: mask,
        },
        ellipses,
    }
}

/// Sample `i` goes to the test split when `i % 5 == 4`.
pub fn synth_split_is_test(i: usize) -> bool {
    i % 5 == 4
}

/// Writes `count` samples under `out_dir` (`images/`, `masks/`,
/// `index.tsv`) and returns the index path. Sample `i` draws from stream
/// `i` of the seeded generator, so output is a pure function of the seed.
pub fn synth_generate(count: usize, size: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::invalid("count", "must be at least 1"));
    }
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::invalid(
            "size",
            format!("{size} is not a positive multiple of 32"),
        ));
    }
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut index = String::from("# id\timage\tmask\tsplit\n");
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let sample = synth_sample(size, &mut rng);
        let id = format!("s{i:05}");
        let image = format!("images/{id}.pgm");
        let mask = format!("masks/{id}.pgm");
        save_pgm(&sample.image, &out_dir.join(&image))?;
        save_pgm(&sample.mask, &out_dir.join(&mask))?;
        let split = if synth_split_is_test(i) {
            "test"
        } else {
            "train"
        };
        index.push_str(&format!("{id}\t{image}\t{mask}\t{split}\n"));
    }
    let path = out_dir.join("index.tsv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(index.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
