//! Binary PGM (P5, maxval 255).

use std::fs;
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, PgmError, Result};

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

/// Parses a P5 graymap. Header comments (`#` to end of line) are skipped.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(PgmError::BadMagic);
    }
    match bytes[1] {
        b'5' => {}
        b'1'..=b'7' => {
            return Err(PgmError::UnsupportedFormat(format!(
                "P{}",
                bytes[1] as char
            )))
        }
        _ => return Err(PgmError::BadMagic),
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let name = ["width", "height", "maxval"][i];
        if start == pos {
            return Err(PgmError::Header(format!("missing {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::Header(format!("{name} out of range")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError::Header("expected whitespace after maxval".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(PgmError::Header(format!("empty image {width}×{height}")));
    }
    if maxval != 255 {
        return Err(PgmError::MaxVal(maxval));
    }
    let expected = width as usize * height as usize;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(GrayImage {
        width: width as usize,
        height: height as usize,
        pixels: payload[..expected].to_vec(),
    })
}

pub fn load_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_pgm(&bytes)?)
}

pub fn save_pgm(image: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scaling_on_ingest() {
        let img = decode_pgm(b"P5\n2 2\n255\n\x00\xff\x80\x40").unwrap();
        assert_eq!(
            img.to_tensor().data(),
            &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]
        );
    }

    #[test]
    fn comments_are_skipped() {
        let img = decode_pgm(b"P5 # made by hand\n# another\n1 2 255\n\x07\x08").unwrap();
        assert_eq!((img.width, img.height, img.pixels), (1, 2, vec![7, 8]));
    }

    #[test]
    fn distinct_diagnostics() {
        assert!(
            matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(PgmError::UnsupportedFormat(f)) if f == "P2")
        );
        assert!(matches!(decode_pgm(b"GIF89a"), Err(PgmError::BadMagic)));
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n65535\n\0\0"),
            Err(PgmError::MaxVal(65535))
        ));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\x01"),
            Err(PgmError::Truncated {
                expected: 4,
                found: 1
            })
        ));
        assert!(matches!(decode_pgm(b"P5\n2\n"), Err(PgmError::Header(_))));
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let img = GrayImage::new(w, h, pixels).unwrap();
            let bytes = encode_pgm(&img);
            let back = decode_pgm(&bytes).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode_pgm(&back), bytes);
        }
    }
}
