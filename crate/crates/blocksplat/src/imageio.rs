//! Image file formats: 8-bit binary PPM (P6) for viewing, and a raw
//! little-endian f64 sidecar for lossless float round-trips in tests.

use crate::error::{Error, Result};
use crate::render::Image;
use std::path::Path;

/// Magic for the float image sidecar.
const F64_MAGIC: &[u8; 4] = b"F64I";

/// Quantize a unit-range channel to 8 bits, round half to even.
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Encode as binary PPM (P6, maxval 255, gamma-free).
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.data().len());
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

/// Decode a binary PPM (P6, maxval 255) into a unit-range float image.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut token = |expect: &str| -> Result<Vec<u8>> {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(format!("ppm: eof looking for {expect}"))),
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(bytes[start..pos].to_vec())
    };

    if token("magic")? != b"P6" {
        return Err(Error::format("ppm: not a P6 file"));
    }
    let parse_u32 = |raw: Vec<u8>, what: &str| -> Result<u32> {
        std::str::from_utf8(&raw)
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| Error::format(format!("ppm: bad {what}")))
    };
    let width = parse_u32(token("width")?, "width")?;
    let height = parse_u32(token("height")?, "height")?;
    let maxval = parse_u32(token("maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("ppm: unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 || width > 1 << 15 || height > 1 << 15 {
        return Err(Error::format(format!(
            "ppm: unreasonable dimensions {width}x{height}"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("ppm: missing raster separator"));
    }
    pos += 1;
    let n = width as usize * height as usize * 3;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::format("ppm: raster truncated"))?;
    let data: Vec<f64> = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(width, height, data)
}

/// Encode the lossless f64 sidecar: magic, width, height, channels (LE u32),
/// then row-major little-endian f64 samples.
pub fn encode_f64_image(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data().len() * 8);
    out.extend_from_slice(F64_MAGIC);
    out.extend_from_slice(&img.width.to_le_bytes());
    out.extend_from_slice(&img.height.to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64_image(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 || &bytes[0..4] != F64_MAGIC {
        return Err(Error::format("f64 image: bad magic"));
    }
    let rd = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let width = rd(4);
    let height = rd(8);
    let channels = rd(12);
    if channels != 3 {
        return Err(Error::format(format!(
            "f64 image: unsupported channel count {channels}"
        )));
    }
    if width == 0 || height == 0 || width > 1 << 15 || height > 1 << 15 {
        return Err(Error::format(format!(
            "f64 image: unreasonable dimensions {width}x{height}"
        )));
    }
    let n = width as usize * height as usize * 3;
    let want = 16 + n * 8;
    if bytes.len() != want {
        return Err(Error::format(format!(
            "f64 image: expected {want} bytes, got {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = 16 + i * 8;
        data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    Image::new(width, height, data)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_ppm(&bytes)
}

pub fn write_f64_image(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_f64_image(img))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_f64_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_f64_image(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ppm_header_and_quantization() {
        let mut img = Image::black(2, 1);
        img.data_mut()
            .copy_from_slice(&[0.0, 0.5, 1.0, 0.25, -0.1, 1.7]);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        // round_ties_even: 0.5*255 = 127.5 -> 128, 0.25*255 = 63.75 -> 64.
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 64, 0, 255]);
    }

    #[test]
    fn ppm_decode_rejects_garbage() {
        assert!(decode_ppm(b"").is_err());
        assert!(decode_ppm(b"P5\n1 1\n255\n...").is_err());
        assert!(decode_ppm(b"P6\n4 4\n255\nshort").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n").is_err());
    }

    #[test]
    fn f64_sidecar_is_lossless() {
        let mut img = Image::black(3, 2);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.137).sin();
        }
        let round = decode_f64_image(&encode_f64_image(&img)).unwrap();
        assert_eq!(round.data(), img.data());
        assert_eq!((round.width, round.height), (3, 2));
    }

    #[test]
    fn f64_sidecar_rejects_truncation() {
        let img = Image::black(2, 2);
        let mut bytes = encode_f64_image(&img);
        bytes.pop();
        assert!(decode_f64_image(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn ppm_roundtrip_preserves_quantized_levels(
            w in 1u32..8, h in 1u32..8, seed in 0u64..1000
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            let img = Image::new(w, h, data).unwrap();
            let decoded = decode_ppm(&encode_ppm(&img)).unwrap();
            // Levels k/255 survive a second encode exactly.
            let again = decode_ppm(&encode_ppm(&decoded)).unwrap();
            prop_assert_eq!(decoded.data(), again.data());
            for (a, b) in img.data().iter().zip(decoded.data()) {
                prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }

        #[test]
        fn decoders_never_panic_on_noise(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode_ppm(&bytes);
            let _ = decode_f64_image(&bytes);
        }
    }
}
