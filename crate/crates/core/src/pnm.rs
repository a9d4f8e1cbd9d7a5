//! Binary PPM (P6) and PGM (P5) images.
//!
//! Color images are stored sRGB-encoded with the 2.2 power approximation and
//! decoded back to linear values. Masks and diagnostic grayscale maps are
//! stored as plain bytes without any transfer curve.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};

const GAMMA: f64 = 2.2;
/// Largest accepted `width × height`; keeps hostile headers from allocating.
pub const MAX_PIXELS: usize = 1 << 26;

/// Raw samples of a decoded file, before any transfer curve.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 3 for P6, 1 for P5.
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

pub fn linear_to_srgb(v: f64) -> f64 {
    v.clamp(0.0, 1.0).powf(1.0 / GAMMA)
}

pub fn srgb_to_linear(v: f64) -> f64 {
    v.clamp(0.0, 1.0).powf(GAMMA)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_ppm(img: &ImageBuffer) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::dim(format!("PPM needs 3 channels, got {}", img.channels())));
    }
    let mut out = header("P6", img.width(), img.height());
    out.extend(img.data().iter().map(|&v| quantize(linear_to_srgb(v))));
    Ok(out)
}

/// `[0, 1]` grayscale values, stored without a transfer curve.
pub fn encode_pgm(img: &ImageBuffer) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::dim(format!("PGM needs 1 channel, got {}", img.channels())));
    }
    let mut out = header("P5", img.width(), img.height());
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = header("P5", mask.width(), mask.height());
    out.extend(mask.data().iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            if b == b'#' {
                while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos || self.pos - start > 9 {
            return Err(Error::format(format!("bad {what} in PNM header")));
        }
        Ok(std::str::from_utf8(&self.buf[start..self.pos]).unwrap().parse().unwrap())
    }
}

/// Parse a P5 or P6 file into raw samples.
pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::format("not a binary PPM/PGM file")),
    };
    let mut c = Cursor { buf: bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 || width.saturating_mul(height) > MAX_PIXELS {
        return Err(Error::format(format!("unsupported PNM size {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(format!("maxval {maxval} out of range")));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("missing separator after PNM header"));
    }
    let body = &bytes[c.pos + 1..];
    let n = width * height * channels;
    let bps = if maxval < 256 { 1 } else { 2 };
    if body.len() != n * bps {
        return Err(Error::format(format!("PNM body has {} bytes, expected {}", body.len(), n * bps)));
    }
    let samples: Vec<u16> = if bps == 1 {
        body.iter().map(|&b| b as u16).collect()
    } else {
        body.chunks_exact(2).map(|p| u16::from_be_bytes([p[0], p[1]])).collect()
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(Error::format("sample exceeds maxval"));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let p = decode_pnm(bytes)?;
    if p.channels != 3 {
        return Err(Error::format("expected a P6 color image"));
    }
    let m = p.maxval as f64;
    ImageBuffer::new(
        p.height,
        p.width,
        3,
        p.samples.iter().map(|&s| srgb_to_linear(s as f64 / m)).collect(),
    )
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageBuffer> {
    let p = decode_pnm(bytes)?;
    if p.channels != 1 {
        return Err(Error::format("expected a P5 grayscale image"));
    }
    let m = p.maxval as f64;
    ImageBuffer::new(p.height, p.width, 1, p.samples.iter().map(|&s| s as f64 / m).collect())
}

/// Samples at or above half of maxval are foreground.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let p = decode_pnm(bytes)?;
    if p.channels != 1 {
        return Err(Error::format("expected a P5 mask"));
    }
    let half = p.maxval as u32;
    Mask::new(p.height, p.width, p.samples.iter().map(|&s| 2 * s as u32 >= half).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    decode_ppm(&read(path)?)
}

pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    write(path, &encode_ppm(img)?)
}

pub fn write_pgm(path: &Path, img: &ImageBuffer) -> Result<()> {
    write(path, &encode_pgm(img)?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&read(path)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write(path, &encode_mask(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_quantized_srgb() {
        let img = ImageBuffer::from_fn(3, 4, 3, |y, x, c| ((y * 4 + x) * 3 + c) as f64 / 36.0);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n4 3\n255\n"));
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.dims(), img.dims());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((linear_to_srgb(*a) - linear_to_srgb(*b)).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // Re-encoding a decoded file reproduces its bytes.
        assert_eq!(encode_ppm(&back).unwrap(), bytes);
    }

    #[test]
    fn mask_round_trip() {
        let m = Mask::from_fn(5, 3, |y, x| (y + x) % 2 == 0);
        assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
    }

    #[test]
    fn header_comments_and_wide_samples() {
        let mut b = b"P5 # gray\n2 1 # size\n1000\n".to_vec();
        b.extend_from_slice(&500u16.to_be_bytes());
        b.extend_from_slice(&1000u16.to_be_bytes());
        let img = decode_pgm(&b).unwrap();
        assert_eq!(img.data(), &[0.5, 1.0]);
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            &b"P3\n1 1\n255\n\x00\x00\x00"[..],
            b"P6\n1 1\n255\n\x00",
            b"P6\n0 1\n255\n",
            b"P5\n1 1\n0\n\x00",
            b"P5\n1 1\n100\n\xff",
            b"P5\n99999 99999\n255\n",
            b"P5\n1",
        ] {
            assert!(matches!(decode_pnm(bad), Err(Error::Format(_))), "{bad:?}");
        }
    }
}
