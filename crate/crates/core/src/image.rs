//! 8-bit grayscale images and the binary PGM (P5) container.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape(
                "image",
                format!("{height}×{width} image with {} pixels", pixels.len()),
            ));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("pgm", "truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or(""));
        }
        if fields[0] != "P5" {
            return Err(Error::format("pgm", format!("magic `{}`", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format("pgm", format!("bad header field `{s}`")))
        };
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(Error::format("pgm", format!("maxval {maxval}, expected 255")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let raster = bytes.get(pos + 1..).unwrap_or(&[]);
        if raster.len() != width * height {
            return Err(Error::format(
                "pgm",
                format!("{}×{} raster with {} bytes", width, height, raster.len()),
            ));
        }
        Self::new(height, width, raster.to_vec())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pgm(&bytes)
    }
}

/// Stacks `top` above `bottom`; both must share a width.
pub fn stack_vertical(top: &GrayImage, bottom: &GrayImage) -> Result<GrayImage> {
    if top.width != bottom.width {
        return Err(Error::shape("concat_vertical", "image widths differ"));
    }
    let mut pixels = top.pixels.clone();
    pixels.extend_from_slice(&bottom.pixels);
    GrayImage::new(top.height + bottom.height, top.width, pixels)
}

/// Bilinear resampling of a row-major grid with corner alignment, so the
/// first and last rows/columns map onto each other exactly.
pub fn resample_bilinear(src: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (x.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for r in 0..out_rows {
        let (r0, r1, fr) = coord(r, out_rows, rows);
        for c in 0..out_cols {
            let (c0, c1, fc) = coord(c, out_cols, cols);
            let top = src[r0 * cols + c0] * (1.0 - fc) + src[r0 * cols + c1] * fc;
            let bottom = src[r1 * cols + c0] * (1.0 - fc) + src[r1 * cols + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::new(2, 3, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let bytes = img.encode_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(GrayImage::decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_rejects_other_formats() {
        assert!(GrayImage::decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(GrayImage::decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(GrayImage::decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let img = GrayImage::decode_pgm(b"P5\n# made by hand\n1 2\n255\n\x07\x09").unwrap();
        assert_eq!(img.pixels(), &[7, 9]);
    }

    #[test]
    fn stacking_places_top_first() {
        let a = GrayImage::filled(2, 2, 10);
        let b = GrayImage::filled(2, 2, 200);
        let ab = stack_vertical(&a, &b).unwrap();
        assert_eq!(ab.pixels(), &[10, 10, 10, 10, 200, 200, 200, 200]);
        assert_ne!(ab, stack_vertical(&b, &a).unwrap());
    }

    #[test]
    fn resample_keeps_corners_and_ramps() {
        let src: Vec<f64> = (0..6).map(f64::from).collect();
        let out = resample_bilinear(&src, 2, 3, 4, 5);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[19], 5.0);
        for row in out.chunks(5) {
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
