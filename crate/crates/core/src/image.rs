//! RGB raster images: binary PPM I/O, bilinear resize and cropping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image height and width in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub h_px: usize,
    pub w_px: usize,
}

impl ImageDims {
    pub fn new(h_px: usize, w_px: usize) -> Result<Self> {
        if h_px == 0 || w_px == 0 {
            return Err(Error::contract(format!("image dims must be positive, got {h_px}x{w_px}")));
        }
        Ok(Self { h_px, w_px })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }
}

/// Dense RGB image, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    dims: ImageDims,
    pixels: Vec<f64>,
}

impl RasterImage {
    pub const CHANNELS: usize = 3;

    pub fn new(dims: ImageDims, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != dims.h_px * dims.w_px * Self::CHANNELS {
            return Err(Error::contract(format!(
                "expected {} pixel values for {}x{}x3, got {}",
                dims.h_px * dims.w_px * 3,
                dims.h_px,
                dims.w_px,
                pixels.len()
            )));
        }
        Ok(Self { dims, pixels })
    }

    pub fn filled(dims: ImageDims, rgb: [f64; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(dims.h_px * dims.w_px * 3).collect();
        Self { dims, pixels }
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.dims.w_px + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.dims.w_px + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        let n = (self.dims.h_px * self.dims.w_px) as f64;
        acc.map(|v| v / n)
    }

    /// Bilinear resample with half-pixel centers and edge clamping.
    /// Resizing to the same dims returns a bitwise copy.
    pub fn resize_bilinear(&self, to: ImageDims) -> RasterImage {
        if to == self.dims {
            return self.clone();
        }
        let (ih, iw) = (self.dims.h_px, self.dims.w_px);
        let ys: Vec<(usize, usize, f64)> = (0..to.h_px).map(|y| sample_coord(y, ih, to.h_px)).collect();
        let xs: Vec<(usize, usize, f64)> = (0..to.w_px).map(|x| sample_coord(x, iw, to.w_px)).collect();
        let mut out = Vec::with_capacity(to.h_px * to.w_px * 3);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p00 = self.pixel(y0, x0);
                let p01 = self.pixel(y0, x1);
                let p10 = self.pixel(y1, x0);
                let p11 = self.pixel(y1, x1);
                for c in 0..3 {
                    let top = (1.0 - fx) * p00[c] + fx * p01[c];
                    let bottom = (1.0 - fx) * p10[c] + fx * p11[c];
                    out.push((1.0 - fy) * top + fy * bottom);
                }
            }
        }
        RasterImage { dims: to, pixels: out }
    }

    /// Copies the `h × w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<RasterImage> {
        if y + h > self.dims.h_px || x + w > self.dims.w_px || h == 0 || w == 0 {
            return Err(Error::contract(format!(
                "crop ({y},{x}) {h}x{w} outside {}x{} image",
                self.dims.h_px, self.dims.w_px
            )));
        }
        let mut pixels = Vec::with_capacity(h * w * 3);
        for row in y..y + h {
            let start = (row * self.dims.w_px + x) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Ok(RasterImage { dims: ImageDims { h_px: h, w_px: w }, pixels })
    }

    /// Parses a binary PPM (`P6`, maxval 255). Header comments are accepted;
    /// anything else outside the netpbm grammar is rejected, including
    /// trailing bytes after the raster.
    pub fn from_ppm(bytes: &[u8]) -> Result<RasterImage> {
        let mut cur = PpmCursor { bytes, pos: 0 };
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(Error::Ppm("missing P6 magic".into()));
        }
        cur.pos = 2;
        let w = cur.header_number("width")?;
        let h = cur.header_number("height")?;
        let maxval = cur.header_number("maxval")?;
        if maxval != 255 {
            return Err(Error::Ppm(format!("maxval must be 255, got {maxval}")));
        }
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(Error::Ppm("expected one whitespace byte after maxval".into())),
        }
        if w == 0 || h == 0 {
            return Err(Error::Ppm(format!("dimensions must be positive, got {w}x{h}")));
        }
        let need = w
            .checked_mul(h)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::Ppm("dimensions overflow".into()))?;
        let raster = &bytes[cur.pos..];
        if raster.len() != need {
            return Err(Error::Ppm(format!("expected {need} raster bytes, found {}", raster.len())));
        }
        let pixels = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(RasterImage { dims: ImageDims { h_px: h, w_px: w }, pixels })
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<RasterImage> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }

    /// Encodes as binary PPM, rounding each channel to the nearest of 256 levels.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.dims.w_px, self.dims.h_px).into_bytes();
        out.extend(self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Source taps and weight for output coordinate `o` when resampling `n_in → n_out`.
fn sample_coord(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

struct PpmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmCursor<'_> {
    /// Skips at least one whitespace byte (and any comments), then reads a decimal number.
    fn header_number(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        if self.pos == start {
            return Err(Error::Ppm(format!("expected whitespace before {what}")));
        }
        let digits = self.bytes[self.pos..].iter().take_while(|b| b.is_ascii_digit()).count();
        if digits == 0 {
            return Err(Error::Ppm(format!("expected decimal {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[self.pos..self.pos + digits]).expect("ascii digits");
        self.pos += digits;
        text.parse().map_err(|_| Error::Ppm(format!("{what} out of range")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(h: usize, w: usize) -> ImageDims {
        ImageDims::new(h, w).unwrap()
    }

    #[test]
    fn ppm_roundtrip_and_normalization() {
        let mut img = RasterImage::filled(dims(2, 3), [0.0, 1.0, 0.0]);
        img.set_pixel(1, 2, [1.0, 0.0, 51.0 / 255.0]);
        let bytes = img.to_ppm();
        let back = RasterImage::from_ppm(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_accepts_header_comments() {
        let mut bytes = b"P6 # made by hand\n1 # width\n1\n255\n".to_vec();
        bytes.extend([255, 0, 0]);
        let img = RasterImage::from_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_rejects_malformed_input() {
        let cases: Vec<Vec<u8>> = vec![
            b"P3\n1 1\n255\n".to_vec(),
            b"P6\n1 1\n65535\n\0\0\0\0\0\0".to_vec(),
            b"P6\n1 1\n255\n\0\0".to_vec(),
            b"P6\n1 1\n255\n\0\0\0\0".to_vec(),
            b"P6\n0 1\n255\n".to_vec(),
            b"P61 1\n255\n\0\0\0".to_vec(),
            b"P6\n1 1\n255".to_vec(),
            b"P6\n-1 1\n255\n\0\0\0".to_vec(),
        ];
        for c in cases {
            assert!(matches!(RasterImage::from_ppm(&c), Err(Error::Ppm(_))), "{:?}", String::from_utf8_lossy(&c));
        }
    }

    #[test]
    fn resize_same_size_is_identity() {
        let mut img = RasterImage::filled(dims(4, 5), [0.2, 0.4, 0.6]);
        img.set_pixel(3, 1, [0.9, 0.1, 0.3]);
        assert_eq!(img.resize_bilinear(dims(4, 5)), img);
    }

    #[test]
    fn resize_constant_field_stays_constant() {
        let img = RasterImage::filled(dims(7, 3), [0.25, 0.5, 0.75]);
        let out = img.resize_bilinear(dims(11, 13));
        assert!(out.pixels().chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
    }

    #[test]
    fn resize_half_pixel_centers() {
        // 1x2 → 1x4: samples at source x = -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
        let mut img = RasterImage::filled(dims(1, 2), [0.0; 3]);
        img.set_pixel(0, 1, [1.0; 3]);
        let out = img.resize_bilinear(dims(1, 4));
        let reds: Vec<f64> = (0..4).map(|x| out.pixel(0, x)[0]).collect();
        assert_eq!(reds, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn crop_bounds_checked() {
        let img = RasterImage::filled(dims(4, 4), [0.0; 3]);
        assert!(img.crop(2, 2, 2, 2).is_ok());
        assert!(img.crop(3, 0, 2, 1).is_err());
    }
}
