//! Grayscale rasters and binary PGM (P5) i/o.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image dimensions must be nonzero (got {width}x{height})")]
    EmptyDimensions { width: usize, height: usize },
    #[error("pixel buffer holds {got} bytes, expected {expected} for {width}x{height}")]
    BufferSize {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a binary PGM: {reason}")]
    Format { path: String, reason: String },
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn zeros(width: usize, height: usize) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyDimensions { width, height });
        }
        Ok(Self {
            width,
            height,
            pixels: vec![0; width * height],
        })
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyDimensions { width, height });
        }
        if pixels.len() != width * height {
            return Err(RasterError::BufferSize {
                width,
                height,
                expected: width * height,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    /// Crop a window anchored at `(x0, y0)`; pixels past the image border read as 0.
    pub fn crop_zero_padded(
        &self,
        x0: usize,
        y0: usize,
        width: usize,
        height: usize,
    ) -> Result<GrayImage, RasterError> {
        let mut out = GrayImage::zeros(width, height)?;
        for oy in 0..height {
            let sy = y0 + oy;
            if sy >= self.height {
                break;
            }
            for ox in 0..width {
                let sx = x0 + ox;
                if sx >= self.width {
                    break;
                }
                out.pixels[oy * width + ox] = self.pixels[sy * self.width + sx];
            }
        }
        Ok(out)
    }

    /// Bilinear resample to a new size. Output pixel centers map linearly onto
    /// input pixel centers; border samples clamp.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<GrayImage, RasterError> {
        let mut out = GrayImage::zeros(width, height)?;
        if width == self.width && height == self.height {
            out.pixels.copy_from_slice(&self.pixels);
            return Ok(out);
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for oy in 0..height {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for ox in 0..width {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let p00 = self.get(x0, y0) as f64;
                let p10 = self.get(x1, y0) as f64;
                let p01 = self.get(x0, y1) as f64;
                let p11 = self.get(x1, y1) as f64;
                let top = p00 + (p10 - p00) * wx;
                let bot = p01 + (p11 - p01) * wx;
                let v = top + (bot - top) * wy;
                out.pixels[oy * width + ox] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(out)
    }

    /// Write as binary PGM (P5), maxval 255.
    pub fn write_pgm<P: AsRef<Path>>(&self, path: P) -> Result<(), RasterError> {
        let path = path.as_ref();
        let wrap = |source| RasterError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height).map_err(wrap)?;
        w.write_all(&self.pixels).map_err(wrap)?;
        w.flush().map_err(wrap)
    }

    /// Read a binary PGM (P5) with maxval 255.
    pub fn read_pgm<P: AsRef<Path>>(path: P) -> Result<GrayImage, RasterError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let wrap_io = |source| RasterError::Io {
            path: display.clone(),
            source,
        };
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(wrap_io)?)
            .read_to_end(&mut bytes)
            .map_err(wrap_io)?;
        let fail = |reason: &str| RasterError::Format {
            path: display.clone(),
            reason: reason.to_string(),
        };

        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Option<String> {
            // skip whitespace and `#` comments between header fields
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                None
            } else {
                Some(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
            }
        };

        if token(&bytes).as_deref() != Some("P5") {
            return Err(fail("missing P5 magic"));
        }
        let width: usize = token(&bytes)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| fail("bad width"))?;
        let height: usize = token(&bytes)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| fail("bad height"))?;
        let maxval: usize = token(&bytes)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| fail("bad maxval"))?;
        if maxval != 255 {
            return Err(fail("only maxval 255 supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(fail("missing raster separator"));
        }
        pos += 1;
        let expected = width
            .checked_mul(height)
            .ok_or_else(|| fail("dimensions overflow"))?;
        if bytes.len() - pos < expected {
            return Err(fail("truncated raster"));
        }
        GrayImage::from_pixels(width, height, bytes[pos..pos + expected].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_reads_zero_outside_image() {
        let mut img = GrayImage::zeros(4, 3).unwrap();
        img.set(3, 2, 9);
        let crop = img.crop_zero_padded(2, 1, 4, 4).unwrap();
        assert_eq!(crop.get(1, 1), 9);
        assert_eq!(crop.get(2, 0), 0);
        assert_eq!(crop.get(3, 3), 0);
    }

    #[test]
    fn resize_identity_is_exact() {
        let img = GrayImage::from_pixels(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let same = img.resize_bilinear(3, 2).unwrap();
        assert_eq!(img, same);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = GrayImage::from_pixels(8, 8, vec![77; 64]).unwrap();
        let up = img.resize_bilinear(13, 5).unwrap();
        assert!(up.pixels().iter().all(|&p| p == 77));
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let img = GrayImage::from_pixels(5, 4, (0..20).map(|i| i as u8 * 12).collect()).unwrap();
        img.write_pgm(&path).unwrap();
        let back = GrayImage::read_pgm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pgm_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P6\n2 2\n255\nxxxx").unwrap();
        assert!(matches!(
            GrayImage::read_pgm(&path),
            Err(RasterError::Format { .. })
        ));
    }
}
