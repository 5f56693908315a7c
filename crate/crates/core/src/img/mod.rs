//! Float image containers and their file formats: 8-bit PNG for color (with
//! explicit quantization), and PFM for depth maps (a trivial float format
//! that round-trips exactly).

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions {width}x{height} are invalid")]
    BadDimensions { width: usize, height: usize },
    #[error("pixel buffer holds {got} pixels, expected {want}")]
    BadBufferSize { got: usize, want: usize },
    #[error("image I/O: {0}")]
    Io(#[from] io::Error),
    #[error("PNG codec: {0}")]
    Png(#[from] image::ImageError),
    #[error("PFM parse: {0}")]
    PfmFormat(String),
    #[error("images have different dimensions: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
}

/// RGB image with f64 channels in `[0,1]`, row-major from the top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl ImageF {
    pub fn new(width: usize, height: usize) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::BadDimensions { width, height });
        }
        Ok(Self { width, height, pixels: vec![[0.0; 3]; width * height] })
    }

    pub fn from_pixels(
        width: usize,
        height: usize,
        pixels: Vec<[f64; 3]>,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::BadDimensions { width, height });
        }
        if pixels.len() != width * height {
            return Err(ImageError::BadBufferSize { got: pixels.len(), want: width * height });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    /// Snap every channel to the nearest 8-bit level. Exported PNGs hold
    /// exactly these values, so quantizing at creation time makes
    /// save -> load an identity.
    pub fn quantize_u8(&mut self) {
        for p in &mut self.pixels {
            for c in p.iter_mut() {
                *c = (*c * 255.0).round().clamp(0.0, 255.0) / 255.0;
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, p) in self.pixels.iter().enumerate() {
            let x = (i % self.width) as u32;
            let y = (i / self.width) as u32;
            let px = image::Rgb([
                (p[0] * 255.0).round().clamp(0.0, 255.0) as u8,
                (p[1] * 255.0).round().clamp(0.0, 255.0) as u8,
                (p[2] * 255.0).round().clamp(0.0, 255.0) as u8,
            ]);
            buf.put_pixel(x, y, px);
        }
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img
            .pixels()
            .map(|p| [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0])
            .collect();
        Self::from_pixels(w, h, pixels)
    }

    /// Mean squared error over all pixels and channels.
    pub fn mse(&self, other: &ImageF) -> Result<f64, ImageError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(ImageError::DimensionMismatch {
                a: (self.width, self.height),
                b: (other.width, other.height),
            });
        }
        let mut acc = 0.0;
        for (a, b) in self.pixels.iter().zip(&other.pixels) {
            for c in 0..3 {
                let d = a[c] - b[c];
                acc += d * d;
            }
        }
        Ok(acc / (self.pixels.len() * 3) as f64)
    }
}

/// Per-pixel depth with a validity mask. Invalid pixels (rays that never
/// accumulated meaningful opacity) are stored as 0 and flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::BadDimensions { width, height });
        }
        Ok(Self { width, height, depth: vec![0.0; width * height], valid: vec![false; width * height] })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.depth[i])
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        let i = y * self.width + x;
        self.depth[i] = depth;
        self.valid[i] = true;
    }

    pub fn set_invalid(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.depth[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Write as PFM (grayscale `Pf`, little-endian, scale -1). Invalid pixels
    /// are encoded as 0, which readers of this format conventionally treat as
    /// missing. Values are stored as f32; callers that want exact round-trips
    /// should hold f32-representable depths.
    pub fn save_pfm(&self, path: &Path) -> Result<(), ImageError> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "Pf\n{} {}\n-1.0\n", self.width, self.height)?;
        // PFM scanlines run bottom-to-top.
        let mut bytes = Vec::with_capacity(self.width * self.height * 4);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let i = y * self.width + x;
                let v = if self.valid[i] { self.depth[i] as f32 } else { 0.0f32 };
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load_pfm(path: &Path) -> Result<Self, ImageError> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        // Header: three whitespace-separated tokens (magic, "W H", scale).
        let mut pos = 0usize;
        let mut next_token = |raw: &[u8]| -> Result<String, ImageError> {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::PfmFormat("truncated header".into()));
            }
            // Consume exactly one whitespace after the token.
            pos += 1;
            Ok(String::from_utf8_lossy(&raw[start..pos - 1]).into_owned())
        };
        let magic = next_token(&raw)?;
        if magic != "Pf" {
            return Err(ImageError::PfmFormat(format!("bad magic {magic:?} (grayscale Pf only)")));
        }
        let width: usize = next_token(&raw)?
            .parse()
            .map_err(|e| ImageError::PfmFormat(format!("width: {e}")))?;
        let height: usize = next_token(&raw)?
            .parse()
            .map_err(|e| ImageError::PfmFormat(format!("height: {e}")))?;
        let scale: f64 = next_token(&raw)?
            .parse()
            .map_err(|e| ImageError::PfmFormat(format!("scale: {e}")))?;
        if scale >= 0.0 {
            return Err(ImageError::PfmFormat("big-endian PFM not supported".into()));
        }
        let want = width * height * 4;
        if raw.len() < pos + want {
            return Err(ImageError::PfmFormat(format!(
                "payload holds {} bytes, want {want}",
                raw.len().saturating_sub(pos)
            )));
        }
        let mut out = DepthMap::new(width, height)?;
        for ry in 0..height {
            let y = height - 1 - ry;
            for x in 0..width {
                let at = pos + (ry * width + x) * 4;
                let v = f32::from_le_bytes(raw[at..at + 4].try_into().expect("checked above"));
                if v > 0.0 {
                    out.set(x, y, v as f64);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_png_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageF::new(5, 3).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                img.set(x, y, [x as f64 / 4.0, y as f64 / 2.0, 0.3]);
            }
        }
        img.quantize_u8();
        let path = dir.path().join("t.png");
        img.save_png(&path).unwrap();
        let back = ImageF::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pfm_roundtrips_values_and_validity() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = DepthMap::new(4, 2).unwrap();
        d.set(0, 0, 1.5);
        d.set(3, 1, 0.25);
        d.set(2, 0, 7.0);
        let path = dir.path().join("d.pfm");
        d.save_pfm(&path).unwrap();
        let back = DepthMap::load_pfm(&path).unwrap();
        assert_eq!(back.get(0, 0), Some(1.5));
        assert_eq!(back.get(3, 1), Some(0.25));
        assert_eq!(back.get(2, 0), Some(7.0));
        assert_eq!(back.get(1, 1), None);
        assert_eq!(back.valid_count(), 3);
        assert_eq!(d, back);
    }

    #[test]
    fn pfm_rejects_color_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("c.pfm");
        std::fs::write(&p1, b"PF\n2 2\n-1.0\n").unwrap();
        assert!(matches!(DepthMap::load_pfm(&p1), Err(ImageError::PfmFormat(_))));

        let p2 = dir.path().join("short.pfm");
        std::fs::write(&p2, b"Pf\n4 4\n-1.0\nxx").unwrap();
        assert!(matches!(DepthMap::load_pfm(&p2), Err(ImageError::PfmFormat(_))));
    }

    #[test]
    fn mse_requires_matching_dimensions() {
        let a = ImageF::new(2, 2).unwrap();
        let b = ImageF::new(3, 2).unwrap();
        assert!(matches!(a.mse(&b), Err(ImageError::DimensionMismatch { .. })));
        assert_eq!(a.mse(&a).unwrap(), 0.0);
    }

    #[test]
    fn zero_sized_images_are_rejected() {
        assert!(ImageF::new(0, 5).is_err());
        assert!(DepthMap::new(5, 0).is_err());
    }
}
