//! Images as channels-first float arrays in `[0, 1]`.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// An image the attacks perturb: `(C, H, W)` floats in `[0, 1]`, `C ∈ {1, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    id: String,
    data: Array3<f64>,
}

impl Image {
    /// Validates range, finiteness and channel count.
    pub fn new(id: impl Into<String>, data: Array3<f64>) -> Result<Self> {
        let id = id.into();
        let (c, h, w) = data.dim();
        if !(c == 1 || c == 3) {
            return Err(Error::validation(format!("channel count must be 1 or 3, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::validation(format!("image must be non-empty, got {h}x{w}")));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "pixel value {v} outside [0, 1] in image {id}"
                )));
            }
        }
        Ok(Self { id, data })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape_hw(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Largest absolute pixel difference to `other`.
    pub fn linf_distance(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Decodes an 8-bit grayscale or RGB PNG and normalizes to `[0, 1]`.
    pub fn from_png_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        let (c, h, w, raw): (usize, usize, usize, Vec<u8>) = match decoded {
            image::DynamicImage::ImageLuma8(img) => {
                let (w, h) = img.dimensions();
                (1, h as usize, w as usize, img.into_raw())
            }
            image::DynamicImage::ImageRgb8(img) => {
                let (w, h) = img.dimensions();
                (3, h as usize, w as usize, img.into_raw())
            }
            other => {
                return Err(Error::validation(format!(
                    "unsupported PNG color type {:?}; expected 8-bit grayscale or RGB",
                    other.color()
                )))
            }
        };
        // Raw layout is HWC; store channels-first.
        let mut data = Array3::zeros((c, h, w));
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    data[[ch, r, col]] = raw[(r * w + col) * c + ch] as f64 / 255.0;
                }
            }
        }
        Image::new(id, data)
    }

    pub fn from_png_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".to_string());
        Self::from_png_bytes(id, &bytes)
    }

    /// Encodes as an 8-bit PNG, rounding each value to the nearest level.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let (c, h, w) = self.data.dim();
        let mut raw = Vec::with_capacity(c * h * w);
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    raw.push((self.data[[ch, r, col]] * 255.0).round() as u8);
                }
            }
        }
        let mut out = Vec::new();
        let color = if c == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::write_buffer_with_format(
            &mut std::io::Cursor::new(&mut out),
            &raw,
            w as u32,
            h as u32,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    /// Same pixels under a different identifier.
    pub fn with_id(&self, id: impl Into<String>) -> Image {
        Image {
            id: id.into(),
            data: self.data.clone(),
        }
    }

    /// Bypasses range validation; caller guarantees the invariants.
    pub(crate) fn from_parts_unchecked(id: String, data: Array3<f64>) -> Image {
        Image { id, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rejects_out_of_range_pixels() {
        let mut data = Array3::zeros((3, 4, 4));
        data[[0, 0, 0]] = 1.5;
        assert!(matches!(Image::new("x", data), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_non_finite_pixels() {
        let mut data = Array3::zeros((1, 2, 2));
        data[[0, 1, 1]] = f64::NAN;
        assert!(Image::new("x", data).is_err());
    }

    #[test]
    fn rejects_bad_channel_count() {
        let data = Array3::zeros((2, 4, 4));
        assert!(Image::new("x", data).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_grid() {
        let mut data = Array3::zeros((3, 5, 7));
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let img = Image::new("grid", data).unwrap();
        let bytes = img.to_png_bytes().unwrap();
        let back = Image::from_png_bytes("grid", &bytes).unwrap();
        assert_eq!(img.data(), back.data());
    }

    #[test]
    fn grayscale_png_round_trip() {
        let mut data = Array3::zeros((1, 3, 3));
        data[[0, 1, 2]] = 128.0 / 255.0;
        let img = Image::new("g", data).unwrap();
        let back = Image::from_png_bytes("g", &img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(img.data(), back.data());
    }
}
