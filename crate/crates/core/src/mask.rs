//! Per-pixel logit maps and the binary masks thresholded from them.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-pixel mask confidence: positive means "inside the mask".
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    data: Array2<f64>,
}

impl LogitMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite logit value {v}")));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn shape_hw(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// A thresholded mask; produced from logits by [`binarize`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<bool>,
}

impl Default for BinaryMask {
    /// Empty 0x0 placeholder, e.g. for fields populated after load.
    fn default() -> Self {
        BinaryMask::new(Array2::from_elem((0, 0), false))
    }
}

impl BinaryMask {
    pub fn new(data: Array2<bool>) -> Self {
        Self { data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Array2::from_elem((h, w), false),
        }
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn shape_hw(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Number of mask pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&b| !b)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[[row, col]]
    }

    /// Coordinates of all mask pixels in row-major order.
    pub fn true_pixels(&self) -> Vec<(usize, usize)> {
        let (h, w) = self.data.dim();
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if self.data[[r, c]] {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        check_same_shape(self, other)?;
        let mut data = self.data.clone();
        data.zip_mut_with(&other.data, |a, &b| *a = *a || b);
        Ok(BinaryMask::new(data))
    }

    /// Shrinks the mask: keeps pixels whose full `radius`-neighborhood
    /// (Chebyshev) is inside the mask and the frame.
    pub fn erode(&self, radius: usize) -> BinaryMask {
        let (h, w) = self.data.dim();
        let r = radius as isize;
        let mut out = Array2::from_elem((h, w), false);
        for row in 0..h as isize {
            'pixel: for col in 0..w as isize {
                if !self.data[[row as usize, col as usize]] {
                    continue;
                }
                for dr in -r..=r {
                    for dc in -r..=r {
                        let (nr, nc) = (row + dr, col + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue 'pixel;
                        }
                        if !self.data[[nr as usize, nc as usize]] {
                            continue 'pixel;
                        }
                    }
                }
                out[[row as usize, col as usize]] = true;
            }
        }
        BinaryMask::new(out)
    }

    /// Encodes as a single-channel PNG with 0/255 values.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let (h, w) = self.data.dim();
        let raw: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let mut out = Vec::new();
        image::write_buffer_with_format(
            &mut std::io::Cursor::new(&mut out),
            &raw,
            w as u32,
            h as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        let img = match decoded {
            image::DynamicImage::ImageLuma8(img) => img,
            other => {
                return Err(Error::validation(format!(
                    "mask PNG must be 8-bit grayscale, got {:?}",
                    other.color()
                )))
            }
        };
        let (w, h) = img.dimensions();
        let raw = img.into_raw();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
            raw[r * w as usize + c] >= 128
        });
        Ok(BinaryMask::new(data))
    }

    pub fn from_png_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }
}

/// Thresholds logits at zero: a pixel is masked iff its logit is strictly
/// positive. Ties at exactly zero are background.
pub fn binarize(logits: &LogitMap) -> BinaryMask {
    BinaryMask::new(logits.data().mapv(|v| v > 0.0))
}

pub(crate) fn check_same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape_hw() != b.shape_hw() {
        return Err(Error::shape(
            format!("{:?}", a.shape_hw()),
            format!("{:?}", b.shape_hw()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_logits_give_all_false() {
        let logits = LogitMap::new(Array2::zeros((4, 4))).unwrap();
        assert!(binarize(&logits).is_empty());
    }

    #[test]
    fn sign_pattern_is_forced_by_definition() {
        let logits = LogitMap::new(array![[-10.0, 0.1], [3.0, -0.1]]).unwrap();
        let mask = binarize(&logits);
        assert_eq!(mask.data(), &array![[false, true], [true, false]]);
    }

    #[test]
    fn binarize_matches_per_pixel_loop() {
        // Brute-force oracle: independent comparison pixel by pixel.
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let data = Array2::from_shape_fn((16, 16), |_| {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 20.0
        });
        let logits = LogitMap::new(data.clone()).unwrap();
        let mask = binarize(&logits);
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(mask.get(r, c), data[[r, c]] > 0.0);
            }
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        let data = array![[f64::INFINITY, 0.0]];
        assert!(LogitMap::new(data).is_err());
    }

    #[test]
    fn binarize_is_idempotent_via_sign_encoding() {
        let logits = LogitMap::new(array![[-1.0, 2.0], [0.0, -3.0]]).unwrap();
        let mask = binarize(&logits);
        let encoded = LogitMap::new(mask.data().mapv(|b| if b { 1.0 } else { -1.0 })).unwrap();
        assert_eq!(binarize(&encoded), mask);
    }

    #[test]
    fn mask_png_round_trip() {
        let mask = BinaryMask::new(Array2::from_shape_fn((5, 6), |(r, c)| (r + c) % 2 == 0));
        let back = BinaryMask::from_png_bytes(&mask.to_png_bytes().unwrap()).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn erode_keeps_interior_only() {
        let mask = BinaryMask::new(Array2::from_shape_fn((7, 7), |(r, c)| {
            (1..=5).contains(&r) && (1..=5).contains(&c)
        }));
        let eroded = mask.erode(1);
        assert_eq!(eroded.area(), 9);
        assert!(eroded.get(3, 3));
        assert!(!eroded.get(1, 1));
    }
}
