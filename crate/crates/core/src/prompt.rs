//! Point prompts conditioning the mask prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::BinaryMask;

/// A pixel coordinate the segmenter is prompted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub row: usize,
    pub col: usize,
}

impl PointPrompt {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn in_bounds(&self, h: usize, w: usize) -> bool {
        self.row < h && self.col < w
    }
}

/// An ordered, duplicate-free set of prompts, with the sampling seed kept
/// for reproducibility when the set was drawn randomly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    prompts: Vec<PointPrompt>,
    seed: Option<u64>,
}

impl PromptSet {
    pub fn new(prompts: Vec<PointPrompt>, seed: Option<u64>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::validation("prompt set must be non-empty"));
        }
        for (i, a) in prompts.iter().enumerate() {
            for b in prompts.iter().skip(i + 1) {
                if a == b {
                    return Err(Error::validation(format!(
                        "duplicate prompt ({}, {})",
                        a.row, a.col
                    )));
                }
            }
        }
        Ok(Self { prompts, seed })
    }

    pub fn singleton(prompt: PointPrompt) -> Self {
        Self {
            prompts: vec![prompt],
            seed: None,
        }
    }

    pub fn prompts(&self) -> &[PointPrompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn contains(&self, p: &PointPrompt) -> bool {
        self.prompts.contains(p)
    }

    /// Errors unless every prompt lies inside an `h`x`w` frame.
    pub fn check_in_bounds(&self, h: usize, w: usize) -> Result<()> {
        for p in &self.prompts {
            if !p.in_bounds(h, w) {
                return Err(Error::validation(format!(
                    "prompt ({}, {}) out of bounds for {h}x{w}",
                    p.row, p.col
                )));
            }
        }
        Ok(())
    }
}

/// Draws `count` distinct prompts uniformly over `region` (or the whole
/// image when absent). Fixed `(image, count, seed)` always yields the same
/// set.
pub fn sample_prompts(
    image: &Image,
    count: usize,
    seed: u64,
    region: Option<&BinaryMask>,
) -> Result<PromptSet> {
    sample_prompts_excluding(image, count, seed, region, &[])
}

/// Like [`sample_prompts`] but never returns a prompt in `exclude`; used to
/// keep evaluation prompts disjoint from attack-source prompts.
pub fn sample_prompts_excluding(
    image: &Image,
    count: usize,
    seed: u64,
    region: Option<&BinaryMask>,
    exclude: &[PointPrompt],
) -> Result<PromptSet> {
    if count == 0 {
        return Err(Error::validation("prompt count must be >= 1"));
    }
    let (h, w) = image.shape_hw();
    let mut candidates: Vec<PointPrompt> = match region {
        Some(mask) => {
            if mask.shape_hw() != (h, w) {
                return Err(Error::shape(
                    format!("{:?}", (h, w)),
                    format!("{:?}", mask.shape_hw()),
                ));
            }
            mask.true_pixels()
                .into_iter()
                .map(|(r, c)| PointPrompt::new(r, c))
                .collect()
        }
        None => {
            let mut v = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    v.push(PointPrompt::new(r, c));
                }
            }
            v
        }
    };
    if !exclude.is_empty() {
        candidates.retain(|p| !exclude.contains(p));
    }
    if candidates.len() < count {
        return Err(Error::validation(format!(
            "sampling region too small: {count} prompts requested, {} pixels available",
            candidates.len()
        )));
    }
    // Partial Fisher-Yates: exactly uniform over count-subsets, order included.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    candidates.truncate(count);
    PromptSet::new(candidates, Some(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn gray_image(h: usize, w: usize) -> Image {
        Image::new("t", Array3::from_elem((1, h, w), 0.5)).unwrap()
    }

    #[test]
    fn single_candidate_region_returns_that_pixel() {
        let img = gray_image(8, 8);
        let mut m = Array2::from_elem((8, 8), false);
        m[[3, 5]] = true;
        let set = sample_prompts(&img, 1, 42, Some(&BinaryMask::new(m))).unwrap();
        assert_eq!(set.prompts(), &[PointPrompt::new(3, 5)]);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let img = gray_image(16, 16);
        let a = sample_prompts(&img, 10, 7, None).unwrap();
        let b = sample_prompts(&img, 10, 7, None).unwrap();
        assert_eq!(a, b);
        let c = sample_prompts(&img, 10, 8, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn prompts_are_distinct_and_in_bounds() {
        let img = gray_image(12, 9);
        let set = sample_prompts(&img, 50, 3, None).unwrap();
        set.check_in_bounds(12, 9).unwrap();
        let mut seen = std::collections::HashSet::new();
        for p in set.prompts() {
            assert!(seen.insert(*p));
        }
    }

    #[test]
    fn region_too_small_names_counts() {
        let img = gray_image(8, 8);
        let mut m = Array2::from_elem((8, 8), false);
        m[[0, 0]] = true;
        m[[1, 1]] = true;
        let err = sample_prompts(&img, 3, 0, Some(&BinaryMask::new(m))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "got: {msg}");
    }

    #[test]
    fn exclusion_is_respected() {
        let img = gray_image(4, 4);
        let exclude: Vec<PointPrompt> = (0..4)
            .flat_map(|r| (0..4).map(move |c| PointPrompt::new(r, c)))
            .filter(|p| !(p.row == 2 && p.col == 2))
            .collect();
        let set = sample_prompts_excluding(&img, 1, 9, None, &exclude).unwrap();
        assert_eq!(set.prompts(), &[PointPrompt::new(2, 2)]);
    }

    #[test]
    fn duplicate_prompts_rejected_at_construction() {
        let p = PointPrompt::new(1, 1);
        assert!(PromptSet::new(vec![p, p], None).is_err());
        assert!(PromptSet::new(vec![], None).is_err());
    }
}
