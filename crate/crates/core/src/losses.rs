//! Attack objectives over predicted logit maps.
//!
//! All losses reduce by MEAN over pixels, so magnitudes and step-size
//! behavior do not depend on image resolution. Every objective is a
//! minimization target: zero means the attack goal is met on every pixel.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{BinaryMask, LogitMap};
use crate::model::Segmenter;
use crate::prompt::PromptSet;

/// Default negative logit threshold the removal losses drive pixels toward.
/// Background logits of the bundled toy model are calibrated near this value.
pub const DEFAULT_NEG_TH: f64 = -10.0;
/// Default positive threshold for mask creation, mirroring [`DEFAULT_NEG_TH`].
pub const DEFAULT_POS_TH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Plain squared error toward `neg_th` on every pixel.
    MseRemoval,
    /// Squared error toward `neg_th`, clipped so pixels already below
    /// the threshold contribute zero loss and zero gradient.
    ClipmseRemoval,
    /// Clipped squared error toward `pos_th`: grow the mask everywhere.
    ClipmseEnlarge,
    /// Two-sided clipped squared error toward a target mask: `pos_th`
    /// inside the target, `neg_th` outside.
    RegionTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum of per-prompt losses (default).
    #[default]
    Sum,
    /// Mean of per-prompt losses.
    Mean,
}

/// Full description of an attack objective.
///
/// `target_mask` is required for [`LossKind::RegionTarget`] and is injected
/// by the task builders at run time; it is never part of a serialized
/// run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub neg_th: f64,
    pub pos_th: f64,
    #[serde(skip)]
    pub target_mask: Option<BinaryMask>,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            neg_th: DEFAULT_NEG_TH,
            pos_th: DEFAULT_POS_TH,
            target_mask: None,
            aggregation: Aggregation::Sum,
        }
    }

    pub fn with_target(mut self, target: BinaryMask) -> Self {
        self.target_mask = Some(target);
        self
    }

    /// Threshold sanity; accepts a missing target so configs can be
    /// validated before the task builder attaches one.
    pub fn validate(&self) -> Result<()> {
        if !self.neg_th.is_finite() || !self.pos_th.is_finite() {
            return Err(Error::validation("loss thresholds must be finite"));
        }
        if !(self.neg_th < 0.0 && 0.0 < self.pos_th) {
            return Err(Error::validation(format!(
                "thresholds must satisfy neg_th < 0 < pos_th, got {} and {}",
                self.neg_th, self.pos_th
            )));
        }
        Ok(())
    }

    /// Full use-time validation against the logit map shape.
    pub fn validate_for_shape(&self, hw: (usize, usize)) -> Result<()> {
        self.validate()?;
        if self.kind == LossKind::RegionTarget {
            match &self.target_mask {
                None => return Err(Error::validation("region_target loss requires a target mask")),
                Some(m) if m.shape_hw() != hw => {
                    return Err(Error::shape(format!("{hw:?}"), format!("{:?}", m.shape_hw())))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Mean over pixels of `(y - neg_th)^2`.
pub fn mse_removal(logits: &LogitMap, neg_th: f64) -> f64 {
    let n = logits.data().len() as f64;
    logits.data().iter().map(|&y| (y - neg_th).powi(2)).sum::<f64>() / n
}

/// Mean over pixels of `(clip(y, min=neg_th) - neg_th)^2`; pixels already at
/// or below the threshold contribute nothing.
pub fn clipmse_removal(logits: &LogitMap, neg_th: f64) -> f64 {
    let n = logits.data().len() as f64;
    logits
        .data()
        .iter()
        .map(|&y| (y.max(neg_th) - neg_th).powi(2))
        .sum::<f64>()
        / n
}

/// Mean over pixels of `(clip(y, max=pos_th) - pos_th)^2`; pixels already at
/// or above the threshold contribute nothing.
pub fn clipmse_enlarge(logits: &LogitMap, pos_th: f64) -> f64 {
    let n = logits.data().len() as f64;
    logits
        .data()
        .iter()
        .map(|&y| (y.min(pos_th) - pos_th).powi(2))
        .sum::<f64>()
        / n
}

/// Two-sided clipped loss: target-true pixels are pushed up to `pos_th`,
/// target-false pixels down to `neg_th`, averaged over all pixels.
pub fn region_target(
    logits: &LogitMap,
    target: &BinaryMask,
    pos_th: f64,
    neg_th: f64,
) -> Result<f64> {
    if logits.shape_hw() != target.shape_hw() {
        return Err(Error::shape(
            format!("{:?}", logits.shape_hw()),
            format!("{:?}", target.shape_hw()),
        ));
    }
    let n = logits.data().len() as f64;
    let mut acc = 0.0;
    for (&y, &t) in logits.data().iter().zip(target.data().iter()) {
        acc += if t {
            (y.min(pos_th) - pos_th).powi(2)
        } else {
            (y.max(neg_th) - neg_th).powi(2)
        };
    }
    Ok(acc / n)
}

/// Loss value for `spec` on one logit map.
pub fn loss_value(spec: &LossSpec, logits: &LogitMap) -> Result<f64> {
    spec.validate_for_shape(logits.shape_hw())?;
    Ok(match spec.kind {
        LossKind::MseRemoval => mse_removal(logits, spec.neg_th),
        LossKind::ClipmseRemoval => clipmse_removal(logits, spec.neg_th),
        LossKind::ClipmseEnlarge => clipmse_enlarge(logits, spec.pos_th),
        LossKind::RegionTarget => region_target(
            logits,
            spec.target_mask.as_ref().expect("validated above"),
            spec.pos_th,
            spec.neg_th,
        )?,
    })
}

/// Loss value together with the analytic gradient w.r.t. each logit.
/// Clip-saturated pixels get an exactly-zero gradient.
pub fn loss_value_grad(spec: &LossSpec, logits: &LogitMap) -> Result<(f64, Array2<f64>)> {
    spec.validate_for_shape(logits.shape_hw())?;
    let n = logits.data().len() as f64;
    let mut grad = Array2::zeros(logits.shape_hw());
    let mut acc = 0.0;
    match spec.kind {
        LossKind::MseRemoval => {
            for (g, &y) in grad.iter_mut().zip(logits.data().iter()) {
                let d = y - spec.neg_th;
                acc += d * d;
                *g = 2.0 * d / n;
            }
        }
        LossKind::ClipmseRemoval => {
            for (g, &y) in grad.iter_mut().zip(logits.data().iter()) {
                if y > spec.neg_th {
                    let d = y - spec.neg_th;
                    acc += d * d;
                    *g = 2.0 * d / n;
                }
            }
        }
        LossKind::ClipmseEnlarge => {
            for (g, &y) in grad.iter_mut().zip(logits.data().iter()) {
                if y < spec.pos_th {
                    let d = y - spec.pos_th;
                    acc += d * d;
                    *g = 2.0 * d / n;
                }
            }
        }
        LossKind::RegionTarget => {
            let target = spec.target_mask.as_ref().expect("validated above");
            for ((g, &y), &t) in grad
                .iter_mut()
                .zip(logits.data().iter())
                .zip(target.data().iter())
            {
                if t {
                    if y < spec.pos_th {
                        let d = y - spec.pos_th;
                        acc += d * d;
                        *g = 2.0 * d / n;
                    }
                } else if y > spec.neg_th {
                    let d = y - spec.neg_th;
                    acc += d * d;
                    *g = 2.0 * d / n;
                }
            }
        }
    }
    Ok((acc / n, grad))
}

/// Aggregates the per-prompt loss over a prompt set (sum by default,
/// mean when the spec says so).
pub fn aggregate_over_prompts(
    model: &dyn Segmenter,
    prompt_set: &PromptSet,
    image: &Image,
    spec: &LossSpec,
) -> Result<f64> {
    let mut total = 0.0;
    for &p in prompt_set.prompts() {
        let logits = model.forward(image, p)?;
        total += loss_value(spec, &logits)?;
    }
    Ok(match spec.aggregation {
        Aggregation::Sum => total,
        Aggregation::Mean => total / prompt_set.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn lm(data: ndarray::Array2<f64>) -> LogitMap {
        LogitMap::new(data).unwrap()
    }

    #[test]
    fn mse_exact_match_is_zero() {
        let logits = lm(Array2::from_elem((3, 3), -10.0));
        assert_eq!(mse_removal(&logits, -10.0), 0.0);
    }

    #[test]
    fn mse_hand_computed_oracle() {
        // [[0, -20]] with neg_th = -10: mean(100, 100) = 100.
        let logits = lm(array![[0.0, -20.0]]);
        assert!((mse_removal(&logits, -10.0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn clipmse_hand_computed_oracle() {
        // [[0, -20], [5, -10]]: clipped [[0, -10], [5, -10]] -> mean(100, 0, 225, 0).
        let logits = lm(array![[0.0, -20.0], [5.0, -10.0]]);
        assert!((clipmse_removal(&logits, -10.0) - 81.25).abs() < 1e-12);
    }

    #[test]
    fn clipmse_saturated_is_zero_with_zero_grad() {
        let logits = lm(Array2::from_elem((4, 4), -30.0));
        assert_eq!(clipmse_removal(&logits, -10.0), 0.0);
        let spec = LossSpec::new(LossKind::ClipmseRemoval);
        let (v, g) = loss_value_grad(&spec, &logits).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clipping_halves_the_example_loss() {
        let logits = lm(array![[0.0, -20.0]]);
        assert!((clipmse_removal(&logits, -10.0) - 50.0).abs() < 1e-12);
        assert!((mse_removal(&logits, -10.0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn enlarge_hand_computed_oracle() {
        let logits = lm(Array2::from_elem((2, 2), 10.0));
        assert_eq!(clipmse_enlarge(&logits, 10.0), 0.0);
        let logits = lm(array![[0.0, 20.0]]);
        assert!((clipmse_enlarge(&logits, 10.0) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn enlarge_grad_zero_above_threshold() {
        let logits = lm(array![[20.0, 0.0]]);
        let spec = LossSpec::new(LossKind::ClipmseEnlarge);
        let (_, g) = loss_value_grad(&spec, &logits).unwrap();
        assert_eq!(g[[0, 0]], 0.0);
        assert!(g[[0, 1]] != 0.0);
    }

    #[test]
    fn region_target_satisfied_is_zero() {
        let logits = lm(array![[10.0, -10.0]]);
        let target = BinaryMask::new(array![[true, false]]);
        assert_eq!(region_target(&logits, &target, 10.0, -10.0).unwrap(), 0.0);
    }

    #[test]
    fn region_target_hand_computed_oracle() {
        let logits = lm(array![[0.0, 0.0]]);
        let target = BinaryMask::new(array![[true, false]]);
        let v = region_target(&logits, &target, 10.0, -10.0).unwrap();
        assert!((v - 100.0).abs() < 1e-12);
    }

    #[test]
    fn all_false_target_reduces_to_clipmse_removal() {
        let logits = lm(array![[3.0, -12.0], [-1.0, 0.5]]);
        let target = BinaryMask::zeros(2, 2);
        let a = region_target(&logits, &target, 10.0, -10.0).unwrap();
        let b = clipmse_removal(&logits, -10.0);
        assert_eq!(a, b);
    }

    #[test]
    fn thresholds_validated() {
        let mut spec = LossSpec::new(LossKind::MseRemoval);
        spec.neg_th = 1.0;
        assert!(spec.validate().is_err());
        let mut spec = LossSpec::new(LossKind::RegionTarget);
        spec.target_mask = None;
        assert!(spec.validate_for_shape((2, 2)).is_err());
    }

    #[test]
    fn losses_are_non_negative() {
        let logits = lm(array![[-100.0, 100.0], [0.0, -10.0]]);
        assert!(mse_removal(&logits, -10.0) >= 0.0);
        assert!(clipmse_removal(&logits, -10.0) >= 0.0);
        assert!(clipmse_enlarge(&logits, 10.0) >= 0.0);
    }
}
