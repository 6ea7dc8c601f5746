//! Mask-overlap metrics and attack-success classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{check_same_shape, BinaryMask};
use crate::prompt::PointPrompt;
use crate::tasks::TaskKind;

/// Intersection over union of two masks. Both-empty pairs score 1.0
/// (identical masks), which keeps `iou(a, a) = 1` universally.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Per-pair evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub prompt: PointPrompt,
    /// IoU between the clean-image mask and the adversarial-image mask.
    pub iou_clean_adv: f64,
    /// IoU between the adversarial mask and the attack target, for
    /// targeted task kinds.
    pub iou_target_adv: Option<f64>,
    pub area_clean: usize,
    pub area_adv: usize,
    /// Realized perturbation size; lets aggregates be recomputed from rows.
    pub perturbation_linf: f64,
    pub success: bool,
}

impl EvalRecord {
    /// A pair whose clean mask is empty carries no removal signal; such
    /// rows are excluded from aggregation.
    pub fn is_vacuous(&self) -> bool {
        self.area_clean == 0
    }

    pub fn validate(&self) -> Result<()> {
        for v in [Some(self.iou_clean_adv), self.iou_target_adv].into_iter().flatten() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("IoU {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Mean IoU(clean, adv) over the records (all of them; callers filter
/// vacuous rows before aggregation).
pub fn miou(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::validation("mIoU of an empty record list"));
    }
    Ok(records.iter().map(|r| r.iou_clean_adv).sum::<f64>() / records.len() as f64)
}

/// Success thresholds; toolkit conventions, not model-reported values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessThresholds {
    /// Removal succeeds below this IoU(clean, adv) ...
    pub removal_iou: f64,
    /// ... or below this fraction of the clean area.
    pub removal_area_fraction: f64,
    /// Targeted kinds succeed at or above this IoU(target, adv).
    pub targeted_iou: f64,
    /// Enlargement succeeds at or above this area growth factor.
    pub enlarge_factor: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self {
            removal_iou: 0.1,
            removal_area_fraction: 0.1,
            targeted_iou: 0.5,
            enlarge_factor: 2.0,
        }
    }
}

/// Task-dependent success rule.
pub fn success(record: &EvalRecord, task: TaskKind, th: &SuccessThresholds) -> Result<bool> {
    record.validate()?;
    Ok(match task {
        TaskKind::Removal | TaskKind::CrossPrompt | TaskKind::CrossTask => {
            record.iou_clean_adv < th.removal_iou
                || (record.area_adv as f64) < th.removal_area_fraction * record.area_clean as f64
        }
        TaskKind::Enlarge => {
            record.area_adv as f64 >= th.enlarge_factor * record.area_clean as f64
        }
        TaskKind::ShiftDuplicate
        | TaskKind::ShiftTranslate
        | TaskKind::FlipDuplicate
        | TaskKind::FlipReplace
        | TaskKind::TargetShape
        | TaskKind::TargetOtherPrompt
        | TaskKind::TargetOtherImage => {
            let t = record.iou_target_adv.ok_or_else(|| {
                Error::validation(format!("task {task:?} needs iou_target_adv"))
            })?;
            t >= th.targeted_iou
        }
    })
}
