//! Perturbation budgets and attack run records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Default perturbation bound, 8/255 on the `[0, 1]` pixel scale.
pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;
/// Default single-step (FGSM) step size.
pub const DEFAULT_FGSM_STEP: f64 = 8.0 / 255.0;
/// Default iterative step size.
pub const DEFAULT_PGD_STEP: f64 = 2.0 / 255.0;
/// Default iteration count for the iterative attack.
pub const DEFAULT_PGD_ITERS: usize = 10;

/// L∞ perturbation budget. `epsilon = 0` is allowed as the degenerate
/// no-perturbation budget (step size must then be 0 too).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    /// Fixed tag; only the L∞ ball is supported.
    #[serde(default = "linf")]
    pub norm: String,
}

fn linf() -> String {
    "Linf".to_string()
}

impl AttackBudget {
    pub fn new(epsilon: f64, step_size: f64, iterations: usize) -> Result<Self> {
        let b = Self {
            epsilon,
            step_size,
            iterations,
            norm: linf(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::validation(format!(
                "epsilon must be in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !self.step_size.is_finite() || self.step_size < 0.0 || self.step_size > self.epsilon {
            return Err(Error::validation(format!(
                "step size must satisfy 0 <= step <= epsilon, got step={} epsilon={}",
                self.step_size, self.epsilon
            )));
        }
        if self.epsilon > 0.0 && self.step_size == 0.0 {
            return Err(Error::validation("step size must be > 0 for a non-zero budget"));
        }
        if self.iterations == 0 {
            return Err(Error::validation("iterations must be >= 1"));
        }
        if self.norm != "Linf" {
            return Err(Error::validation(format!("unsupported norm {:?}", self.norm)));
        }
        Ok(())
    }
}

impl Default for AttackBudget {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            step_size: DEFAULT_PGD_STEP,
            iterations: DEFAULT_PGD_ITERS,
            norm: linf(),
        }
    }
}

/// Outcome of one attack run on one image.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial_image: Image,
    /// `max |adv - clean|` actually realized.
    pub perturbation_linf: f64,
    /// Objective value after each iteration (length = iterations).
    pub loss_trace: Vec<f64>,
    pub metrics: BTreeMap<String, f64>,
    pub config_digest: String,
}

impl AttackResult {
    /// Checks the budget invariants every result must satisfy.
    pub fn check_against(&self, clean: &Image, budget: &AttackBudget) -> Result<()> {
        let linf = self.adversarial_image.linf_distance(clean);
        if linf > budget.epsilon + 1e-8 {
            return Err(Error::validation(format!(
                "perturbation {linf} exceeds epsilon {}",
                budget.epsilon
            )));
        }
        if self.loss_trace.len() != budget.iterations {
            return Err(Error::validation(format!(
                "loss trace length {} != iterations {}",
                self.loss_trace.len(),
                budget.iterations
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_budget_matches_documented_values() {
        let b = AttackBudget::default();
        assert_eq!(b.epsilon, 8.0 / 255.0);
        assert_eq!(b.step_size, 2.0 / 255.0);
        assert_eq!(b.iterations, 10);
        b.validate().unwrap();
    }

    #[test]
    fn zero_epsilon_budget_is_degenerate_but_legal() {
        AttackBudget::new(0.0, 0.0, 1).unwrap();
        assert!(AttackBudget::new(0.0, 0.01, 1).is_err());
    }

    #[test]
    fn invalid_budgets_rejected() {
        assert!(AttackBudget::new(1.5, 0.1, 1).is_err());
        assert!(AttackBudget::new(0.1, 0.2, 1).is_err());
        assert!(AttackBudget::new(0.1, 0.0, 1).is_err());
        assert!(AttackBudget::new(0.1, 0.05, 0).is_err());
    }
}
