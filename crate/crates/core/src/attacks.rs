//! FGSM and PGD attackers with L∞ projection and pixel-range clamping.
//!
//! The attack objectives here are MINIMIZED (driving logits toward a
//! threshold), so steps go along the negative gradient sign — the opposite
//! of classic loss-maximizing FGSM. The surrogate classifier attack
//! maximizes cross-entropy and is expressed as minimizing its negation, so
//! every loss trace in the toolkit is a descent trace.
//!
//! Per iteration: gradient step, then L∞ projection onto the ε-ball, then
//! pixel clamp to [0, 1]; both constraints hold at every iterate.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::{AttackBudget, AttackResult};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::LossSpec;
use crate::model::classifier::{argmax, cross_entropy_grad};
use crate::model::{loss_gradient, Classifier, Segmenter};
use crate::prompt::PromptSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attacker {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub budget: AttackBudget,
    pub loss: LossSpec,
    pub attacker: Attacker,
    /// Uniform random initialization inside the ε-ball (off by default;
    /// the basic iterative attack starts at the clean image).
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        self.loss.validate()?;
        if self.attacker == Attacker::Fgsm
            && (self.budget.iterations != 1 || self.budget.step_size != self.budget.epsilon)
        {
            return Err(Error::validation(
                "fgsm requires iterations = 1 and step_size = epsilon",
            ));
        }
        Ok(())
    }

    /// Digest over the canonical JSON encoding (target masks are attached
    /// at run time and are not part of the digest).
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

/// `sign(0) = 0`: a zero-gradient component takes no step.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Iterative descent state; one [`step`](AttackLoop::step) per iteration.
/// Used internally by [`fgsm`]/[`pgd`] and directly by interactive
/// consumers that want to watch the attack converge.
pub struct AttackLoop<'a> {
    grad_fn: Box<dyn FnMut(&Image) -> Result<(f64, Array3<f64>)> + 'a>,
    clean: Image,
    budget: AttackBudget,
    delta: Array3<f64>,
    current: Image,
    trace: Vec<f64>,
    steps_done: usize,
}

impl<'a> AttackLoop<'a> {
    pub fn new(
        clean: &Image,
        budget: AttackBudget,
        random_start: bool,
        seed: u64,
        grad_fn: Box<dyn FnMut(&Image) -> Result<(f64, Array3<f64>)> + 'a>,
    ) -> Result<Self> {
        budget.validate()?;
        let dim = clean.data().dim();
        let mut delta = Array3::zeros(dim);
        if random_start && budget.epsilon > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            delta.mapv_inplace(|_| rng.gen_range(-budget.epsilon..=budget.epsilon));
        }
        let current = apply_delta(clean, &mut delta, budget.epsilon);
        Ok(Self {
            grad_fn,
            clean: clean.clone(),
            budget,
            delta,
            current,
            trace: Vec::new(),
            steps_done: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn current(&self) -> &Image {
        &self.current
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    /// One gradient step + projection + clamp. Returns the objective value
    /// at the iterate the gradient was taken at.
    pub fn step(&mut self) -> Result<f64> {
        let (value, grad) = (self.grad_fn)(&self.current)?;
        // The gradient evaluation at the current iterate retroactively
        // finalizes the previous iteration's trace entry.
        if self.steps_done > 0 {
            self.trace.push(value);
        }
        let alpha = self.budget.step_size;
        self.delta.zip_mut_with(&grad, |d, &g| *d -= alpha * sign(g));
        self.current = apply_delta(&self.clean, &mut self.delta, self.budget.epsilon);
        self.steps_done += 1;
        Ok(value)
    }

    /// Runs the remaining iterations and assembles the result. The final
    /// trace entry needs one extra value-only evaluation.
    pub fn finish(mut self, config_digest: String) -> Result<AttackResult> {
        while self.steps_done < self.budget.iterations {
            self.step()?;
        }
        let (final_value, _) = (self.grad_fn)(&self.current)?;
        self.trace.push(final_value);
        debug_assert_eq!(self.trace.len(), self.budget.iterations);

        let mut metrics = std::collections::BTreeMap::new();
        metrics.insert("final_loss".to_string(), final_value);
        let result = AttackResult {
            perturbation_linf: self.current.linf_distance(&self.clean),
            adversarial_image: self.current,
            loss_trace: self.trace,
            metrics,
            config_digest,
        };
        result.check_against(&self.clean, &self.budget)?;
        Ok(result)
    }
}

/// Projects delta onto the ε-ball, applies it, clamps pixels to [0, 1],
/// and folds the clamp back into delta so both constraints stay tight.
fn apply_delta(clean: &Image, delta: &mut Array3<f64>, epsilon: f64) -> Image {
    let mut data = clean.data().clone();
    ndarray::Zip::from(&mut data).and(&mut *delta).for_each(|x, d| {
        *d = d.clamp(-epsilon, epsilon);
        let v = (*x + *d).clamp(0.0, 1.0);
        *d = v - *x;
        *x = v;
    });
    Image::from_parts_unchecked(format!("{}#adv", clean.id()), data)
}

fn segmenter_loop<'a>(
    model: &'a dyn Segmenter,
    prompt_set: &'a PromptSet,
    image: &Image,
    config: &AttackConfig,
) -> Result<AttackLoop<'a>> {
    config.validate()?;
    prompt_set.check_in_bounds(image.height(), image.width())?;
    let loss = config.loss.clone();
    let grad_fn = Box::new(move |img: &Image| loss_gradient(model, prompt_set, img, &loss));
    AttackLoop::new(image, budget_of(config), config.random_start, config.seed, grad_fn)
}

fn budget_of(config: &AttackConfig) -> AttackBudget {
    config.budget.clone()
}

/// Single-step sign attack: `adv = clamp(x - ε·sign(∇L))`.
pub fn fgsm(
    model: &dyn Segmenter,
    prompt_set: &PromptSet,
    image: &Image,
    config: &AttackConfig,
) -> Result<AttackResult> {
    if config.attacker != Attacker::Fgsm {
        return Err(Error::validation("fgsm() called with a non-fgsm config"));
    }
    segmenter_loop(model, prompt_set, image, config)?.finish(config.digest())
}

/// Iterative sign attack with per-step projection; N = budget.iterations.
pub fn pgd(
    model: &dyn Segmenter,
    prompt_set: &PromptSet,
    image: &Image,
    config: &AttackConfig,
) -> Result<AttackResult> {
    if config.attacker != Attacker::Pgd {
        return Err(Error::validation("pgd() called with a non-pgd config"));
    }
    segmenter_loop(model, prompt_set, image, config)?.finish(config.digest())
}

/// Cross-task surrogate attack: untargeted PGD that maximizes the
/// classifier's cross-entropy on its clean-predicted label (expressed as
/// descent on the negated cross-entropy). The produced image transfers to
/// segmenter evaluation unchanged.
pub fn surrogate_attack(
    classifier: &dyn Classifier,
    image: &Image,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.budget.validate()?;
    classifier.check_image(image)?;
    let clean_label = argmax(&classifier.forward(image)?);
    let grad_fn = Box::new(move |img: &Image| -> Result<(f64, Array3<f64>)> {
        let fwd = classifier.forward_with_grad(img)?;
        let (ce, ce_grad) = cross_entropy_grad(&fwd.logits, clean_label);
        let upstream: Vec<f64> = ce_grad.iter().map(|g| -g).collect();
        let grad = fwd.backprop(&upstream);
        Ok((-ce, grad))
    });
    AttackLoop::new(image, budget_of(config), config.random_start, config.seed, grad_fn)?
        .finish(config.digest())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossKind, LossSpec};
    use crate::model::{ToyClassifier, ToyModelSpec, ToySegmenter};
    use crate::prompt::PointPrompt;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ToySegmenter {
        ToySegmenter::random_init(&ToyModelSpec {
            widths: [6, 8, 10],
            ..Default::default()
        })
        .unwrap()
    }

    fn test_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(
            "t",
            Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.05..0.95)),
        )
        .unwrap()
    }

    fn pgd_config(eps: f64, step: f64, iters: usize) -> AttackConfig {
        AttackConfig {
            budget: AttackBudget::new(eps, step, iters).unwrap(),
            loss: LossSpec::new(LossKind::ClipmseRemoval),
            attacker: Attacker::Pgd,
            random_start: false,
            seed: 0,
        }
    }

    fn fgsm_config(eps: f64) -> AttackConfig {
        AttackConfig {
            budget: AttackBudget::new(eps, eps, 1).unwrap(),
            loss: LossSpec::new(LossKind::ClipmseRemoval),
            attacker: Attacker::Fgsm,
            random_start: false,
            seed: 0,
        }
    }

    #[test]
    fn pgd_one_step_equals_fgsm_bitwise() {
        let m = model();
        let img = test_image(1);
        let prompts = PromptSet::singleton(PointPrompt::new(8, 8));
        let eps = 8.0 / 255.0;
        let f = fgsm(&m, &prompts, &img, &fgsm_config(eps)).unwrap();
        let mut cfg = pgd_config(eps, eps, 1);
        cfg.attacker = Attacker::Pgd;
        let p = pgd(&m, &prompts, &img, &cfg).unwrap();
        assert_eq!(
            f.adversarial_image.data(),
            p.adversarial_image.data(),
            "PGD-1 with step = epsilon must equal FGSM exactly"
        );
        assert_eq!(f.loss_trace, p.loss_trace);
    }

    #[test]
    fn projection_clips_delta_to_epsilon() {
        // A candidate component of +0.05 with ε = 8/255 projects to 8/255.
        let clean = Image::new("c", Array3::from_elem((1, 8, 8), 0.5)).unwrap();
        let mut delta = Array3::from_elem((1, 8, 8), 0.05);
        let eps = 8.0 / 255.0;
        let adv = apply_delta(&clean, &mut delta, eps);
        let expect = 0.5 + eps;
        for &v in adv.data().iter() {
            assert!((v - expect).abs() < 1e-15);
        }
        for &d in delta.iter() {
            assert!((d - eps).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_epsilon_returns_clean_bitwise() {
        let m = model();
        let img = test_image(2);
        let prompts = PromptSet::singleton(PointPrompt::new(3, 3));
        let mut cfg = pgd_config(0.0, 0.0, 3);
        cfg.budget = AttackBudget::new(0.0, 0.0, 3).unwrap();
        let res = pgd(&m, &prompts, &img, &cfg).unwrap();
        assert_eq!(res.adversarial_image.data(), img.data());
        assert_eq!(res.perturbation_linf, 0.0);
    }

    #[test]
    fn budget_invariants_hold() {
        let m = model();
        let img = test_image(3);
        let prompts = PromptSet::singleton(PointPrompt::new(5, 5));
        let cfg = pgd_config(8.0 / 255.0, 2.0 / 255.0, 5);
        let res = pgd(&m, &prompts, &img, &cfg).unwrap();
        assert!(res.perturbation_linf <= cfg.budget.epsilon + 1e-8);
        assert!(res
            .adversarial_image
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(res.loss_trace.len(), 5);
    }

    #[test]
    fn deterministic_for_fixed_seed_and_config() {
        let m = model();
        let img = test_image(4);
        let prompts = PromptSet::singleton(PointPrompt::new(7, 2));
        let mut cfg = pgd_config(8.0 / 255.0, 2.0 / 255.0, 4);
        cfg.random_start = true;
        cfg.seed = 99;
        let a = pgd(&m, &prompts, &img, &cfg).unwrap();
        let b = pgd(&m, &prompts, &img, &cfg).unwrap();
        assert_eq!(a.adversarial_image.data(), b.adversarial_image.data());
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.config_digest, b.config_digest);
    }

    #[test]
    fn fgsm_config_rules_enforced() {
        let m = model();
        let img = test_image(5);
        let prompts = PromptSet::singleton(PointPrompt::new(1, 1));
        let mut bad = fgsm_config(8.0 / 255.0);
        bad.budget.iterations = 2;
        assert!(fgsm(&m, &prompts, &img, &bad).is_err());
        let mut bad2 = fgsm_config(8.0 / 255.0);
        bad2.budget.step_size = 1.0 / 255.0;
        assert!(fgsm(&m, &prompts, &img, &bad2).is_err());
    }

    #[test]
    fn surrogate_attack_respects_budget_and_flips_away_from_label() {
        let cls = ToyClassifier::random_init(3, 3, [6, 8, 10], 17);
        let img = test_image(6);
        let cfg = pgd_config(8.0 / 255.0, 2.0 / 255.0, 5);
        let res = surrogate_attack(&cls, &img, &cfg).unwrap();
        assert!(res.perturbation_linf <= cfg.budget.epsilon + 1e-8);
        // Objective is negated cross-entropy: descending it raises CE.
        assert!(res.loss_trace.last().unwrap() <= res.loss_trace.first().unwrap());
    }

    #[test]
    fn zero_gradient_means_no_step() {
        // Saturate the enlarge loss (all logits far above pos_th) so the
        // gradient is identically zero and FGSM must return the image.
        let mut m = model();
        // Push head bias way up.
        m.net_mut().head.bias[0] += 1000.0;
        m.refresh_digest();
        let img = test_image(7);
        let prompts = PromptSet::singleton(PointPrompt::new(2, 2));
        let mut cfg = fgsm_config(8.0 / 255.0);
        cfg.loss = LossSpec::new(LossKind::ClipmseEnlarge);
        let res = fgsm(&m, &prompts, &img, &cfg).unwrap();
        assert_eq!(res.adversarial_image.data(), img.data());
    }
}
