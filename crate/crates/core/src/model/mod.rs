//! The promptable-segmenter abstraction, the bundled trainable toy
//! implementation, the surrogate classifier for cross-task attacks, and the
//! registry through which external full-scale backends plug in.

pub mod classifier;
pub mod nn;
pub mod toy;
pub mod train;

mod checkpoint;

use std::collections::HashMap;
use std::sync::RwLock;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{loss_value_grad, Aggregation, LossSpec};
use crate::mask::LogitMap;
use crate::prompt::{PointPrompt, PromptSet};

pub use classifier::ToyClassifier;
pub use toy::{ToyModelSpec, ToySegmenter};
pub use train::{train_classifier, train_toy, ClassifierTrainConfig, TrainConfig};

/// Deferred-gradient handle returned by [`Segmenter::forward_with_grad`]:
/// holds the forward caches and backpropagates an upstream logit gradient
/// to image pixels on demand.
pub struct LogitsWithGrad<'a> {
    pub logits: LogitMap,
    vjp: Box<dyn FnOnce(&Array2<f64>) -> Array3<f64> + 'a>,
}

impl<'a> LogitsWithGrad<'a> {
    pub fn new(
        logits: LogitMap,
        vjp: Box<dyn FnOnce(&Array2<f64>) -> Array3<f64> + 'a>,
    ) -> Self {
        Self { logits, vjp }
    }

    /// Gradient of `sum(upstream * logits)` w.r.t. the image, `(C, H, W)`.
    pub fn backprop(self, upstream: &Array2<f64>) -> Array3<f64> {
        (self.vjp)(upstream)
    }
}

/// White-box promptable segmenter: deterministic forward plus pixel
/// gradients. Parameters are fixed at inference time.
pub trait Segmenter: Send + Sync {
    /// Stable identifier (checkpoint digest or adapter registration name).
    fn id(&self) -> &str;

    /// Errors if the image shape is incompatible with the backend.
    fn check_image(&self, image: &Image) -> Result<()>;

    /// Per-pixel mask logits at image resolution.
    fn forward(&self, image: &Image, prompt: PointPrompt) -> Result<LogitMap>;

    /// Forward pass that can backpropagate to the input image. Backends
    /// without gradient access return a capability error.
    fn forward_with_grad(&self, image: &Image, prompt: PointPrompt)
        -> Result<LogitsWithGrad<'_>>;

    fn boxed_clone(&self) -> Box<dyn Segmenter>;
}

/// Image classifier used as the cross-task attack surrogate.
pub struct ClassLogitsWithGrad<'a> {
    pub logits: Vec<f64>,
    vjp: Box<dyn FnOnce(&[f64]) -> Array3<f64> + 'a>,
}

impl<'a> ClassLogitsWithGrad<'a> {
    pub fn new(logits: Vec<f64>, vjp: Box<dyn FnOnce(&[f64]) -> Array3<f64> + 'a>) -> Self {
        Self { logits, vjp }
    }

    pub fn backprop(self, upstream: &[f64]) -> Array3<f64> {
        (self.vjp)(upstream)
    }
}

pub trait Classifier: Send + Sync {
    fn id(&self) -> &str;
    fn num_classes(&self) -> usize;
    fn check_image(&self, image: &Image) -> Result<()>;
    fn forward(&self, image: &Image) -> Result<Vec<f64>>;
    fn forward_with_grad(&self, image: &Image) -> Result<ClassLogitsWithGrad<'_>>;
    fn boxed_clone(&self) -> Box<dyn Classifier>;
}

/// Gradient of the aggregated attack objective w.r.t. the image pixels.
/// Returns the objective value alongside. Per-prompt contributions combine
/// by the spec's aggregation rule.
pub fn loss_gradient(
    model: &dyn Segmenter,
    prompt_set: &PromptSet,
    image: &Image,
    loss: &LossSpec,
) -> Result<(f64, Array3<f64>)> {
    model.check_image(image)?;
    let scale = match loss.aggregation {
        Aggregation::Sum => 1.0,
        Aggregation::Mean => 1.0 / prompt_set.len() as f64,
    };
    let mut total = 0.0;
    let mut grad: Option<Array3<f64>> = None;
    for &prompt in prompt_set.prompts() {
        let fwd = model.forward_with_grad(image, prompt)?;
        let (value, upstream) = loss_value_grad(loss, &fwd.logits)?;
        let g = fwd.backprop(&upstream);
        total += value * scale;
        match grad.as_mut() {
            None => grad = Some(g * scale),
            Some(acc) => *acc += &(g * scale),
        }
    }
    Ok((total, grad.expect("prompt set is non-empty")))
}

type AdapterFactory = fn(options: &serde_json::Value) -> Result<Box<dyn Segmenter>>;

static ADAPTERS: RwLock<Option<HashMap<String, AdapterFactory>>> = RwLock::new(None);

/// Registers an external segmenter backend under a name that run configs
/// can then select with `{"model": {"adapter": "<name>"}}`.
pub fn register_adapter(name: &str, factory: AdapterFactory) {
    let mut guard = ADAPTERS.write().expect("adapter registry poisoned");
    guard
        .get_or_insert_with(HashMap::new)
        .insert(name.to_string(), factory);
}

/// Instantiates a previously registered adapter.
pub fn open_adapter(name: &str, options: &serde_json::Value) -> Result<Box<dyn Segmenter>> {
    let guard = ADAPTERS.read().expect("adapter registry poisoned");
    match guard.as_ref().and_then(|m| m.get(name)) {
        Some(factory) => factory(options),
        None => Err(Error::Config(format!(
            "no segmenter adapter registered under {name:?}"
        ))),
    }
}
