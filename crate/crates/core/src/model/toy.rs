//! The bundled desk-scale promptable segmenter: a small convolutional
//! encoder-decoder over `C + 1` input channels (image plus a Gaussian
//! prompt-heatmap channel) emitting one logit channel at image resolution.
//!
//! It exists so attack properties can be exercised end to end on a model
//! whose gradients are exact and cheap. Training calibrates logits toward
//! +10 inside the prompted object and -10 in the background, which is what
//! makes the removal losses' default thresholds meaningful.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::LogitMap;
use crate::model::nn::{
    relu, relu_backward, upsample2, upsample2_backward, Conv2d, ConvGrad, FeatureMap,
};
use crate::model::{LogitsWithGrad, Segmenter};
use crate::prompt::PointPrompt;

/// Logit magnitude the toy model is trained to emit (+ inside, - outside).
pub const CALIBRATED_LOGIT: f64 = 10.0;

/// Hyperparameters of the toy segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    /// Width (in pixels) of the Gaussian prompt heatmap.
    pub prompt_sigma: f64,
    /// Channel widths of the three encoder stages.
    pub widths: [usize; 3],
    /// Image channels the model expects (1 or 3).
    pub image_channels: usize,
    /// Seed for weight init and training-time sampling.
    pub train_seed: u64,
    /// Digest of the trained checkpoint; None before training.
    #[serde(default)]
    pub checkpoint_digest: Option<String>,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self {
            prompt_sigma: 6.0,
            widths: [16, 24, 32],
            image_channels: 3,
            train_seed: 7,
            checkpoint_digest: None,
        }
    }
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.prompt_sigma > 0.0) {
            return Err(Error::validation("prompt_sigma must be > 0"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::validation("channel widths must be >= 1"));
        }
        if !(self.image_channels == 1 || self.image_channels == 3) {
            return Err(Error::validation("image_channels must be 1 or 3"));
        }
        Ok(())
    }
}

/// Encoder-decoder weights. Two stride-2 stages down, two nearest-neighbor
/// upsamples back, with additive skip connections at each resolution.
#[derive(Debug, Clone)]
pub(crate) struct ToyNet {
    pub c1: Conv2d,   // C+1 -> w1
    pub d1: Conv2d,   // w1 -> w2, stride 2
    pub d2: Conv2d,   // w2 -> w3, stride 2
    pub mid: Conv2d,  // w3 -> w3
    pub u1: Conv2d,   // w3 -> w2, after 2x upsample
    pub u2: Conv2d,   // w2 -> w1, after 2x upsample
    pub head: Conv2d, // w1 -> 1
}

pub(crate) struct ToyGrads {
    pub layers: Vec<ConvGrad>,
}

pub(crate) struct ToyCache {
    input_dim: (usize, usize, usize),
    cols_c1: Array2<f64>,
    a1: FeatureMap,
    cols_d1: Array2<f64>,
    a2: FeatureMap,
    cols_d2: Array2<f64>,
    a3: FeatureMap,
    cols_mid: Array2<f64>,
    a4: FeatureMap,
    up_a4_dim: (usize, usize, usize),
    cols_u1: Array2<f64>,
    b1: FeatureMap,
    up_b1_dim: (usize, usize, usize),
    cols_u2: Array2<f64>,
    b2: FeatureMap,
}

impl ToyNet {
    pub fn init(spec: &ToyModelSpec, rng: &mut impl rand::Rng) -> Self {
        let [w1, w2, w3] = spec.widths;
        let in_c = spec.image_channels + 1;
        Self {
            c1: Conv2d::init(in_c, w1, 1, rng),
            d1: Conv2d::init(w1, w2, 2, rng),
            d2: Conv2d::init(w2, w3, 2, rng),
            mid: Conv2d::init(w3, w3, 1, rng),
            u1: Conv2d::init(w3, w2, 1, rng),
            u2: Conv2d::init(w2, w1, 1, rng),
            head: Conv2d::init(w1, 1, 1, rng),
        }
    }

    pub fn layers(&self) -> [&Conv2d; 7] {
        [&self.c1, &self.d1, &self.d2, &self.mid, &self.u1, &self.u2, &self.head]
    }

    pub fn layers_mut(&mut self) -> [&mut Conv2d; 7] {
        [
            &mut self.c1,
            &mut self.d1,
            &mut self.d2,
            &mut self.mid,
            &mut self.u1,
            &mut self.u2,
            &mut self.head,
        ]
    }

    pub fn zero_grads(&self) -> ToyGrads {
        ToyGrads {
            layers: self.layers().iter().map(|c| c.zeros_like_grad()).collect(),
        }
    }

    /// Forward pass over an assembled `(C+1, H, W)` input.
    pub fn forward(&self, input: &FeatureMap) -> (Array2<f64>, ToyCache) {
        let input_dim = input.dim();
        let (y_c1, cols_c1) = self.c1.forward(input);
        let a1 = relu(&y_c1);
        let (y_d1, cols_d1) = self.d1.forward(&a1);
        let a2 = relu(&y_d1);
        let (y_d2, cols_d2) = self.d2.forward(&a2);
        let a3 = relu(&y_d2);
        let (y_mid, cols_mid) = self.mid.forward(&a3);
        let a4 = relu(&y_mid);

        let up_a4 = upsample2(&a4);
        let up_a4_dim = up_a4.dim();
        let (y_u1, cols_u1) = self.u1.forward(&up_a4);
        let b1 = relu(&(y_u1 + &a2));

        let up_b1 = upsample2(&b1);
        let up_b1_dim = up_b1.dim();
        let (y_u2, cols_u2) = self.u2.forward(&up_b1);
        let b2 = relu(&(y_u2 + &a1));

        let (y_head, _) = self.head.forward(&b2);
        let (_, h, w) = input_dim;
        let logits = y_head
            .into_shape_with_order((h, w))
            .expect("head emits one channel at input resolution");

        // head cols equal the im2col of b2; recomputed in backward via b2.
        let cache = ToyCache {
            input_dim,
            cols_c1,
            a1,
            cols_d1,
            a2,
            cols_d2,
            a3,
            cols_mid,
            a4,
            up_a4_dim,
            cols_u1,
            b1,
            up_b1_dim,
            cols_u2,
            b2,
        };
        (logits, cache)
    }

    /// Backward pass from a logit-space gradient to the input gradient,
    /// accumulating parameter gradients when requested.
    pub fn backward(
        &self,
        cache: &ToyCache,
        grad_logits: &Array2<f64>,
        mut param_grads: Option<&mut ToyGrads>,
    ) -> FeatureMap {
        let (h, w) = grad_logits.dim();
        let g_head_out = grad_logits
            .clone()
            .into_shape_with_order((1, h, w))
            .expect("logit grad reshape");

        // head: recompute cols of b2 (cheap relative to storing them).
        let (_, cols_head) = self.head.forward(&cache.b2);
        let g_b2 = self.head.backward(
            &cols_head,
            cache.b2.dim(),
            &g_head_out,
            param_grads.as_deref_mut().map(|g| &mut g.layers[6]),
        );

        let g_q2 = relu_backward(&g_b2, &cache.b2);
        // Skip connection: q2 = u2(up(b1)) + a1.
        let mut g_a1 = g_q2.clone();
        let g_up_b1 = self.u2.backward(
            &cache.cols_u2,
            cache.up_b1_dim,
            &g_q2,
            param_grads.as_deref_mut().map(|g| &mut g.layers[5]),
        );
        let g_b1 = upsample2_backward(&g_up_b1);

        let g_q1 = relu_backward(&g_b1, &cache.b1);
        // Skip connection: q1 = u1(up(a4)) + a2.
        let mut g_a2 = g_q1.clone();
        let g_up_a4 = self.u1.backward(
            &cache.cols_u1,
            cache.up_a4_dim,
            &g_q1,
            param_grads.as_deref_mut().map(|g| &mut g.layers[4]),
        );
        let g_a4 = upsample2_backward(&g_up_a4);

        let g_p4 = relu_backward(&g_a4, &cache.a4);
        let g_a3 = self.mid.backward(
            &cache.cols_mid,
            cache.a3.dim(),
            &g_p4,
            param_grads.as_deref_mut().map(|g| &mut g.layers[3]),
        );

        let g_p3 = relu_backward(&g_a3, &cache.a3);
        g_a2 += &self.d2.backward(
            &cache.cols_d2,
            cache.a2.dim(),
            &g_p3,
            param_grads.as_deref_mut().map(|g| &mut g.layers[2]),
        );

        let g_p2 = relu_backward(&g_a2, &cache.a2);
        g_a1 += &self.d1.backward(
            &cache.cols_d1,
            cache.a1.dim(),
            &g_p2,
            param_grads.as_deref_mut().map(|g| &mut g.layers[1]),
        );

        let g_p1 = relu_backward(&g_a1, &cache.a1);
        self.c1.backward(
            &cache.cols_c1,
            cache.input_dim,
            &g_p1,
            param_grads.as_deref_mut().map(|g| &mut g.layers[0]),
        )
    }
}

/// Trained toy segmenter handle. Immutable after construction; cloneable
/// so each worker can hold its own handle.
#[derive(Clone)]
pub struct ToySegmenter {
    spec: ToyModelSpec,
    net: ToyNet,
    digest: String,
}

impl ToySegmenter {
    pub(crate) fn from_parts(mut spec: ToyModelSpec, net: ToyNet) -> Self {
        let digest = super::checkpoint::toy_digest(&spec, &net);
        spec.checkpoint_digest = Some(digest.clone());
        Self { spec, net, digest }
    }

    /// Randomly initialized (untrained) model; useful as a baseline and in
    /// budget-invariant tests that need gradients but not quality.
    pub fn random_init(spec: &ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.train_seed);
        let net = ToyNet::init(spec, &mut rng);
        Ok(Self::from_parts(spec.clone(), net))
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        super::checkpoint::save_toy(path, &self.spec, &self.net)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let (spec, net) = super::checkpoint::load_toy(path)?;
        Ok(Self::from_parts(spec, net))
    }

    pub(crate) fn net(&self) -> &ToyNet {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut ToyNet {
        &mut self.net
    }

    pub(crate) fn refresh_digest(&mut self) {
        let digest = super::checkpoint::toy_digest(&self.spec, &self.net);
        self.spec.checkpoint_digest = Some(digest.clone());
        self.digest = digest;
    }

    /// Stacks image channels with the Gaussian prompt-heatmap channel.
    pub(crate) fn assemble_input(&self, image: &Image, prompt: PointPrompt) -> FeatureMap {
        let (c, h, w) = (image.channels(), image.height(), image.width());
        let mut input = Array3::zeros((c + 1, h, w));
        input
            .slice_mut(ndarray::s![..c, .., ..])
            .assign(image.data());
        let two_sigma_sq = 2.0 * self.spec.prompt_sigma * self.spec.prompt_sigma;
        for r in 0..h {
            for col in 0..w {
                let dr = r as f64 - prompt.row as f64;
                let dc = col as f64 - prompt.col as f64;
                input[[c, r, col]] = (-(dr * dr + dc * dc) / two_sigma_sq).exp();
            }
        }
        input
    }

    fn check_prompt(&self, image: &Image, prompt: PointPrompt) -> Result<()> {
        let (h, w) = image.shape_hw();
        if !prompt.in_bounds(h, w) {
            return Err(Error::validation(format!(
                "prompt ({}, {}) out of bounds for {h}x{w}",
                prompt.row, prompt.col
            )));
        }
        Ok(())
    }
}

impl Segmenter for ToySegmenter {
    fn id(&self) -> &str {
        &self.digest
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.channels() != self.spec.image_channels {
            return Err(Error::shape(
                format!("{} channels", self.spec.image_channels),
                format!("{} channels", image.channels()),
            ));
        }
        let (h, w) = image.shape_hw();
        if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(Error::shape(
                "H, W divisible by 4 and >= 8",
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    fn forward(&self, image: &Image, prompt: PointPrompt) -> Result<LogitMap> {
        self.check_image(image)?;
        self.check_prompt(image, prompt)?;
        let input = self.assemble_input(image, prompt);
        let (logits, _) = self.net.forward(&input);
        LogitMap::new(logits)
    }

    fn forward_with_grad(
        &self,
        image: &Image,
        prompt: PointPrompt,
    ) -> Result<LogitsWithGrad<'_>> {
        self.check_image(image)?;
        self.check_prompt(image, prompt)?;
        let input = self.assemble_input(image, prompt);
        let (logits, cache) = self.net.forward(&input);
        let logits = LogitMap::new(logits)?;
        let net = &self.net;
        let image_channels = self.spec.image_channels;
        let vjp = Box::new(move |upstream: &Array2<f64>| {
            let g_input = net.backward(&cache, upstream, None);
            // Only the image channels are attackable; the heatmap is fixed.
            g_input.slice(ndarray::s![..image_channels, .., ..]).to_owned()
        });
        Ok(LogitsWithGrad::new(logits, vjp))
    }

    fn boxed_clone(&self) -> Box<dyn Segmenter> {
        Box::new(self.clone())
    }
}
