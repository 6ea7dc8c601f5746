//! Surrogate shape classifier used by the cross-task transfer attack:
//! a three-stage strided convnet with a global-average-pool head,
//! standing in for a large pretrained label-prediction model.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv2d, ConvGrad,
    FeatureMap, Linear, LinearGrad,
};
use crate::model::{ClassLogitsWithGrad, Classifier};

#[derive(Debug, Clone)]
pub(crate) struct ClassifierNet {
    pub image_channels: usize,
    pub num_classes: usize,
    pub train_seed: u64,
    pub v1: Conv2d,
    pub v2: Conv2d,
    pub v3: Conv2d,
    pub head: Linear,
}

pub(crate) struct ClassifierGrads {
    pub convs: Vec<ConvGrad>,
    pub head: LinearGrad,
}

pub(crate) struct ClassifierCache {
    input_dim: (usize, usize, usize),
    cols_v1: Array2<f64>,
    a1: FeatureMap,
    cols_v2: Array2<f64>,
    a2: FeatureMap,
    cols_v3: Array2<f64>,
    a3: FeatureMap,
    pooled: Array1<f64>,
}

impl ClassifierNet {
    pub fn init(
        image_channels: usize,
        num_classes: usize,
        widths: [usize; 3],
        train_seed: u64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        Self {
            image_channels,
            num_classes,
            train_seed,
            v1: Conv2d::init(image_channels, widths[0], 2, rng),
            v2: Conv2d::init(widths[0], widths[1], 2, rng),
            v3: Conv2d::init(widths[1], widths[2], 2, rng),
            head: Linear::init(widths[2], num_classes, rng),
        }
    }

    pub fn zero_grads(&self) -> ClassifierGrads {
        ClassifierGrads {
            convs: vec![
                self.v1.zeros_like_grad(),
                self.v2.zeros_like_grad(),
                self.v3.zeros_like_grad(),
            ],
            head: self.head.zeros_like_grad(),
        }
    }

    pub fn forward(&self, input: &FeatureMap) -> (Array1<f64>, ClassifierCache) {
        let input_dim = input.dim();
        let (y1, cols_v1) = self.v1.forward(input);
        let a1 = relu(&y1);
        let (y2, cols_v2) = self.v2.forward(&a1);
        let a2 = relu(&y2);
        let (y3, cols_v3) = self.v3.forward(&a2);
        let a3 = relu(&y3);
        let pooled = global_avg_pool(&a3);
        let logits = self.head.forward(&pooled);
        (
            logits,
            ClassifierCache {
                input_dim,
                cols_v1,
                a1,
                cols_v2,
                a2,
                cols_v3,
                a3,
                pooled,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ClassifierCache,
        grad_logits: &Array1<f64>,
        mut param_grads: Option<&mut ClassifierGrads>,
    ) -> FeatureMap {
        let g_pool = self.head.backward(
            &cache.pooled,
            grad_logits,
            param_grads.as_deref_mut().map(|g| &mut g.head),
        );
        let g_a3 = global_avg_pool_backward(&g_pool, cache.a3.dim());
        let g_p3 = relu_backward(&g_a3, &cache.a3);
        let g_a2 = self.v3.backward(
            &cache.cols_v3,
            cache.a2.dim(),
            &g_p3,
            param_grads.as_deref_mut().map(|g| &mut g.convs[2]),
        );
        let g_p2 = relu_backward(&g_a2, &cache.a2);
        let g_a1 = self.v2.backward(
            &cache.cols_v2,
            cache.a1.dim(),
            &g_p2,
            param_grads.as_deref_mut().map(|g| &mut g.convs[1]),
        );
        let g_p1 = relu_backward(&g_a1, &cache.a1);
        self.v1.backward(
            &cache.cols_v1,
            cache.input_dim,
            &g_p1,
            param_grads.as_deref_mut().map(|g| &mut g.convs[0]),
        )
    }
}

/// Trained surrogate classifier handle.
#[derive(Clone)]
pub struct ToyClassifier {
    net: ClassifierNet,
    digest: String,
}

impl ToyClassifier {
    pub(crate) fn from_net(net: ClassifierNet) -> Self {
        let digest = super::checkpoint::classifier_digest(&net);
        Self { net, digest }
    }

    pub fn random_init(
        image_channels: usize,
        num_classes: usize,
        widths: [usize; 3],
        seed: u64,
    ) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let net = ClassifierNet::init(image_channels, num_classes, widths, seed, &mut rng);
        Self::from_net(net)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        super::checkpoint::save_classifier(path, &self.net)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(Self::from_net(super::checkpoint::load_classifier(path)?))
    }

    pub(crate) fn net(&self) -> &ClassifierNet {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut ClassifierNet {
        &mut self.net
    }

    pub(crate) fn refresh_digest(&mut self) {
        self.digest = super::checkpoint::classifier_digest(&self.net);
    }
}

impl Classifier for ToyClassifier {
    fn id(&self) -> &str {
        &self.digest
    }

    fn num_classes(&self) -> usize {
        self.net.num_classes
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.channels() != self.net.image_channels {
            return Err(Error::shape(
                format!("{} channels", self.net.image_channels),
                format!("{} channels", image.channels()),
            ));
        }
        let (h, w) = image.shape_hw();
        if h % 8 != 0 || w % 8 != 0 || h < 8 || w < 8 {
            return Err(Error::shape(
                "H, W divisible by 8 and >= 8",
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    fn forward(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let (logits, _) = self.net.forward(image.data());
        let v = logits.to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("classifier produced non-finite logits"));
        }
        Ok(v)
    }

    fn forward_with_grad(&self, image: &Image) -> Result<ClassLogitsWithGrad<'_>> {
        self.check_image(image)?;
        let (logits, cache) = self.net.forward(image.data());
        let net = &self.net;
        let vjp = Box::new(move |upstream: &[f64]| {
            let g = Array1::from_vec(upstream.to_vec());
            net.backward(&cache, &g, None)
        });
        Ok(ClassLogitsWithGrad::new(logits.to_vec(), vjp))
    }

    fn boxed_clone(&self) -> Box<dyn Classifier> {
        Box::new(self.clone())
    }
}

/// Softmax cross-entropy and its gradient w.r.t. logits for one label.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let log_z = z.ln() + max;
    let loss = log_z - logits[label];
    let grad: Vec<f64> = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| e / z - if i == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
        .map(|(i, _)| i)
        .expect("non-empty logits")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(
            "x",
            Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0..1.0)),
        )
        .unwrap()
    }

    #[test]
    fn forward_is_deterministic_and_finite_on_noise() {
        let model = ToyClassifier::random_init(3, 3, [6, 8, 10], 3);
        let img = test_image(1);
        let a = model.forward(&img).unwrap();
        let b = model.forward(&img).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_wrong_resolution() {
        let model = ToyClassifier::random_init(3, 3, [6, 8, 10], 3);
        let img = Image::new("odd", Array3::from_elem((3, 12, 16), 0.5)).unwrap();
        assert!(model.forward(&img).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = vec![0.5, -1.0, 2.0];
        let (_, grad) = cross_entropy_grad(&logits, 1);
        let h = 1e-6;
        for i in 0..3 {
            let mut lp = logits.clone();
            lp[i] += h;
            let mut lm = logits.clone();
            lm[i] -= h;
            let fd = (cross_entropy_grad(&lp, 1).0 - cross_entropy_grad(&lm, 1).0) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = ToyClassifier::random_init(3, 3, [6, 8, 10], 5);
        let img = test_image(9);
        let fwd = model.forward_with_grad(&img).unwrap();
        let (_, ce_grad) = cross_entropy_grad(&fwd.logits, 0);
        let grad = fwd.backprop(&ce_grad);

        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..8 {
            let c = rng.gen_range(0..3);
            let r = rng.gen_range(0..16);
            let col = rng.gen_range(0..16);
            let base = img.data()[[c, r, col]];
            if base < h || base > 1.0 - h {
                continue;
            }
            let mut plus = img.data().clone();
            plus[[c, r, col]] = base + h;
            let mut minus = img.data().clone();
            minus[[c, r, col]] = base - h;
            let lp = cross_entropy_grad(
                &model.forward(&Image::new("p", plus).unwrap()).unwrap(),
                0,
            )
            .0;
            let lm = cross_entropy_grad(
                &model.forward(&Image::new("m", minus).unwrap()).unwrap(),
                0,
            )
            .0;
            let fd = (lp - lm) / (2.0 * h);
            let an = grad[[c, r, col]];
            assert!(
                (fd - an).abs() <= 1e-4 * (1.0 + an.abs()),
                "fd {fd} vs analytic {an}"
            );
        }
    }
}
