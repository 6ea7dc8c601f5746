//! Training loops for the bundled toy models. Deterministic for a fixed
//! spec and seed: sample order, init and optimizer state all derive from
//! the training seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::mask::binarize;
use crate::metrics::iou;
use crate::model::classifier::{argmax, cross_entropy_grad, ClassifierNet, ToyClassifier};
use crate::model::toy::{ToyModelSpec, ToyNet, ToySegmenter, CALIBRATED_LOGIT};
use crate::model::Classifier;
use crate::prompt::PointPrompt;

/// Adam over a flat list of parameter tensors.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn toy_param_sizes(net: &ToyNet) -> Vec<usize> {
    net.layers()
        .iter()
        .flat_map(|c| [c.weight.len(), c.bias.len()])
        .collect()
}

/// Pixels adjacent (8-connectivity) to a mask/background transition.
fn boundary_band(mask: &crate::mask::BinaryMask) -> crate::mask::BinaryMask {
    let (h, w) = mask.shape_hw();
    crate::mask::BinaryMask::new(Array2::from_shape_fn((h, w), |(r, c)| {
        let v = mask.get(r, c);
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr >= 0
                    && nc >= 0
                    && (nr as usize) < h
                    && (nc as usize) < w
                    && mask.get(nr as usize, nc as usize) != v
                {
                    return true;
                }
            }
        }
        false
    }))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative per-epoch learning-rate decay.
    pub lr_decay: f64,
    /// Samples whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    /// Fresh prompts drawn per object per epoch.
    pub prompts_per_object: usize,
    /// Extra loss weight on object pixels (backgrounds dominate otherwise).
    pub fg_weight: f64,
    /// Extra loss weight on the 1px band around the mask boundary, where
    /// IoU is won and lost.
    pub boundary_weight: f64,
    /// Required held-out clean mIoU.
    pub gate_miou: f64,
    /// Stop early once held-out mIoU reaches gate + margin.
    pub early_stop_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 2.5e-3,
            lr_decay: 0.85,
            batch_size: 4,
            prompts_per_object: 1,
            fg_weight: 4.0,
            boundary_weight: 8.0,
            gate_miou: 0.9,
            early_stop_margin: 0.05,
        }
    }
}

/// Clean mIoU of `model` against ground truth over the manifest's test rows.
pub fn clean_miou(model: &ToySegmenter, dataset: &Dataset) -> Result<f64> {
    use crate::data::Split;
    use crate::model::Segmenter;
    let mut total = 0.0;
    let mut n = 0usize;
    for row in dataset.manifest.rows_for_split(Split::Test) {
        let scene = dataset.scene(&row.scene_id)?;
        let logits = model.forward(&scene.image, row.prompt)?;
        let pred = binarize(&logits);
        total += iou(&pred, &scene.objects[row.object_index].mask)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::validation("no test rows to evaluate"));
    }
    Ok(total / n as f64)
}

/// Trains the toy segmenter on the dataset's train scenes until the
/// held-out clean-mask quality gate is met. Targets are calibrated logits:
/// +10 inside the prompted object, -10 elsewhere.
pub fn train_toy(spec: &ToyModelSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<ToySegmenter> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.train_seed);
    let net = ToyNet::init(spec, &mut rng);
    let mut model = ToySegmenter::from_parts(spec.clone(), net);
    let mut optim = Adam::new(cfg.lr, &toy_param_sizes(model.net()));

    // (scene index, object index) sample pool over the train split.
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (si, scene) in dataset.scenes.iter().enumerate() {
        if !scene.id.starts_with("train-") {
            continue;
        }
        for oi in 0..scene.objects.len() {
            pool.push((si, oi));
        }
    }
    if pool.is_empty() {
        return Err(Error::validation("dataset has no train scenes"));
    }

    for epoch in 0..cfg.epochs {
        optim.lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        let mut order = pool.clone();
        let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(spec.train_seed, 10, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = erng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut grads = model.net().zero_grads();
        let mut in_batch = 0usize;
        let mut flush = |model: &mut ToySegmenter,
                         grads: &mut crate::model::toy::ToyGrads,
                         in_batch: &mut usize,
                         optim: &mut Adam| {
            if *in_batch == 0 {
                return;
            }
            let scale = 1.0 / *in_batch as f64;
            for g in grads.layers.iter_mut() {
                g.weight.mapv_inplace(|v| v * scale);
                g.bias.mapv_inplace(|v| v * scale);
            }
            let mut params: Vec<&mut [f64]> = Vec::new();
            for conv in model.net_mut().layers_mut() {
                params.push(conv.weight.as_slice_mut().expect("contiguous"));
                params.push(conv.bias.as_slice_mut().expect("contiguous"));
            }
            let grad_slices: Vec<&[f64]> = grads
                .layers
                .iter()
                .flat_map(|g| {
                    [
                        g.weight.as_slice().expect("contiguous"),
                        g.bias.as_slice().expect("contiguous"),
                    ]
                })
                .collect();
            optim.step(&mut params, &grad_slices);
            for g in grads.layers.iter_mut() {
                g.weight.fill(0.0);
                g.bias.fill(0.0);
            }
            *in_batch = 0;
        };

        for &(si, oi) in &order {
            let scene = &dataset.scenes[si];
            let object = &scene.objects[oi];
            let interior = object.mask.erode(1);
            let candidates = if interior.is_empty() {
                object.mask.true_pixels()
            } else {
                interior.true_pixels()
            };
            let band = boundary_band(&object.mask);
            for _ in 0..cfg.prompts_per_object {
                let (r, c) = candidates[erng.gen_range(0..candidates.len())];
                let prompt = PointPrompt::new(r, c);

                let input = model.assemble_input(&scene.image, prompt);
                let (logits, cache) = model.net().forward(&input);

                // Weighted MSE toward +/- CALIBRATED_LOGIT, with extra
                // weight on object pixels and the boundary band.
                let (h, w) = logits.dim();
                let mut weight = Array2::from_elem((h, w), 1.0f64);
                for row in 0..h {
                    for col in 0..w {
                        if object.mask.get(row, col) {
                            weight[[row, col]] += cfg.fg_weight;
                        }
                        if band.get(row, col) {
                            weight[[row, col]] += cfg.boundary_weight;
                        }
                    }
                }
                let weight_sum: f64 = weight.iter().sum();
                let mut grad = Array2::zeros((h, w));
                for row in 0..h {
                    for col in 0..w {
                        let target = if object.mask.get(row, col) {
                            CALIBRATED_LOGIT
                        } else {
                            -CALIBRATED_LOGIT
                        };
                        grad[[row, col]] = 2.0 * weight[[row, col]]
                            * (logits[[row, col]] - target)
                            / weight_sum;
                    }
                }

                model.net().backward(&cache, &grad, Some(&mut grads));
                in_batch += 1;
                if in_batch == cfg.batch_size {
                    flush(&mut model, &mut grads, &mut in_batch, &mut optim);
                }
            }
        }
        flush(&mut model, &mut grads, &mut in_batch, &mut optim);

        if epoch + 1 >= 2 {
            model.refresh_digest();
            let miou = clean_miou(&model, dataset)?;
            if std::env::var_os("MASKATTACK_TRAIN_LOG").is_some() {
                eprintln!("epoch {epoch}: held-out mIoU {miou:.4}");
            }
            if miou >= cfg.gate_miou + cfg.early_stop_margin {
                break;
            }
        }
    }

    model.refresh_digest();
    let miou = clean_miou(&model, dataset)?;
    if miou < cfg.gate_miou {
        return Err(Error::TrainingFailed {
            miou,
            required: cfg.gate_miou,
        });
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub widths: [usize; 3],
    pub seed: u64,
    /// Required accuracy on the test split (dominant-shape labels).
    pub gate_accuracy: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 2e-3,
            widths: [12, 16, 24],
            seed: 11,
            gate_accuracy: 0.95,
        }
    }
}

/// Accuracy of dominant-shape prediction over the test scenes.
pub fn classifier_accuracy(model: &ToyClassifier, dataset: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let mut n = 0usize;
    for scene in dataset.test_scenes() {
        let Some(dom) = scene.dominant_object() else {
            continue;
        };
        let label = scene.objects[dom].kind.class_index();
        let logits = model.forward(&scene.image)?;
        if argmax(&logits) == label {
            correct += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::validation("no test scenes to evaluate"));
    }
    Ok(correct as f64 / n as f64)
}

/// Trains the surrogate shape classifier (labels = dominant shape class).
pub fn train_classifier(
    dataset: &Dataset,
    cfg: &ClassifierTrainConfig,
) -> Result<ToyClassifier> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let image_channels = 3;
    let net = ClassifierNet::init(image_channels, 3, cfg.widths, cfg.seed, &mut rng);
    let mut model = ToyClassifier::from_net(net);
    let sizes: Vec<usize> = {
        let n = model.net();
        [&n.v1, &n.v2, &n.v3]
            .iter()
            .flat_map(|c| [c.weight.len(), c.bias.len()])
            .chain([n.head.weight.len(), n.head.bias.len()])
            .collect()
    };
    let mut optim = Adam::new(cfg.lr, &sizes);

    let train_ids: Vec<usize> = dataset
        .scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.id.starts_with("train-") && !s.objects.is_empty())
        .map(|(i, _)| i)
        .collect();
    if train_ids.is_empty() {
        return Err(Error::validation("dataset has no train scenes"));
    }

    for epoch in 0..cfg.epochs {
        let mut order = train_ids.clone();
        let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 20, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = erng.gen_range(0..=i);
            order.swap(i, j);
        }
        for &si in &order {
            let scene = &dataset.scenes[si];
            let label = scene.objects[scene.dominant_object().expect("non-empty")]
                .kind
                .class_index();
            let (logits, cache) = model.net().forward(scene.image.data());
            let (_, ce_grad) = cross_entropy_grad(logits.as_slice().unwrap(), label);
            let g = ndarray::Array1::from_vec(ce_grad);
            let mut grads = model.net().zero_grads();
            model.net().backward(&cache, &g, Some(&mut grads));

            let net = model.net_mut();
            let mut params: Vec<&mut [f64]> = Vec::new();
            for conv in [&mut net.v1, &mut net.v2, &mut net.v3] {
                params.push(conv.weight.as_slice_mut().unwrap());
                params.push(conv.bias.as_slice_mut().unwrap());
            }
            params.push(net.head.weight.as_slice_mut().unwrap());
            params.push(net.head.bias.as_slice_mut().unwrap());
            let grad_slices: Vec<&[f64]> = grads
                .convs
                .iter()
                .flat_map(|g| [g.weight.as_slice().unwrap(), g.bias.as_slice().unwrap()])
                .chain([
                    grads.head.weight.as_slice().unwrap(),
                    grads.head.bias.as_slice().unwrap(),
                ])
                .collect();
            optim.step(&mut params, &grad_slices);
        }
        model.refresh_digest();
        if epoch + 1 >= 3 && classifier_accuracy(&model, dataset)? >= cfg.gate_accuracy + 0.02 {
            break;
        }
    }

    model.refresh_digest();
    let acc = classifier_accuracy(&model, dataset)?;
    if acc < cfg.gate_accuracy {
        return Err(Error::TrainingFailed {
            miou: acc,
            required: cfg.gate_accuracy,
        });
    }
    Ok(model)
}
