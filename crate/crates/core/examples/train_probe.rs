//! Scratch probe: times model kernels and a full training run.

use maskattack_core::data::{Dataset, DatasetConfig};
use maskattack_core::losses::{LossKind, LossSpec};
use maskattack_core::model::{
    loss_gradient, train_toy, Segmenter, ToyModelSpec, TrainConfig,
};
use maskattack_core::prompt::{PointPrompt, PromptSet};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let dataset = Dataset::generate(DatasetConfig::default()).unwrap();
    println!(
        "dataset: {} scenes in {:.2}s",
        dataset.scenes.len(),
        t0.elapsed().as_secs_f64()
    );

    // Kernel timing on a random-init model.
    let spec = ToyModelSpec::default();
    let model = maskattack_core::model::ToySegmenter::random_init(&spec).unwrap();
    let image = &dataset.scenes[0].image;
    let prompt = PointPrompt::new(32, 32);
    let prompts = PromptSet::singleton(prompt);
    let loss = LossSpec::new(LossKind::ClipmseRemoval);

    let t = Instant::now();
    let n = 20;
    for _ in 0..n {
        let _ = model.forward(image, prompt).unwrap();
    }
    println!("forward: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t = Instant::now();
    for _ in 0..n {
        let _ = loss_gradient(&model, &prompts, image, &loss).unwrap();
    }
    println!(
        "forward+input-grad: {:.1} ms",
        t.elapsed().as_secs_f64() * 1000.0 / n as f64
    );

    // Full training run; env overrides for tuning experiments.
    let t = Instant::now();
    let mut cfg = TrainConfig::default();
    let mut spec = spec;
    if let Ok(v) = std::env::var("PROBE_LR") {
        cfg.lr = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("PROBE_FG") {
        cfg.fg_weight = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("PROBE_EPOCHS") {
        cfg.epochs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("PROBE_SIGMA") {
        spec.prompt_sigma = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("PROBE_MARGIN") {
        cfg.early_stop_margin = v.parse().unwrap();
    }
    let outcome = train_toy(&spec, &dataset, &cfg);
    let trained = match outcome {
        Ok(trained) => {
            let miou = maskattack_core::model::train::clean_miou(&trained, &dataset).unwrap();
            println!(
                "trained in {:.1}s, clean mIoU = {miou:.4}",
                t.elapsed().as_secs_f64()
            );
            trained
        }
        Err(e) => {
            println!("training FAILED after {:.1}s: {e}", t.elapsed().as_secs_f64());
            return;
        }
    };

    // Per-pair IoU distribution over the test rows.
    use maskattack_core::data::Split;
    use maskattack_core::mask::binarize;
    use maskattack_core::metrics::iou;
    let mut ious: Vec<f64> = Vec::new();
    for row in dataset.manifest.rows_for_split(Split::Test) {
        let scene = dataset.scene(&row.scene_id).unwrap();
        let pred = binarize(&trained.forward(&scene.image, row.prompt).unwrap());
        ious.push(iou(&pred, &scene.objects[row.object_index].mask).unwrap());
    }
    ious.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "iou quantiles: min {:.3} p10 {:.3} p50 {:.3} p90 {:.3} max {:.3}",
        ious[0],
        ious[ious.len() / 10],
        ious[ious.len() / 2],
        ious[9 * ious.len() / 10],
        ious[ious.len() - 1]
    );
    let low: Vec<String> = ious.iter().take(6).map(|v| format!("{v:.3}")).collect();
    println!("lowest: {}", low.join(" "));
}
