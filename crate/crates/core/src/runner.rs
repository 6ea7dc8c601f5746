//! Executes a validated [`RunConfig`] over the benchmark: builds the task
//! per pair, runs the attack, evaluates masks, and assembles the report.
//!
//! Pairs are independent; `workers > 1` distributes them across threads
//! with one cloned model handle per worker. Results merge in row order, so
//! reports are identical regardless of worker count.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{fgsm, pgd, surrogate_attack, AttackConfig, Attacker};
use crate::budget::AttackResult;
use crate::config::{ModelSel, RunConfig};
use crate::data::{derive_seed, BenchmarkRow, Dataset, Split, SyntheticScene};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{binarize, BinaryMask};
use crate::metrics::{iou, success, EvalRecord, SuccessThresholds};
use crate::model::{open_adapter, Classifier, Segmenter, ToyClassifier, ToySegmenter};
use crate::prompt::{sample_prompts_excluding, PointPrompt, PromptSet};
use crate::reporting::{compute_aggregates, persist, render_overlay, EnvInfo, RunReport, SCHEMA_VERSION};
use crate::tasks::{
    build_cross_prompt, build_manipulation, build_removal, build_target_mask, ManipulationKind,
    TargetMaskSource, TaskKind, TaskSpec,
};

/// Everything a pair evaluation produces.
struct PairOutcome {
    records: Vec<EvalRecord>,
    overlay: Option<OverlayData>,
}

struct OverlayData {
    scene_id: String,
    clean: Image,
    adv: Image,
    mask_clean: BinaryMask,
    mask_adv: BinaryMask,
    prompt: PointPrompt,
}

/// Loads (or generates) the dataset named by the config.
pub fn resolve_dataset(config: &RunConfig) -> Result<Dataset> {
    match (&config.dataset.path, &config.dataset.generate) {
        (Some(path), None) => Dataset::load(path),
        (None, Some(gen)) => Dataset::generate(gen.clone()),
        _ => Err(Error::Config("dataset selection must be exactly one source".into())),
    }
}

/// Opens the segmenter backend named by the config.
pub fn resolve_segmenter(config: &RunConfig) -> Result<Box<dyn Segmenter>> {
    match &config.model {
        ModelSel::Toy { checkpoint } => Ok(Box::new(ToySegmenter::load(checkpoint)?)),
        ModelSel::Adapter { adapter, options } => open_adapter(adapter, options),
    }
}

/// Loads or deterministically trains the cross-task surrogate.
pub fn resolve_classifier(config: &RunConfig, dataset: &Dataset) -> Result<ToyClassifier> {
    match &config.surrogate_checkpoint {
        Some(path) => ToyClassifier::load(path),
        None => crate::model::train_classifier(
            dataset,
            &crate::model::ClassifierTrainConfig::default(),
        ),
    }
}

/// Full pipeline: resolve inputs, run, persist when an output dir is set.
pub fn execute(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let dataset = resolve_dataset(config)?;
    let segmenter = resolve_segmenter(config)?;
    let classifier = if config.task.kind() == TaskKind::CrossTask {
        Some(resolve_classifier(config, &dataset)?)
    } else {
        None
    };
    execute_resolved(
        config,
        &dataset,
        segmenter.as_ref(),
        classifier.as_ref().map(|c| c as &dyn Classifier),
    )
}

/// Core execution against already-resolved dataset and models.
pub fn execute_resolved(
    config: &RunConfig,
    dataset: &Dataset,
    segmenter: &dyn Segmenter,
    classifier: Option<&dyn Classifier>,
) -> Result<RunReport> {
    config.validate()?;
    if config.task.kind() == TaskKind::CrossTask && classifier.is_none() {
        return Err(Error::Config("cross-task run needs a classifier".into()));
    }
    let start = Instant::now();
    let rows: Vec<BenchmarkRow> = dataset
        .manifest
        .rows_for_split(Split::Test)
        .cloned()
        .collect();
    if rows.is_empty() {
        return Err(Error::validation("benchmark has no test rows"));
    }

    let workers = config.workers.min(rows.len()).max(1);
    let mut outcomes: Vec<Option<Result<PairOutcome>>> = Vec::new();
    outcomes.resize_with(rows.len(), || None);

    if workers == 1 {
        for (i, row) in rows.iter().enumerate() {
            outcomes[i] = Some(run_pair(config, dataset, segmenter, classifier, row, i, &rows));
        }
    } else {
        let results = std::thread::scope(|scope| -> Vec<Vec<(usize, Result<PairOutcome>)>> {
            let mut handles = Vec::new();
            for w in 0..workers {
                let seg = segmenter.boxed_clone();
                let cls = classifier.map(|c| c.boxed_clone());
                let rows_ref = &rows;
                handles.push(scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut idx = w;
                    while idx < rows_ref.len() {
                        out.push((
                            idx,
                            run_pair(
                                config,
                                dataset,
                                seg.as_ref(),
                                cls.as_deref(),
                                &rows_ref[idx],
                                idx,
                                rows_ref,
                            ),
                        ));
                        idx += workers;
                    }
                    out
                }));
            }
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for chunk in results {
            for (i, outcome) in chunk {
                outcomes[i] = Some(outcome);
            }
        }
    }

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut overlays = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome.expect("every pair processed") {
            Ok(mut o) => {
                records.append(&mut o.records);
                if let Some(ov) = o.overlay {
                    overlays.push(ov);
                }
            }
            Err(e) => failures.push(format!("pair {i} ({}): {e}", rows[i].scene_id)),
        }
    }
    if records.is_empty() {
        return Err(Error::validation(format!(
            "no pair produced records; first failure: {}",
            failures.first().map(String::as_str).unwrap_or("none")
        )));
    }

    let aggregates = compute_aggregates(&records)?;
    let config_digest = config.digest()?;
    let dataset_digest = dataset.digest()?;
    let run_id = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(config_digest.as_bytes());
        h.update(dataset_digest.as_bytes());
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect::<String>()
    };

    let mut run_tags = BTreeMap::new();
    run_tags.insert("segmenter".to_string(), segmenter.id().to_string());
    if let Some(cls) = classifier {
        run_tags.insert("surrogate".to_string(), cls.id().to_string());
        run_tags.insert("source_task".to_string(), "classification".to_string());
    }

    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        run_id,
        label: config.label(),
        task_kind: config.task.kind(),
        config: config.canonical()?,
        config_digest,
        dataset_digest,
        records,
        aggregates,
        failures,
        run_tags,
        env: EnvInfo::default(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };

    if let Some(dir) = &config.output_dir {
        let run_dir = dir.join(&report.run_id);
        persist(&report, &run_dir)?;
        let ov_dir = run_dir.join("overlays");
        if !overlays.is_empty() {
            std::fs::create_dir_all(&ov_dir)?;
        }
        for ov in &overlays {
            render_overlay(
                &ov.clean,
                &ov.mask_clean,
                ov.prompt,
                ov_dir.join(format!("{}-clean.png", ov.scene_id)),
            )?;
            render_overlay(
                &ov.adv,
                &ov.mask_adv,
                ov.prompt,
                ov_dir.join(format!("{}-adv.png", ov.scene_id)),
            )?;
            ov.adv
                .save_png(ov_dir.join(format!("{}-adv-image.png", ov.scene_id)))?;
        }
    }
    Ok(report)
}

fn run_attack(
    segmenter: &dyn Segmenter,
    prompts: &PromptSet,
    image: &Image,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    match cfg.attacker {
        Attacker::Fgsm => fgsm(segmenter, prompts, image, cfg),
        Attacker::Pgd => pgd(segmenter, prompts, image, cfg),
    }
}

/// Union of eroded object masks: where evaluation prompts may land.
fn object_interiors(scene: &SyntheticScene) -> Result<BinaryMask> {
    let (h, w) = scene.image.shape_hw();
    let mut interiors = BinaryMask::zeros(h, w);
    let mut raw = BinaryMask::zeros(h, w);
    for obj in &scene.objects {
        interiors = interiors.union(&obj.mask.erode(2))?;
        raw = raw.union(&obj.mask)?;
    }
    Ok(if interiors.is_empty() { raw } else { interiors })
}

fn finish_record(
    mut record: EvalRecord,
    task: TaskKind,
    thresholds: &SuccessThresholds,
) -> Result<EvalRecord> {
    record.success = if record.is_vacuous() {
        false
    } else {
        success(&record, task, thresholds)?
    };
    record.validate()?;
    Ok(record)
}

/// Evaluates one white-box pair: masks before/after on the same prompt.
fn eval_same_prompt(
    segmenter: &dyn Segmenter,
    scene_id: &str,
    clean: &Image,
    adv: &Image,
    prompt: PointPrompt,
    linf: f64,
    target: Option<&BinaryMask>,
    task: TaskKind,
) -> Result<(EvalRecord, BinaryMask, BinaryMask)> {
    let mask_clean = binarize(&segmenter.forward(clean, prompt)?);
    let mask_adv = binarize(&segmenter.forward(adv, prompt)?);
    let record = EvalRecord {
        image_id: scene_id.to_string(),
        prompt,
        iou_clean_adv: iou(&mask_clean, &mask_adv)?,
        iou_target_adv: target.map(|t| iou(t, &mask_adv)).transpose()?,
        area_clean: mask_clean.area(),
        area_adv: mask_adv.area(),
        perturbation_linf: linf,
        success: false,
    };
    let record = finish_record(record, task, &SuccessThresholds::default())?;
    Ok((record, mask_clean, mask_adv))
}

/// Evaluates an adversarial image over fresh prompts (transfer settings).
fn eval_fresh_prompts(
    segmenter: &dyn Segmenter,
    scene: &SyntheticScene,
    adv: &Image,
    linf: f64,
    eval_prompts: usize,
    exclude: &[PointPrompt],
    seed: u64,
    task: TaskKind,
) -> Result<Vec<EvalRecord>> {
    let region = object_interiors(scene)?;
    let available = region
        .true_pixels()
        .iter()
        .filter(|&&(r, c)| !exclude.contains(&PointPrompt::new(r, c)))
        .count();
    let count = eval_prompts.min(available);
    if count == 0 {
        return Err(Error::validation(
            "no evaluation prompts available outside the source set",
        ));
    }
    let prompts = sample_prompts_excluding(&scene.image, count, seed, Some(&region), exclude)?;
    let mut records = Vec::with_capacity(count);
    for &p in prompts.prompts() {
        let mask_clean = binarize(&segmenter.forward(&scene.image, p)?);
        let mask_adv = binarize(&segmenter.forward(adv, p)?);
        let record = EvalRecord {
            image_id: scene.id.clone(),
            prompt: p,
            iou_clean_adv: iou(&mask_clean, &mask_adv)?,
            iou_target_adv: None,
            area_clean: mask_clean.area(),
            area_adv: mask_adv.area(),
            perturbation_linf: linf,
            success: false,
        };
        records.push(finish_record(record, task, &SuccessThresholds::default())?);
    }
    Ok(records)
}

fn run_pair(
    config: &RunConfig,
    dataset: &Dataset,
    segmenter: &dyn Segmenter,
    classifier: Option<&dyn Classifier>,
    row: &BenchmarkRow,
    pair_idx: usize,
    all_rows: &[BenchmarkRow],
) -> Result<PairOutcome> {
    let scene = dataset.scene(&row.scene_id)?;
    let image = &scene.image;
    let task_kind = config.task.kind();
    let mut attack_cfg = config.attack.clone();
    attack_cfg.seed = derive_seed(config.seed, 100, pair_idx as u64);
    let want_overlay = pair_idx < config.overlays;

    let outcome = match &config.task {
        TaskSpec::Removal | TaskSpec::Enlarge => {
            let prompts = if task_kind == TaskKind::Removal {
                let (mut loss, prompts) = build_removal(row.prompt, attack_cfg.loss.kind)?;
                loss.neg_th = attack_cfg.loss.neg_th;
                loss.pos_th = attack_cfg.loss.pos_th;
                loss.aggregation = attack_cfg.loss.aggregation;
                attack_cfg.loss = loss;
                prompts
            } else {
                PromptSet::singleton(row.prompt)
            };
            let result = run_attack(segmenter, &prompts, image, &attack_cfg)?;
            let (record, mask_clean, mask_adv) = eval_same_prompt(
                segmenter,
                &scene.id,
                image,
                &result.adversarial_image,
                row.prompt,
                result.perturbation_linf,
                None,
                task_kind,
            )?;
            PairOutcome {
                overlay: want_overlay.then(|| OverlayData {
                    scene_id: scene.id.clone(),
                    clean: image.clone(),
                    adv: result.adversarial_image.clone(),
                    mask_clean,
                    mask_adv,
                    prompt: row.prompt,
                }),
                records: vec![record],
            }
        }

        TaskSpec::CrossPrompt { k, eval_prompts } => {
            let source_seed = derive_seed(config.seed, 101, pair_idx as u64);
            let (mut loss, source) =
                build_cross_prompt(image, *k, source_seed, attack_cfg.loss.kind)?;
            loss.neg_th = attack_cfg.loss.neg_th;
            loss.pos_th = attack_cfg.loss.pos_th;
            loss.aggregation = attack_cfg.loss.aggregation;
            attack_cfg.loss = loss;
            let result = run_attack(segmenter, &source, image, &attack_cfg)?;
            let records = eval_fresh_prompts(
                segmenter,
                scene,
                &result.adversarial_image,
                result.perturbation_linf,
                *eval_prompts,
                source.prompts(),
                derive_seed(config.seed, 102, pair_idx as u64),
                task_kind,
            )?;
            let overlay = want_overlay
                .then(|| -> Result<OverlayData> {
                    let p = records[0].prompt;
                    let mask_clean = binarize(&segmenter.forward(image, p)?);
                    let mask_adv =
                        binarize(&segmenter.forward(&result.adversarial_image, p)?);
                    Ok(OverlayData {
                        scene_id: scene.id.clone(),
                        clean: image.clone(),
                        adv: result.adversarial_image.clone(),
                        mask_clean,
                        mask_adv,
                        prompt: p,
                    })
                })
                .transpose()?;
            PairOutcome { records, overlay }
        }

        TaskSpec::CrossTask { eval_prompts } => {
            let cls = classifier.ok_or_else(|| {
                Error::Config("cross-task run needs a classifier".into())
            })?;
            let result = surrogate_attack(cls, image, &attack_cfg)?;
            let records = eval_fresh_prompts(
                segmenter,
                scene,
                &result.adversarial_image,
                result.perturbation_linf,
                *eval_prompts,
                &[],
                derive_seed(config.seed, 102, pair_idx as u64),
                task_kind,
            )?;
            let overlay = want_overlay
                .then(|| -> Result<OverlayData> {
                    let p = records[0].prompt;
                    let mask_clean = binarize(&segmenter.forward(image, p)?);
                    let mask_adv =
                        binarize(&segmenter.forward(&result.adversarial_image, p)?);
                    Ok(OverlayData {
                        scene_id: scene.id.clone(),
                        clean: image.clone(),
                        adv: result.adversarial_image.clone(),
                        mask_clean,
                        mask_adv,
                        prompt: p,
                    })
                })
                .transpose()?;
            PairOutcome { records, overlay }
        }

        // Targeted kinds: build the target, attach it to the region loss.
        task => {
            let mask_clean = binarize(&segmenter.forward(image, row.prompt)?);
            let (h, w) = image.shape_hw();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 103, pair_idx as u64));
            let target = match task {
                TaskSpec::ShiftDuplicate { dr, dc } => build_manipulation(
                    &mask_clean,
                    ManipulationKind::Duplicate { dr: *dr, dc: *dc },
                )?,
                TaskSpec::ShiftTranslate { dr, dc } => build_manipulation(
                    &mask_clean,
                    ManipulationKind::Translate { dr: *dr, dc: *dc },
                )?,
                TaskSpec::FlipDuplicate { axis } => {
                    build_manipulation(&mask_clean, ManipulationKind::FlipDuplicate { axis: *axis })?
                }
                TaskSpec::FlipReplace { axis } => {
                    build_manipulation(&mask_clean, ManipulationKind::FlipReplace { axis: *axis })?
                }
                TaskSpec::TargetShape { shape } => {
                    let source = match shape {
                        crate::tasks::ShapeTargetSpec::Circle { radius } => {
                            let r = *radius;
                            if 2 * r + 2 >= h.min(w) {
                                return Err(Error::validation("circle radius too large"));
                            }
                            TargetMaskSource::Circle {
                                center: (
                                    rng.gen_range(r + 1..h - r - 1),
                                    rng.gen_range(r + 1..w - r - 1),
                                ),
                                radius: r,
                            }
                        }
                        crate::tasks::ShapeTargetSpec::Square { half_size } => {
                            let s = *half_size;
                            if 2 * s + 2 >= h.min(w) {
                                return Err(Error::validation("square half_size too large"));
                            }
                            let center = (
                                rng.gen_range(s + 1..h - s - 1),
                                rng.gen_range(s + 1..w - s - 1),
                            );
                            TargetMaskSource::Square {
                                top_left: (center.0 - s, center.1 - s),
                                bottom_right: (center.0 + s, center.1 + s),
                            }
                        }
                    };
                    build_target_mask(source, (h, w))?
                }
                TaskSpec::TargetOtherPrompt => {
                    let others: Vec<usize> = (0..scene.objects.len())
                        .filter(|&i| i != row.object_index)
                        .collect();
                    if others.is_empty() {
                        return Err(Error::validation(
                            "target_other_prompt needs a scene with a second object",
                        ));
                    }
                    let other = others[rng.gen_range(0..others.len())];
                    let interior = scene.objects[other].mask.erode(2);
                    let pool = if interior.is_empty() {
                        scene.objects[other].mask.true_pixels()
                    } else {
                        interior.true_pixels()
                    };
                    let (r, c) = pool[rng.gen_range(0..pool.len())];
                    build_target_mask(
                        TargetMaskSource::OtherPrompt {
                            model: segmenter,
                            image,
                            prompt: PointPrompt::new(r, c),
                        },
                        (h, w),
                    )?
                }
                TaskSpec::TargetOtherImage { reference_scene } => {
                    let (ref_scene, ref_prompt) = match reference_scene {
                        Some(id) => {
                            let sc = dataset.scene(id)?;
                            let prompt = all_rows
                                .iter()
                                .find(|r| &r.scene_id == id)
                                .map(|r| r.prompt)
                                .ok_or_else(|| {
                                    Error::validation(format!(
                                        "reference scene {id} has no benchmark row"
                                    ))
                                })?;
                            (sc, prompt)
                        }
                        None => {
                            let other = &all_rows[(pair_idx + 1) % all_rows.len()];
                            if other.scene_id == row.scene_id && all_rows.len() > 1 {
                                let other2 = &all_rows[(pair_idx + 2) % all_rows.len()];
                                (dataset.scene(&other2.scene_id)?, other2.prompt)
                            } else {
                                (dataset.scene(&other.scene_id)?, other.prompt)
                            }
                        }
                    };
                    build_target_mask(
                        TargetMaskSource::OtherImage {
                            model: segmenter,
                            reference_image: &ref_scene.image,
                            reference_prompt: ref_prompt,
                        },
                        (h, w),
                    )?
                }
                _ => unreachable!("non-targeted kinds handled above"),
            };

            attack_cfg.loss = attack_cfg.loss.clone().with_target(target.clone());
            let prompts = PromptSet::singleton(row.prompt);
            let result = run_attack(segmenter, &prompts, image, &attack_cfg)?;
            let (record, _mask_clean, mask_adv) = eval_same_prompt(
                segmenter,
                &scene.id,
                image,
                &result.adversarial_image,
                row.prompt,
                result.perturbation_linf,
                Some(&target),
                task_kind,
            )?;
            PairOutcome {
                overlay: want_overlay.then(|| OverlayData {
                    scene_id: scene.id.clone(),
                    clean: image.clone(),
                    adv: result.adversarial_image.clone(),
                    mask_clean: target.clone(),
                    mask_adv,
                    prompt: row.prompt,
                }),
                records: vec![record],
            }
        }
    };
    Ok(outcome)
}

/// Sweepable parameters for `cmd_sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    K,
    Epsilon,
    Iterations,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(SweepParam::K),
            "epsilon" | "eps" => Ok(SweepParam::Epsilon),
            "iterations" | "iters" => Ok(SweepParam::Iterations),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

/// Applies one sweep value to a copy of the base config.
pub fn apply_sweep_value(base: &RunConfig, param: SweepParam, value: f64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match param {
        SweepParam::K => {
            let k = value as usize;
            if value.fract() != 0.0 || k == 0 {
                return Err(Error::Config(format!("K must be a positive integer, got {value}")));
            }
            match &mut cfg.task {
                TaskSpec::CrossPrompt { k: slot, .. } => *slot = k,
                _ => {
                    return Err(Error::Config(
                        "sweeping K requires a cross_prompt task".into(),
                    ))
                }
            }
        }
        SweepParam::Epsilon => {
            cfg.attack.budget.epsilon = value;
            if cfg.attack.attacker == Attacker::Fgsm {
                cfg.attack.budget.step_size = value;
            } else {
                cfg.attack.budget.step_size = cfg.attack.budget.step_size.min(value);
            }
        }
        SweepParam::Iterations => {
            let n = value as usize;
            if value.fract() != 0.0 || n == 0 {
                return Err(Error::Config(format!(
                    "iterations must be a positive integer, got {value}"
                )));
            }
            cfg.attack.budget.iterations = n;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the base config once per value, reusing the resolved dataset and
/// model, and returns the per-value reports in input order.
pub fn sweep(base: &RunConfig, param: SweepParam, values: &[f64]) -> Result<Vec<RunReport>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(Error::Config(format!("duplicate sweep value {v}")));
        }
    }
    let dataset = resolve_dataset(base)?;
    let segmenter = resolve_segmenter(base)?;
    let classifier = if base.task.kind() == TaskKind::CrossTask {
        Some(resolve_classifier(base, &dataset)?)
    } else {
        None
    };
    let mut reports = Vec::with_capacity(values.len());
    for &v in values {
        let cfg = apply_sweep_value(base, param, v)?;
        reports.push(execute_resolved(
            &cfg,
            &dataset,
            segmenter.as_ref(),
            classifier.as_ref().map(|c| c as &dyn Classifier),
        )?);
    }
    Ok(reports)
}
