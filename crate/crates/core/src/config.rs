//! Whole-run configuration: validated up front, canonicalized, digested,
//! and embedded verbatim in the report for provenance.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::tasks::{TaskKind, TaskSpec};

/// Where the benchmark dataset comes from: a directory on disk or
/// deterministic regeneration from a config. Exactly one must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<DatasetConfig>,
}

/// Which segmenter backend to attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSel {
    /// Bundled toy segmenter loaded from a checkpoint file.
    Toy { checkpoint: PathBuf },
    /// Externally registered backend, looked up by registration name.
    Adapter {
        adapter: String,
        #[serde(default)]
        options: serde_json::Value,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSel,
    pub model: ModelSel,
    pub task: TaskSpec,
    pub attack: AttackConfig,
    /// Surrogate classifier checkpoint for cross-task runs; a fresh
    /// surrogate is trained deterministically when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Run-level seed: evaluation prompts, target placement, per-pair
    /// attack seeds all derive from it.
    #[serde(default)]
    pub seed: u64,
    /// How many pairs get overlay renderings written alongside the report.
    #[serde(default = "default_overlays")]
    pub overlays: usize,
}

fn default_workers() -> usize {
    1
}

fn default_overlays() -> usize {
    4
}

impl RunConfig {
    /// Validates the configuration as a whole before any computation.
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.path, &self.dataset.generate) {
            (Some(_), None) | (None, Some(_)) => {}
            (None, None) => {
                return Err(Error::Config(
                    "dataset: set exactly one of `path` or `generate` (both missing)".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "dataset: set exactly one of `path` or `generate` (both present)".into(),
                ))
            }
        }
        self.task.validate()?;
        self.attack.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }

        let loss = self.attack.loss.kind;
        let compatible = match self.task.kind() {
            TaskKind::Removal | TaskKind::CrossPrompt | TaskKind::CrossTask => {
                matches!(loss, LossKind::MseRemoval | LossKind::ClipmseRemoval)
            }
            TaskKind::Enlarge => matches!(loss, LossKind::ClipmseEnlarge),
            _ => matches!(loss, LossKind::RegionTarget),
        };
        if !compatible {
            return Err(Error::Config(format!(
                "loss kind {loss:?} is incompatible with task {:?}",
                self.task.kind()
            )));
        }
        if self.attack.loss.target_mask.is_some() {
            return Err(Error::Config(
                "target masks are built by the task at run time; do not set one in the config"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Canonical JSON value (struct field order, no incidental formatting).
    pub fn canonical(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// Digest over the canonicalized contents.
    pub fn digest(&self) -> Result<String> {
        let json = serde_json::to_string(&self.canonical()?)?;
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            s.push_str(&format!("{b:02x}"));
        }
        Ok(s)
    }

    /// Row label for tables: attacker, iterations, loss, ε, plus the
    /// task-specific knob that sweeps vary.
    pub fn label(&self) -> String {
        let att = match self.attack.attacker {
            crate::attacks::Attacker::Fgsm => "fgsm".to_string(),
            crate::attacks::Attacker::Pgd => format!("pgd-{}", self.attack.budget.iterations),
        };
        let loss = match self.attack.loss.kind {
            LossKind::MseRemoval => "mse",
            LossKind::ClipmseRemoval => "clipmse",
            LossKind::ClipmseEnlarge => "clipmse-enlarge",
            LossKind::RegionTarget => "region-target",
        };
        let mut label = format!("{att}/{loss}/eps={:.6}", self.attack.budget.epsilon);
        if let TaskSpec::CrossPrompt { k, .. } = &self.task {
            label.push_str(&format!("/K={k}"));
        }
        label
    }
}
