//! Run reports: persistence (JSON + CSV), aggregate tables, and static
//! overlay renderings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::BinaryMask;
use crate::metrics::EvalRecord;
use crate::prompt::PointPrompt;
use crate::tasks::TaskKind;

pub const SCHEMA_VERSION: u32 = 1;

/// Documented CSV column order for record files.
pub const CSV_COLUMNS: [&str; 9] = [
    "image_id",
    "prompt_row",
    "prompt_col",
    "iou_clean_adv",
    "iou_target_adv",
    "area_clean",
    "area_adv",
    "perturbation_linf",
    "success",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Mean IoU(clean, adv) over non-vacuous records.
    pub miou: f64,
    /// Fraction of non-vacuous records whose success rule fired.
    pub success_rate: f64,
    /// Mean realized L∞ perturbation over non-vacuous records.
    pub mean_linf: f64,
    /// Records excluded because the clean mask was empty.
    pub vacuous_records: usize,
}

/// Recomputes aggregates from raw records; the stored values must match.
pub fn compute_aggregates(records: &[EvalRecord]) -> Result<Aggregates> {
    let live: Vec<&EvalRecord> = records.iter().filter(|r| !r.is_vacuous()).collect();
    if live.is_empty() {
        return Err(Error::validation(
            "all records are vacuous; nothing to aggregate",
        ));
    }
    let n = live.len() as f64;
    Ok(Aggregates {
        miou: live.iter().map(|r| r.iou_clean_adv).sum::<f64>() / n,
        success_rate: live.iter().filter(|r| r.success).count() as f64 / n,
        mean_linf: live.iter().map(|r| r.perturbation_linf).sum::<f64>() / n,
        vacuous_records: records.len() - live.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvInfo {
    pub toolkit_version: String,
}

impl Default for EnvInfo {
    fn default() -> Self {
        Self {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub run_id: String,
    /// Human-readable setting label used as the table row name.
    pub label: String,
    pub task_kind: TaskKind,
    /// The canonical merged run configuration.
    pub config: serde_json::Value,
    pub config_digest: String,
    pub dataset_digest: String,
    pub records: Vec<EvalRecord>,
    pub aggregates: Aggregates,
    /// Per-pair failures (the run continues past them).
    #[serde(default)]
    pub failures: Vec<String>,
    /// Free-form provenance tags (model digests, source task, ...).
    #[serde(default)]
    pub run_tags: std::collections::BTreeMap<String, String>,
    pub env: EnvInfo,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let recomputed = compute_aggregates(&self.records)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        if !close(recomputed.miou, self.aggregates.miou)
            || !close(recomputed.success_rate, self.aggregates.success_rate)
            || !close(recomputed.mean_linf, self.aggregates.mean_linf)
            || recomputed.vacuous_records != self.aggregates.vacuous_records
        {
            return Err(Error::Schema(
                "stored aggregates do not match recomputation from records".into(),
            ));
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    // Rust's shortest round-trip float formatting.
    format!("{v}")
}

/// Serializes records in the documented column order.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.image_id,
            r.prompt.row,
            r.prompt.col,
            fmt_f64(r.iou_clean_adv),
            r.iou_target_adv.map(fmt_f64).unwrap_or_default(),
            r.area_clean,
            r.area_adv,
            fmt_f64(r.perturbation_linf),
            r.success,
        ));
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema("empty records CSV".into()))?;
    if header != CSV_COLUMNS.join(",") {
        return Err(Error::Schema(format!("unexpected CSV header {header:?}")));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != CSV_COLUMNS.len() {
            return Err(Error::Schema(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                CSV_COLUMNS.len(),
                fields.len()
            )));
        }
        let parse_f = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Schema(format!("bad {name} value {s:?}")))
        };
        let parse_u = |s: &str, name: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::Schema(format!("bad {name} value {s:?}")))
        };
        records.push(EvalRecord {
            image_id: fields[0].to_string(),
            prompt: PointPrompt::new(
                parse_u(fields[1], "prompt_row")?,
                parse_u(fields[2], "prompt_col")?,
            ),
            iou_clean_adv: parse_f(fields[3], "iou_clean_adv")?,
            iou_target_adv: if fields[4].is_empty() {
                None
            } else {
                Some(parse_f(fields[4], "iou_target_adv")?)
            },
            area_clean: parse_u(fields[5], "area_clean")?,
            area_adv: parse_u(fields[6], "area_adv")?,
            perturbation_linf: parse_f(fields[7], "perturbation_linf")?,
            success: match fields[8] {
                "true" => true,
                "false" => false,
                other => return Err(Error::Schema(format!("bad success value {other:?}"))),
            },
        });
    }
    Ok(records)
}

/// On-disk JSON envelope; carries a digest of the CSV so partial writes
/// are detected at load time.
#[derive(Serialize, Deserialize)]
struct ReportFile {
    #[serde(flatten)]
    report: RunReport,
    records_csv_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Writes `report.json` and `records.csv` under `dir`.
pub fn persist(report: &RunReport, dir: impl AsRef<Path>) -> Result<()> {
    report.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let csv = records_to_csv(&report.records);
    std::fs::write(dir.join("records.csv"), &csv)?;
    let file = ReportFile {
        report: report.clone(),
        records_csv_sha256: sha256_hex(csv.as_bytes()),
    };
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&file)?,
    )?;
    Ok(())
}

/// Loads and fully re-verifies a stored report (schema, CSV digest,
/// aggregate recomputation).
pub fn load(dir: impl AsRef<Path>) -> Result<RunReport> {
    let dir = dir.as_ref();
    let json = std::fs::read_to_string(dir.join("report.json"))
        .map_err(|e| Error::Schema(format!("missing report.json in {}: {e}", dir.display())))?;
    let file: ReportFile = serde_json::from_str(&json)
        .map_err(|e| Error::Schema(format!("report.json does not match schema: {e}")))?;
    let csv = std::fs::read_to_string(dir.join("records.csv"))
        .map_err(|e| Error::Schema(format!("missing records.csv: {e}")))?;
    if sha256_hex(csv.as_bytes()) != file.records_csv_sha256 {
        return Err(Error::Schema(
            "records.csv digest mismatch (partial or tampered write)".into(),
        ));
    }
    let csv_records = records_from_csv(&csv)?;
    if csv_records.len() != file.report_len() {
        return Err(Error::Schema("records.csv row count mismatch".into()));
    }
    file.report.validate()?;
    Ok(file.report)
}

impl ReportFile {
    fn report_len(&self) -> usize {
        self.report.records.len()
    }
}

/// Overlay styling constants (fixed for deterministic bytes).
const MASK_TINT: [f64; 3] = [0.95, 0.15, 0.15];
const MASK_ALPHA: f64 = 0.45;
const MARKER_COLOR: [f64; 3] = [0.1, 0.95, 0.1];
/// Star-shaped prompt marker offsets.
const MARKER_OFFSETS: [(isize, isize); 13] = [
    (0, 0),
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (2, 0),
    (-2, 0),
    (0, 2),
    (0, -2),
    (1, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
];

/// Renders the image with the mask tinted and the prompt marked; returns
/// the PNG bytes (always RGB).
pub fn render_overlay_bytes(
    image: &Image,
    mask: &BinaryMask,
    prompt: PointPrompt,
) -> Result<Vec<u8>> {
    let (h, w) = image.shape_hw();
    if mask.shape_hw() != (h, w) {
        return Err(Error::shape(
            format!("{:?}", (h, w)),
            format!("{:?}", mask.shape_hw()),
        ));
    }
    if !prompt.in_bounds(h, w) {
        return Err(Error::validation("prompt marker out of bounds"));
    }
    let mut rgb = ndarray::Array3::zeros((3, h, w));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let src = if image.channels() == 1 { 0 } else { ch };
                let mut v = image.data()[[src, r, c]];
                if mask.get(r, c) {
                    v = (1.0 - MASK_ALPHA) * v + MASK_ALPHA * MASK_TINT[ch];
                }
                rgb[[ch, r, c]] = v;
            }
        }
    }
    for (dr, dc) in MARKER_OFFSETS {
        let rr = prompt.row as isize + dr;
        let cc = prompt.col as isize + dc;
        if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
            for ch in 0..3 {
                rgb[[ch, rr as usize, cc as usize]] = MARKER_COLOR[ch];
            }
        }
    }
    Image::new(format!("{}#overlay", image.id()), rgb)?.to_png_bytes()
}

/// Renders and writes the overlay PNG.
pub fn render_overlay(
    image: &Image,
    mask: &BinaryMask,
    prompt: PointPrompt,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, render_overlay_bytes(image, mask, prompt)?)?;
    Ok(())
}

/// Aggregate table over several runs of the same task kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub task_kind: TaskKind,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub miou: f64,
    pub success_rate: f64,
    pub mean_linf: f64,
    pub records: usize,
}

pub fn tabulate(reports: &[RunReport]) -> Result<Table> {
    let first = reports
        .first()
        .ok_or_else(|| Error::validation("tabulate needs at least one report"))?;
    let kind = first.task_kind;
    if reports.iter().any(|r| r.task_kind != kind) {
        return Err(Error::validation(
            "cannot tabulate reports of mixed task kinds",
        ));
    }
    Ok(Table {
        task_kind: kind,
        rows: reports
            .iter()
            .map(|r| TableRow {
                label: r.label.clone(),
                miou: r.aggregates.miou,
                success_rate: r.aggregates.success_rate,
                mean_linf: r.aggregates.mean_linf,
                records: r.records.len(),
            })
            .collect(),
    })
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,miou,success_rate,mean_linf,records\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.label,
                fmt_f64(row.miou),
                fmt_f64(row.success_rate),
                fmt_f64(row.mean_linf),
                row.records
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let label_width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(["setting".len()])
            .max()
            .unwrap_or(8);
        let mut out = format!(
            "{:<label_width$}  {:>8}  {:>12}  {:>10}  {:>7}\n",
            "setting", "mIoU", "success_rate", "mean_linf", "records"
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{:<label_width$}  {:>8.4}  {:>12.4}  {:>10.6}  {:>7}\n",
                row.label, row.miou, row.success_rate, row.mean_linf, row.records
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn record(id: &str, iou: f64, area_clean: usize) -> EvalRecord {
        EvalRecord {
            image_id: id.into(),
            prompt: PointPrompt::new(1, 2),
            iou_clean_adv: iou,
            iou_target_adv: if iou > 0.5 { Some(0.25) } else { None },
            area_clean,
            area_adv: 3,
            perturbation_linf: 8.0 / 255.0,
            success: iou < 0.1,
        }
    }

    fn report(records: Vec<EvalRecord>) -> RunReport {
        let aggregates = compute_aggregates(&records).unwrap();
        RunReport {
            schema_version: SCHEMA_VERSION,
            run_id: "run-1".into(),
            label: "pgd-10/clipmse".into(),
            task_kind: TaskKind::Removal,
            config: serde_json::json!({"attacker": "pgd"}),
            config_digest: "d".repeat(64),
            dataset_digest: "e".repeat(64),
            records,
            aggregates,
            failures: Vec::new(),
            run_tags: Default::default(),
            env: EnvInfo::default(),
            wall_time_s: 1.25,
        }
    }

    #[test]
    fn persist_load_round_trip() {
        let rep = report(vec![record("a", 0.05, 40), record("b", 0.8, 55)]);
        let dir = tempfile::tempdir().unwrap();
        persist(&rep, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.aggregates, rep.aggregates);
        assert_eq!(back.run_id, rep.run_id);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let records = vec![record("a", 0.123456789012345, 40), record("b", 1.0 / 3.0, 7)];
        let csv = records_to_csv(&records);
        let back = records_from_csv(&csv).unwrap();
        for (x, y) in records.iter().zip(back.iter()) {
            assert_eq!(x.iou_clean_adv, y.iou_clean_adv);
            assert_eq!(x.iou_target_adv, y.iou_target_adv);
            assert_eq!(x.perturbation_linf, y.perturbation_linf);
        }
    }

    #[test]
    fn tampered_aggregates_detected_on_load() {
        let rep = report(vec![record("a", 0.05, 40)]);
        let dir = tempfile::tempdir().unwrap();
        persist(&rep, dir.path()).unwrap();
        // Corrupt the CSV.
        let p = dir.path().join("records.csv");
        let mut txt = std::fs::read_to_string(&p).unwrap();
        txt.push_str("z,1,1,0.5,,10,10,0.01,false\n");
        std::fs::write(&p, txt).unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn missing_field_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("report.json"),
            "{\"schema_version\": 1}",
        )
        .unwrap();
        std::fs::write(dir.path().join("records.csv"), "").unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn aggregates_match_recomputation_exactly() {
        let rep = report(vec![record("a", 0.5, 10), record("b", 0.25, 20)]);
        let again = compute_aggregates(&rep.records).unwrap();
        assert_eq!(rep.aggregates, again);
    }

    #[test]
    fn vacuous_records_are_excluded() {
        let records = vec![record("a", 1.0, 0), record("b", 0.5, 10)];
        let agg = compute_aggregates(&records).unwrap();
        assert_eq!(agg.vacuous_records, 1);
        assert_eq!(agg.miou, 0.5);
    }

    #[test]
    fn overlay_bytes_are_deterministic_and_respect_empty_mask() {
        let image = Image::new("x", Array3::from_elem((3, 8, 8), 0.5)).unwrap();
        let empty = BinaryMask::zeros(8, 8);
        let p = PointPrompt::new(4, 4);
        let a = render_overlay_bytes(&image, &empty, p).unwrap();
        let b = render_overlay_bytes(&image, &empty, p).unwrap();
        assert_eq!(a, b);
        // Empty mask: only the marker pixels differ from the base image.
        let rendered = Image::from_png_bytes("r", &a).unwrap();
        let mut differing = 0;
        for r in 0..8 {
            for c in 0..8 {
                if (0..3).any(|ch| {
                    (rendered.data()[[ch, r, c]] - image.data()[[ch, r, c]]).abs() > 1.0 / 255.0
                }) {
                    differing += 1;
                }
            }
        }
        assert_eq!(differing, MARKER_OFFSETS.len());
    }

    #[test]
    fn full_mask_tints_every_pixel() {
        let image = Image::new("x", Array3::from_elem((3, 8, 8), 0.5)).unwrap();
        let full = BinaryMask::new(Array2::from_elem((8, 8), true));
        let bytes = render_overlay_bytes(&image, &full, PointPrompt::new(0, 0)).unwrap();
        let rendered = Image::from_png_bytes("r", &bytes).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let near_marker = MARKER_OFFSETS
                    .iter()
                    .any(|&(dr, dc)| dr == r as isize && dc == c as isize);
                if !near_marker {
                    assert!(
                        (rendered.data()[[0, r, c]] - image.data()[[0, r, c]]).abs() > 0.05,
                        "pixel ({r},{c}) untinted"
                    );
                }
            }
        }
    }

    #[test]
    fn tabulate_rejects_mixed_kinds() {
        let a = report(vec![record("a", 0.05, 40)]);
        let mut b = report(vec![record("b", 0.5, 40)]);
        b.task_kind = TaskKind::Enlarge;
        assert!(tabulate(&[a.clone(), b]).is_err());
        let single = tabulate(&[a]).unwrap();
        assert_eq!(single.rows.len(), 1);
    }

    #[test]
    fn table_formats_agree_on_values() {
        let a = report(vec![record("a", 0.05, 40)]);
        let t = tabulate(&[a]).unwrap();
        let csv = t.to_csv();
        let txt = t.to_text();
        // The CSV carries full precision; the text table rounds to 4
        // decimals. Compare at text precision.
        let csv_miou: f64 = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert!(txt.contains(&format!("{csv_miou:.4}")));
    }
}
