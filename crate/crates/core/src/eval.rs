//! Classification and localization metrics, cross-validated CAM threshold
//! selection, and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::{self, ActivationMap};
use crate::dataset::{BBox, LabelVector, Sample};
use crate::error::{Error, Result};
use crate::model::{infer_features, ModelState, RegionPolicy};

/// Rank-based (Mann–Whitney) AUC with tied scores counted as half a win.
/// `None` unless both classes occur.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAucs {
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over the classes whose AUC is defined.
    pub mean: Option<f64>,
}

pub fn class_aucs(scores: &[Vec<f64>], labels: &[&LabelVector], classes: usize) -> ClassAucs {
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|p| p[c]).collect();
            let y: Vec<bool> = labels.iter().map(|l| l.get(c)).collect();
            auc_roc(&s, &y)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    ClassAucs { per_class, mean }
}

/// Inference-time class scores: fused when the region head is enabled,
/// global otherwise.
pub fn score_samples(state: &ModelState, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let policy = RegionPolicy::for_model(state);
    samples
        .par_iter()
        .map(|s| Ok(infer_features(&state.feature_map(&s.image)?, state, &policy).p_total))
        .collect()
}

/// One predicted box (or none) against the ground truth of one class on one
/// image.
#[derive(Clone, Debug, PartialEq)]
pub struct LocPrediction {
    pub class: usize,
    pub predicted: Option<BBox>,
    pub gt: Vec<BBox>,
}

impl LocPrediction {
    /// IoU against the best-matching ground-truth box.
    pub fn best_iou(&self) -> f64 {
        match &self.predicted {
            None => 0.0,
            Some(p) => self.gt.iter().map(|g| iou(p, g)).fold(0.0, f64::max),
        }
    }

    /// Correct when IoU strictly exceeds `t`; a missing prediction never is.
    pub fn correct(&self, t: f64) -> bool {
        self.predicted.is_some() && self.best_iou() > t
    }
}

/// Per-class share of correct predictions at IoU threshold `t`; `None` for
/// classes without ground truth.
pub fn localization_accuracy(predictions: &[LocPrediction], t: f64, classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let cases: Vec<&LocPrediction> = predictions.iter().filter(|p| p.class == c).collect();
            (!cases.is_empty()).then(|| cases.iter().filter(|p| p.correct(t)).count() as f64 / cases.len() as f64)
        })
        .collect()
}

/// Normalized localization map of one ground-truth class on one image,
/// upsampled to image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LocCase {
    pub sample_id: String,
    pub class: usize,
    pub side: usize,
    pub map: Vec<f64>,
    pub degenerate: bool,
    pub gt: Vec<BBox>,
}

impl LocCase {
    pub fn predict(&self, threshold: f64) -> LocPrediction {
        let predicted = if self.degenerate {
            None
        } else {
            cam::component_boxes(&self.map, self.side, threshold).into_iter().next()
        };
        LocPrediction {
            class: self.class,
            predicted,
            gt: self.gt.clone(),
        }
    }
}

/// Normalized localization map of class `c`: averaged head weights when the
/// region head is enabled, the global head alone otherwise.
pub fn model_localization_map(state: &ModelState, fmap: &crate::model::FeatureMap, c: usize) -> ActivationMap {
    let raw = if state.config.rv_enabled {
        cam::localization_map(fmap, &state.head_global, &state.head_rv, c)
    } else {
        cam::class_map(fmap, &state.head_global, c)
    };
    cam::normalize(&raw)
}

/// One case per (image, class with ground-truth boxes), in input order.
pub fn localization_cases(state: &ModelState, samples: &[&Sample]) -> Result<Vec<LocCase>> {
    let per_sample = samples
        .par_iter()
        .map(|s| {
            let mut classes: Vec<usize> = s.gt_boxes.iter().map(|(c, _)| *c).collect();
            classes.sort_unstable();
            classes.dedup();
            if classes.is_empty() {
                return Ok(Vec::new());
            }
            let fmap = state.feature_map(&s.image)?;
            Ok(classes
                .into_iter()
                .map(|c| {
                    let m = model_localization_map(state, &fmap, c);
                    LocCase {
                        sample_id: s.id.clone(),
                        class: c,
                        side: s.image.side(),
                        map: cam::upsample_bilinear(&m, s.image.side()),
                        degenerate: m.degenerate,
                        gt: s.boxes_for(c).copied().collect(),
                    }
                })
                .collect())
        })
        .collect::<Result<Vec<Vec<LocCase>>>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

/// Candidate CAM thresholds 0.05, 0.10, …, 0.95.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| f64::from(i) / 20.0).collect()
}

pub const DEFAULT_CAM_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassThreshold {
    pub class: usize,
    /// Mode of the per-fold choices (ties to the lower value), or the
    /// default when the class has too few cases.
    pub threshold: f64,
    pub fold_thresholds: Vec<f64>,
    pub held_in_accuracy: Vec<f64>,
    pub held_out_accuracy: Vec<f64>,
    pub mean_held_out: Option<f64>,
    pub cases: usize,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSelection {
    pub per_class: Vec<ClassThreshold>,
    /// Every case predicted at the threshold chosen without its own fold.
    pub held_out_predictions: Vec<LocPrediction>,
}

fn accuracy(hits: impl Iterator<Item = bool>) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for h in hits {
        n += 1;
        k += usize::from(h);
    }
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// Per-class CAM threshold chosen by `folds`-fold cross-validation over
/// `cases`, maximizing accuracy at IoU threshold `objective_t`.
///
/// Case `i` of a class (in input order) sits in fold `i mod folds`. Classes
/// with fewer than `folds` cases use [`DEFAULT_CAM_THRESHOLD`].
pub fn select_loc_thresholds(cases: &[LocCase], classes: usize, folds: usize, objective_t: f64) -> Result<ThresholdSelection> {
    if folds < 2 {
        return Err(Error::Config(format!("cross-validation needs at least 2 folds, got {folds}")));
    }
    let grid = threshold_grid();
    let mut per_class = Vec::new();
    let mut held_out_predictions = Vec::new();
    for c in 0..classes {
        let class_cases: Vec<&LocCase> = cases.iter().filter(|k| k.class == c).collect();
        if class_cases.is_empty() {
            continue;
        }
        let preds: Vec<Vec<LocPrediction>> = class_cases
            .par_iter()
            .map(|k| grid.iter().map(|&t| k.predict(t)).collect())
            .collect();
        if class_cases.len() < folds {
            log::warn!(
                "class {c}: {} localization cases for {folds} folds; using threshold {DEFAULT_CAM_THRESHOLD}",
                class_cases.len()
            );
            held_out_predictions.extend(class_cases.iter().map(|k| k.predict(DEFAULT_CAM_THRESHOLD)));
            per_class.push(ClassThreshold {
                class: c,
                threshold: DEFAULT_CAM_THRESHOLD,
                fold_thresholds: Vec::new(),
                held_in_accuracy: Vec::new(),
                held_out_accuracy: Vec::new(),
                mean_held_out: None,
                cases: class_cases.len(),
                fallback: true,
            });
            continue;
        }
        let hits: Vec<Vec<bool>> = preds
            .iter()
            .map(|row| row.iter().map(|p| p.correct(objective_t)).collect())
            .collect();
        let mut fold_choice = Vec::with_capacity(folds);
        let mut held_in = Vec::with_capacity(folds);
        let mut held_out = Vec::with_capacity(folds);
        let mut chosen_for_case = vec![0usize; class_cases.len()];
        for f in 0..folds {
            let mut best = (0usize, f64::NEG_INFINITY);
            for ti in 0..grid.len() {
                let acc = accuracy((0..hits.len()).filter(|i| i % folds != f).map(|i| hits[i][ti]));
                if acc > best.1 {
                    best = (ti, acc);
                }
            }
            let out = accuracy((0..hits.len()).filter(|i| i % folds == f).map(|i| hits[i][best.0]));
            for i in (0..hits.len()).filter(|i| i % folds == f) {
                chosen_for_case[i] = best.0;
            }
            fold_choice.push(best.0);
            held_in.push(best.1);
            held_out.push(out);
        }
        let mut counts = vec![0usize; grid.len()];
        for &ti in &fold_choice {
            counts[ti] += 1;
        }
        let max = *counts.iter().max().expect("non-empty grid");
        let mode = counts.iter().position(|&n| n == max).expect("max exists");
        for (i, &ti) in chosen_for_case.iter().enumerate() {
            held_out_predictions.push(preds[i][ti].clone());
        }
        per_class.push(ClassThreshold {
            class: c,
            threshold: grid[mode],
            fold_thresholds: fold_choice.iter().map(|&ti| grid[ti]).collect(),
            held_in_accuracy: held_in,
            mean_held_out: Some(held_out.iter().sum::<f64>() / folds as f64),
            held_out_accuracy: held_out,
            cases: class_cases.len(),
            fallback: false,
        });
    }
    Ok(ThresholdSelection {
        per_class,
        held_out_predictions,
    })
}

/// IoU thresholds of the localization table.
pub const LOC_IOU_THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub name: String,
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocTable {
    pub iou_thresholds: Vec<f64>,
    /// `[threshold][class]`.
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub mean: Vec<Option<f64>>,
    pub cam_thresholds: Vec<Option<f64>>,
}

impl LocTable {
    pub fn from_predictions(predictions: &[LocPrediction], iou_thresholds: &[f64], classes: usize) -> Self {
        let accuracy: Vec<Vec<Option<f64>>> = iou_thresholds
            .iter()
            .map(|&t| localization_accuracy(predictions, t, classes))
            .collect();
        let mean = accuracy.iter().map(|row| mean_defined(row)).collect();
        LocTable {
            iou_thresholds: iou_thresholds.to_vec(),
            accuracy,
            mean,
            cam_thresholds: vec![None; classes],
        }
    }

    pub fn mean_at(&self, t: f64) -> Option<f64> {
        self.iou_thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-12)
            .and_then(|i| self.mean[i])
    }
}

pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = values.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub auc: Option<ClassAucs>,
    pub auc_references: Vec<ReferenceRow>,
    pub localization: Option<LocTable>,
    /// Reference rows of the localization table, one per IoU threshold.
    pub loc_references: Vec<(String, f64, ReferenceRow)>,
    pub notes: Vec<String>,
    pub config: serde_json::Value,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn cell_text(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    pub fn auc_csv(&self) -> String {
        let mut out = String::new();
        let names = &self.class_names;
        if names.is_empty() {
            out.push_str("model,mean\n");
            return out;
        }
        writeln!(out, "model,{},mean", names.join(",")).unwrap();
        if let Some(a) = &self.auc {
            let cells: Vec<String> = a.per_class.iter().map(|v| cell(*v)).collect();
            writeln!(out, "ours,{},{}", cells.join(","), cell(a.mean)).unwrap();
        }
        for r in &self.auc_references {
            let cells: Vec<String> = (0..names.len()).map(|c| cell(r.per_class.get(c).copied().flatten())).collect();
            writeln!(out, "{},{},{}", r.name, cells.join(","), cell(r.mean)).unwrap();
        }
        out
    }

    pub fn localization_csv(&self) -> String {
        let mut out = String::new();
        let names = &self.class_names;
        if names.is_empty() {
            out.push_str("model,T,mean\n");
            return out;
        }
        writeln!(out, "model,T,{},mean", names.join(",")).unwrap();
        if let Some(l) = &self.localization {
            for (i, t) in l.iou_thresholds.iter().enumerate() {
                let cells: Vec<String> = l.accuracy[i].iter().map(|v| cell(*v)).collect();
                writeln!(out, "ours,{t},{},{}", cells.join(","), cell(l.mean[i])).unwrap();
            }
        }
        for (name, t, r) in &self.loc_references {
            let cells: Vec<String> = (0..names.len()).map(|c| cell(r.per_class.get(c).copied().flatten())).collect();
            writeln!(out, "{name},{t},{},{}", cells.join(","), cell(r.mean)).unwrap();
        }
        out
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        let width = self.class_names.iter().map(|n| n.len()).max().unwrap_or(0).max(12);
        if let Some(a) = &self.auc {
            writeln!(out, "Classification AUC").unwrap();
            for (name, v) in self.class_names.iter().zip(&a.per_class) {
                writeln!(out, "  {name:<width$}  {}", cell_text(*v)).unwrap();
            }
            writeln!(out, "  {:<width$}  {}", "mean", cell_text(a.mean)).unwrap();
            for r in &self.auc_references {
                writeln!(out, "  {:<width$}  {}  (reference)", r.name, cell_text(r.mean)).unwrap();
            }
            out.push('\n');
        }
        if let Some(l) = &self.localization {
            writeln!(out, "Localization accuracy (IoU > T)").unwrap();
            let header: Vec<String> = l.iou_thresholds.iter().map(|t| format!("T={t:<6}")).collect();
            writeln!(out, "  {:<width$}  {}  cam_thr", "class", header.join("  ")).unwrap();
            for (c, name) in self.class_names.iter().enumerate() {
                let cells: Vec<String> = l.accuracy.iter().map(|row| format!("{:<8}", cell_text(row[c]))).collect();
                let thr = l.cam_thresholds.get(c).copied().flatten().map_or("-".into(), |t| format!("{t:.2}"));
                writeln!(out, "  {name:<width$}  {}  {thr}", cells.join("")).unwrap();
            }
            let means: Vec<String> = l.mean.iter().map(|m| format!("{:<8}", cell_text(*m))).collect();
            writeln!(out, "  {:<width$}  {}", "mean", means.join("")).unwrap();
            out.push('\n');
        }
        for n in &self.notes {
            writeln!(out, "note: {n}").unwrap();
        }
        out
    }
}

/// Writes `report.txt`, `report.json` and the CSV of each table present
/// (`auc.csv`, `localization.csv`) into `dir`. Output depends only on the
/// report's contents.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let mut files = vec![("report.txt", report.text()), ("report.json", json)];
    if report.auc.is_some() || report.localization.is_none() {
        files.push(("auc.csv", report.auc_csv()));
    }
    if report.localization.is_some() {
        files.push(("localization.csv", report.localization_csv()));
    }
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
