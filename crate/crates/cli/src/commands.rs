use std::fmt::Write as _;
use std::path::Path;

use lesionloc::dataset::{
    generate_synthetic, glyph_class_names, load_manifest, read_class_names, split_by_patient, write_manifest,
    ManifestPaths, Sample, SplitSpec,
};
use lesionloc::eval::{
    class_aucs, emit_report, localization_cases, model_localization_map, score_samples, select_loc_thresholds,
    ClassThreshold, EvalReport, LocTable, ReferenceRow,
};
use lesionloc::mining::{triplet_for_anchor, window_len, CurriculumConfig, MiningCorpus, PoolSet};
use lesionloc::model::{infer_features, ModelConfig, ModelState, RegionPolicy};
use lesionloc::phash::{hamming, HashCache};
use lesionloc::train::{train_with_observer, write_step_csv};
use lesionloc::{cam, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::*;
use crate::layout::OutDir;
use crate::overlay::{render_overlays, Overlay};
use crate::CliError;

pub const SPLIT_FILE: &str = "split.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Fractions used when a dataset directory carries no split file.
const DEFAULT_FRACTIONS: (f64, f64) = (0.7, 0.15);

pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn load(dir: &Path, resolution: usize) -> Result<Self, CliError> {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("dataset directory {} does not exist", dir.display())));
        }
        let classes = read_class_names(&dir.join("classes.txt"))?;
        let loaded = load_manifest(&ManifestPaths::in_dir(dir), &classes, resolution)?;
        if !loaded.missing.is_empty() {
            log::warn!("{} manifest rows skipped for missing images", loaded.missing.len());
        }
        let samples = loaded.samples;
        let split_path = dir.join(SPLIT_FILE);
        let split = if split_path.exists() {
            let text = std::fs::read_to_string(&split_path).map_err(|e| CliError::io(&split_path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", split_path.display())))?
        } else {
            log::warn!("{} not found; using a patient split with seed 0", split_path.display());
            split_by_patient(&samples, DEFAULT_FRACTIONS, 0)?
        };
        split.check_disjoint(&samples)?;
        Ok(Dataset { classes, samples, split })
    }

    pub fn select(&self, which: SplitName) -> Result<Vec<&Sample>, CliError> {
        let [train, val, test] = self.split.partition(&self.samples)?;
        Ok(match which {
            SplitName::Train => train,
            SplitName::Val => val,
            SplitName::Test => test,
            SplitName::All => self.samples.iter().collect(),
        })
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Usage(format!("missing required {what} path")));
    }
    if !path.exists() {
        return Err(CliError::Usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ModelState, CliError> {
    require_file(path, "checkpoint")?;
    Ok(ModelState::load(path)?)
}

fn check_classes(state: &ModelState, ds: &Dataset) -> Result<(), CliError> {
    if state.config.classes != ds.classes.len() {
        return Err(CliError::Usage(format!(
            "checkpoint has {} classes but the dataset lists {}",
            state.config.classes,
            ds.classes.len()
        )));
    }
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

pub fn gen_data(cfg: &GenDataConfig, out: &OutDir) -> Result<String, CliError> {
    let synthetic = cfg.synthetic();
    let samples = generate_synthetic(&synthetic, cfg.seed)?;
    let names = glyph_class_names(cfg.classes);
    write_manifest(out.root(), &samples, &names)?;
    let split = split_by_patient(&samples, (cfg.train_frac, cfg.val_frac), cfg.seed)?;
    out.write(SPLIT_FILE, json(&split))?;
    out.write(RUN_CONFIG_FILE, RunConfig::GenData(cfg.clone()).to_json())?;
    let boxes: usize = samples.iter().map(|s| s.gt_boxes.len()).sum();
    Ok(format!(
        "wrote {} samples ({} boxes, classes: {}) to {}; split {}/{}/{}",
        samples.len(),
        boxes,
        names.join(", "),
        out.root().display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    ))
}

pub fn train(cfg: &TrainRunConfig, out: &OutDir) -> Result<String, CliError> {
    require_file(&cfg.data, "dataset directory")?;
    let ds = Dataset::load(&cfg.data, cfg.image_size)?;
    let [tr, va, _] = ds.split.partition(&ds.samples)?;
    out.write(RUN_CONFIG_FILE, RunConfig::Train(cfg.clone()).to_json())?;
    out.write(SPLIT_FILE, json(&ds.split))?;
    let cache = if cfg.train.use_dl {
        let dir = out.sub("cache")?;
        Some(HashCache::load_or_build(&dir.join("phash.csv"), &ds.samples)?)
    } else {
        None
    };
    let model = ModelConfig::new(ds.classes.len(), cfg.backbone.config(cfg.image_size));
    let ckpt_dir = out.checkpoints()?;
    let outcome = train_with_observer(&tr, &va, cache.as_ref(), model, &cfg.train, |rec, state| {
        state.save(&ckpt_dir.join(format!("epoch_{:03}.ckpt", rec.epoch)))
    })?;
    outcome.best.save(&ckpt_dir.join("best.ckpt"))?;
    outcome.last.save(&ckpt_dir.join("last.ckpt"))?;
    let logs = out.logs()?;
    let mut log_csv = Vec::new();
    outcome.log.write_csv(&mut log_csv).map_err(|e| CliError::io(&logs, e))?;
    out.write("logs/train_log.csv", log_csv)?;
    out.write("logs/train_log.json", json(&outcome.log))?;
    let mut steps = Vec::new();
    write_step_csv(&outcome.steps, &mut steps).map_err(|e| CliError::io(&logs, e))?;
    out.write("logs/steps.csv", steps)?;
    let best = &outcome.log.epochs[outcome.log.best_epoch];
    Ok(format!(
        "trained {} epochs on {} samples; best epoch {} (val mean AUC {}); checkpoint {}",
        outcome.log.epochs.len(),
        tr.len(),
        best.epoch,
        best.val_mean_auc.map_or("n/a".into(), |a| format!("{a:.4}")),
        ckpt_dir.join("best.ckpt").display()
    ))
}

fn reference_row(r: &ReferenceSpec) -> ReferenceRow {
    ReferenceRow {
        name: r.name.clone(),
        per_class: r.per_class.clone(),
        mean: r.mean,
    }
}

pub fn eval_cls(cfg: &EvalClsConfig, out: &OutDir) -> Result<String, CliError> {
    require_file(&cfg.data, "dataset directory")?;
    let state = load_checkpoint(&cfg.checkpoint)?;
    let ds = Dataset::load(&cfg.data, state.config.backbone.input_size)?;
    check_classes(&state, &ds)?;
    let samples = ds.select(cfg.split)?;
    let scores = score_samples(&state, &samples)?;
    let labels: Vec<_> = samples.iter().map(|s| &s.labels).collect();
    let aucs = class_aucs(&scores, &labels, ds.classes.len());
    let notes = aucs
        .per_class
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_none())
        .map(|(c, _)| format!("{}: AUC undefined (single-class labels), excluded from the mean", ds.classes[c]))
        .collect();
    let mean = aucs.mean;
    let report = EvalReport {
        class_names: ds.classes.clone(),
        auc: Some(aucs),
        auc_references: cfg.references.iter().map(reference_row).collect(),
        notes,
        config: serde_json::to_value(RunConfig::EvalCls(cfg.clone())).expect("config serializes"),
        ..EvalReport::default()
    };
    let dir = out.sub("reports/cls")?;
    emit_report(&report, &dir)?;
    let mut csv = format!("sample_id,{}\n", ds.classes.join(","));
    for (s, p) in samples.iter().zip(&scores) {
        let cells: Vec<String> = p.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(csv, "{},{}", s.id, cells.join(",")).expect("write to String");
    }
    out.write("reports/cls/scores.csv", csv)?;
    out.write(RUN_CONFIG_FILE, RunConfig::EvalCls(cfg.clone()).to_json())?;
    Ok(format!(
        "{} samples; mean AUC {}; report in {}",
        samples.len(),
        mean.map_or("n/a".into(), |a| format!("{a:.4}")),
        dir.display()
    ))
}

pub fn eval_loc(cfg: &EvalLocConfig, out: &OutDir) -> Result<String, CliError> {
    require_file(&cfg.data, "dataset directory")?;
    if cfg.iou_thresholds.is_empty() {
        return Err(CliError::Usage("--T needs at least one IoU threshold".into()));
    }
    let state = load_checkpoint(&cfg.checkpoint)?;
    let ds = Dataset::load(&cfg.data, state.config.backbone.input_size)?;
    check_classes(&state, &ds)?;
    let samples = ds.select(cfg.split)?;
    let cases = localization_cases(&state, &samples)?;
    let sel = select_loc_thresholds(&cases, ds.classes.len(), cfg.folds, cfg.objective_t)?;
    let mut table = LocTable::from_predictions(&sel.held_out_predictions, &cfg.iou_thresholds, ds.classes.len());
    let mut notes = Vec::new();
    for ct in &sel.per_class {
        table.cam_thresholds[ct.class] = Some(ct.threshold);
        if ct.fallback {
            notes.push(format!(
                "{}: {} boxed images for {} folds; default CAM threshold used",
                ds.classes[ct.class], ct.cases, cfg.folds
            ));
        }
    }
    for (c, name) in ds.classes.iter().enumerate() {
        if !sel.per_class.iter().any(|ct| ct.class == c) {
            notes.push(format!("{name}: no ground-truth boxes, excluded"));
        }
    }
    let report = EvalReport {
        class_names: ds.classes.clone(),
        localization: Some(table.clone()),
        loc_references: cfg
            .references
            .iter()
            .map(|(t, r)| (r.name.clone(), *t, reference_row(r)))
            .collect(),
        notes,
        config: serde_json::to_value(RunConfig::EvalLoc(cfg.clone())).expect("config serializes"),
        ..EvalReport::default()
    };
    let dir = out.sub("reports/loc")?;
    emit_report(&report, &dir)?;
    out.write("reports/loc/thresholds.json", json(&sel.per_class))?;
    out.write(RUN_CONFIG_FILE, RunConfig::EvalLoc(cfg.clone()).to_json())?;
    let means: Vec<String> = table
        .iou_thresholds
        .iter()
        .zip(&table.mean)
        .map(|(t, m)| format!("T={t}: {}", m.map_or("n/a".into(), |a| format!("{a:.4}"))))
        .collect();
    Ok(format!("{} boxed cases; mean accuracy {}; report in {}", cases.len(), means.join(", "), dir.display()))
}

fn caption_name(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

pub fn localize(cfg: &LocalizeConfig, out: &OutDir) -> Result<String, CliError> {
    require_file(&cfg.data, "dataset directory")?;
    let state = load_checkpoint(&cfg.checkpoint)?;
    let ds = Dataset::load(&cfg.data, state.config.backbone.input_size)?;
    check_classes(&state, &ds)?;
    let mut thresholds = vec![cfg.cam_threshold; ds.classes.len()];
    if let Some(path) = &cfg.thresholds {
        require_file(path, "thresholds file")?;
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let per_class: Vec<ClassThreshold> =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for ct in per_class {
            if let Some(t) = thresholds.get_mut(ct.class) {
                *t = ct.threshold;
            }
        }
    }
    let mut samples = ds.select(cfg.split)?;
    if let Some(n) = cfg.limit {
        samples.truncate(n);
    }
    let policy = RegionPolicy::for_model(&state);
    let overlays_dir = out.overlays()?;
    let mut csv = String::from("image_id,class,score,x,y,w,h,gt\n");
    let mut written = 0usize;
    for s in &samples {
        let fmap = state.feature_map(&s.image)?;
        let inf = infer_features(&fmap, &state, &policy);
        let mut classes: Vec<usize> = inf.predicted.indices().chain(s.gt_boxes.iter().map(|(c, _)| *c)).collect();
        classes.sort_unstable();
        classes.dedup();
        let side = s.image.side();
        let mut maps = Vec::new();
        for &c in &classes {
            let m = model_localization_map(&state, &fmap, c);
            let up = cam::upsample_bilinear(&m, side);
            let predicted = if m.degenerate {
                None
            } else {
                cam::component_boxes(&up, side, thresholds[c]).into_iter().next()
            };
            let has_gt = s.gt_boxes.iter().any(|(gc, _)| *gc == c);
            match &predicted {
                Some(b) => writeln!(csv, "{},{},{:.6},{},{},{},{},{}", s.id, ds.classes[c], inf.p_total[c], b.x, b.y, b.w, b.h, u8::from(has_gt)),
                None => writeln!(csv, "{},{},{:.6},,,,,{}", s.id, ds.classes[c], inf.p_total[c], u8::from(has_gt)),
            }
            .expect("write to String");
            maps.push((c, up, predicted));
        }
        let stem = Path::new(&s.id).file_stem().map_or_else(|| s.id.clone(), |x| x.to_string_lossy().into_owned());
        let items: Vec<(String, Overlay<'_>)> = maps
            .iter()
            .map(|(c, up, predicted)| {
                (
                    format!("{stem}_{}", caption_name(&ds.classes[*c])),
                    Overlay {
                        image: &s.image,
                        map: Some(up),
                        predicted: *predicted,
                        gt: s.boxes_for(*c).copied().collect(),
                        caption: format!("{} P={:.2}", caption_name(&ds.classes[*c]), inf.p_total[*c]),
                    },
                )
            })
            .collect();
        written += render_overlays(&items, &overlays_dir, cfg.scale)?.len();
    }
    out.write("reports/predicted_boxes.csv", csv)?;
    out.write(RUN_CONFIG_FILE, RunConfig::Localize(cfg.clone()).to_json())?;
    Ok(format!("{} overlays for {} images in {}", written, samples.len(), overlays_dir.display()))
}

pub fn mine_inspect(cfg: &MineInspectConfig, out: &OutDir) -> Result<String, CliError> {
    require_file(&cfg.data, "dataset directory")?;
    let ds = Dataset::load(&cfg.data, cfg.image_size)?;
    let samples = ds.select(cfg.split)?;
    let owned: Vec<Sample> = samples.iter().map(|s| (*s).clone()).collect();
    let cache = HashCache::build(&owned);
    let corpus = MiningCorpus::from_samples(&samples, &cache)?;
    let anchor = match &cfg.anchor {
        Some(id) => samples
            .iter()
            .position(|s| &s.id == id)
            .ok_or_else(|| CliError::Usage(format!("anchor {id} is not in the {:?} split", cfg.split)))?,
        None => samples
            .iter()
            .position(|s| !s.labels.is_no_finding())
            .ok_or_else(|| CliError::Usage("no labelled sample to use as anchor".into()))?,
    };
    if samples[anchor].labels.is_no_finding() {
        return Err(CliError::Core(Error::Schema(format!(
            "anchor {} has no positive label and cannot be mined",
            samples[anchor].id
        ))));
    }
    let pools = PoolSet::build(&corpus, &cfg.pool, cfg.seed);
    let pool = pools.get(anchor).expect("labelled anchors have pools");
    let label_names = |s: &Sample| -> String {
        let n: Vec<&str> = s.labels.indices().map(|c| ds.classes[c].as_str()).collect();
        if n.is_empty() {
            "No Finding".into()
        } else {
            n.join("|")
        }
    };

    let mut csv = String::from("role,rank,sample_id,labels,kind,distance\n");
    for (r, p) in pool.positives.iter().enumerate() {
        let s = samples[p.index];
        writeln!(csv, "positive,{r},{},{},{:?},{}", s.id, label_names(s), p.kind, p.distance).expect("write to String");
    }
    for (r, n) in pool.negatives.iter().enumerate() {
        let s = samples[n.index];
        writeln!(csv, "negative,{r},{},{},disjoint,{}", s.id, label_names(s), n.distance).expect("write to String");
    }
    out.write("reports/mining/pool.csv", csv)?;

    let curriculum = CurriculumConfig {
        ramp_epochs: cfg.ramp_epochs,
        floor_frac: cfg.curriculum_floor,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trip = String::from("anchor,positive,negative,positive_distance,negative_distance\n");
    for _ in 0..cfg.triplets {
        let Some(t) = triplet_for_anchor(pool, cfg.epoch, &curriculum, &mut rng) else {
            break;
        };
        writeln!(
            trip,
            "{},{},{},{},{}",
            samples[t.anchor].id,
            samples[t.positive].id,
            samples[t.negative].id,
            hamming(corpus.hashes[t.anchor], corpus.hashes[t.positive]),
            hamming(corpus.hashes[t.anchor], corpus.hashes[t.negative])
        )
        .expect("write to String");
    }
    out.write("reports/mining/triplets.csv", trip)?;
    out.write(RUN_CONFIG_FILE, RunConfig::MineInspect(cfg.clone()).to_json())?;
    let exact = pool.positives.len() - pool.partial_count();
    Ok(format!(
        "anchor {} [{}]: {} positives ({} exact, {} partial), {} negatives; epoch {} windows: {} positives, {} negatives",
        samples[anchor].id,
        label_names(samples[anchor]),
        pool.positives.len(),
        exact,
        pool.partial_count(),
        pool.negatives.len(),
        cfg.epoch,
        window_len(pool.positives.len(), cfg.epoch, &curriculum),
        window_len(pool.negatives.len(), cfg.epoch, &curriculum)
    ))
}
