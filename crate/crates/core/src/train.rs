//! Joint training: global BCE on every anchor, a triplet hinge over mined
//! triplets, and region verification on CAM-masked anchor features, summed
//! and minimized with Adam. The model with the best validation mean AUC is
//! kept.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam;
use crate::dataset::{augment_image, AugmentConfig, GrayImage, LabelVector, Sample};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{bce_with_grad, triplet_hinge_grad, Distance, LossBreakdown};
use crate::mining::{triplet_for_anchor, CurriculumConfig, MiningCorpus, PoolConfig, PoolSet};
use crate::model::{Backbone, Gradients, ModelConfig, ModelState, TensorRole};
use crate::phash::{phash, HashCache};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// First epoch (0-based) trained at the decayed rate.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub margin: f64,
    pub cam_threshold: f64,
    pub ramp_epochs: usize,
    /// Smallest share of a pool kept eligible once the ramp has finished.
    pub curriculum_floor: f64,
    pub seed: u64,
    pub use_dl: bool,
    pub use_rv: bool,
    pub distance: Distance,
    pub pool: PoolConfig,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 30,
            batch_size: 32,
            lr_initial: 1e-3,
            lr_decay_epoch: 15,
            lr_decay_factor: 10.0,
            margin: 0.5,
            cam_threshold: 0.8,
            ramp_epochs: 10,
            curriculum_floor: 0.1,
            seed: 0,
            use_dl: true,
            use_rv: true,
            distance: Distance::L2,
            pool: PoolConfig::default(),
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.max_epochs == 0 {
            return bad("max_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.lr_initial > 0.0) {
            return bad("lr_initial");
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor");
        }
        if !(self.margin > 0.0) {
            return bad("margin");
        }
        if !(self.cam_threshold > 0.0 && self.cam_threshold < 1.0) {
            return Err(Error::Config("cam_threshold must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.curriculum_floor) {
            return Err(Error::Config("curriculum_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Step-wise schedule: `lr_initial` before `lr_decay_epoch`, divided by
    /// `lr_decay_factor` from then on.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr_initial / self.lr_decay_factor
        } else {
            self.lr_initial
        }
    }

    pub fn curriculum(&self) -> CurriculumConfig {
        CurriculumConfig {
            ramp_epochs: self.ramp_epochs,
            floor_frac: self.curriculum_floor,
        }
    }

    pub fn terms(&self) -> LossTerms {
        LossTerms {
            triplet: self.use_dl,
            region: self.use_rv,
            margin: self.margin,
            distance: self.distance,
            cam_threshold: self.cam_threshold,
        }
    }
}

/// Which terms a step computes, and their parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub triplet: bool,
    pub region: bool,
    pub margin: f64,
    pub distance: Distance,
    pub cam_threshold: f64,
}

/// One batch element, already augmented.
#[derive(Clone, Debug)]
pub struct StepItem {
    pub image: GrayImage,
    pub labels: LabelVector,
    /// Positive and negative images of the anchor's triplet.
    pub triplet: Option<(GrayImage, GrayImage)>,
}

struct ItemOutput {
    grads: Gradients,
    parts: LossBreakdown,
}

fn item_loss_and_grads(
    state: &ModelState,
    item: &StepItem,
    terms: &LossTerms,
    scale_global: f64,
    scale_triplet: f64,
    scale_region: f64,
) -> Result<ItemOutput> {
    let mut grads = state.zero_grads();
    let (fmap, tape) = state.backbone.forward_tape(&item.image)?;
    let emb = fmap.pooled();

    let (bce, gz) = bce_with_grad(&state.head_global.logits(&emb), &item.labels);
    let gz: Vec<f64> = gz.iter().map(|g| g * scale_global).collect();
    let g_emb = state.head_global.backward(&emb, &gz, &mut grads.head_global);
    let mut g_fmap = fmap.unpool_gradient(&g_emb);

    let mut region = 0.0;
    if terms.region && !item.labels.is_no_finding() {
        let merged = cam::normalize(&cam::merged_map(&fmap, &state.head_global, &item.labels.indices().collect::<Vec<_>>()));
        let mask = cam::extract_box(&merged, terms.cam_threshold);
        let masked = cam::mask_features(&fmap, &mask);
        let emb_m = masked.pooled();
        let (l, gr) = bce_with_grad(&state.head_rv.logits(&emb_m), &item.labels);
        region = l;
        let gr: Vec<f64> = gr.iter().map(|g| g * scale_region).collect();
        let g_emb_m = state.head_rv.backward(&emb_m, &gr, &mut grads.head_rv);
        // the box is an index set: gradient reaches only the cells it kept
        g_fmap.add_assign(&cam::mask_features(&masked.unpool_gradient(&g_emb_m), &mask));
    }

    let mut triplet = 0.0;
    if let (true, Some((pos, neg))) = (terms.triplet, &item.triplet) {
        let (fp, tape_p) = state.backbone.forward_tape(pos)?;
        let (fneg, tape_n) = state.backbone.forward_tape(neg)?;
        let tg = triplet_hinge_grad(&emb, &fp.pooled(), &fneg.pooled(), terms.margin, terms.distance);
        triplet = tg.loss;
        if tg.loss > 0.0 {
            let s = |v: &[f64]| v.iter().map(|g| g * scale_triplet).collect::<Vec<f64>>();
            g_fmap.add_assign(&fmap.unpool_gradient(&s(&tg.anchor)));
            state
                .backbone
                .backward(&tape_p, &fp.unpool_gradient(&s(&tg.positive)), &mut grads.backbone, false);
            state
                .backbone
                .backward(&tape_n, &fneg.unpool_gradient(&s(&tg.negative)), &mut grads.backbone, false);
        }
    }

    state.backbone.backward(&tape, &g_fmap, &mut grads.backbone, false);
    Ok(ItemOutput {
        grads,
        parts: LossBreakdown::new(bce * scale_global, triplet * scale_triplet, region * scale_region),
    })
}

/// Batch loss and its gradient with respect to every parameter.
///
/// Global BCE averages over all items, the triplet term over items carrying
/// a triplet, and the region term over items with at least one positive
/// label.
pub fn batch_loss_and_grads(state: &ModelState, items: &[StepItem], terms: &LossTerms) -> Result<(LossBreakdown, Gradients)> {
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let n_trip = items.iter().filter(|it| terms.triplet && it.triplet.is_some()).count();
    let n_region = items.iter().filter(|it| terms.region && !it.labels.is_no_finding()).count();
    let (sg, st, sr) = (inv(items.len()), inv(n_trip), inv(n_region));
    let outputs = items
        .par_iter()
        .map(|it| item_loss_and_grads(state, it, terms, sg, st, sr))
        .collect::<Result<Vec<_>>>()?;
    // fixed-order reduction keeps results independent of thread scheduling
    let mut grads = state.zero_grads();
    let (mut g, mut t, mut r) = (0.0, 0.0, 0.0);
    for o in &outputs {
        grads.add_assign(&o.grads);
        g += o.parts.bce_global;
        t += o.parts.triplet;
        r += o.parts.bce_region;
    }
    Ok((LossBreakdown::new(g, t, r), grads))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(state: &ModelState, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = state.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every tensor whose role is not frozen.
    pub fn step(&mut self, state: &mut ModelState, grads: &Gradients, lr: f64, frozen: &[TensorRole]) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let roles = state.tensor_roles();
        let g = grads.tensors();
        for (i, p) in state.tensors_mut().into_iter().enumerate() {
            if frozen.contains(&roles[i]) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[i][j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Step-mean of each term.
    pub loss: LossBreakdown,
    /// `None` when no class has both positive and negative validation
    /// samples.
    pub val_mean_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub adam: AdamConfig,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,lr,bce_global,triplet,bce_region,total,val_mean_auc")?;
        for e in &self.epochs {
            let auc = e.val_mean_auc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                e.epoch, e.lr, e.loss.bce_global, e.loss.triplet, e.loss.bce_region, e.loss.total, auc
            )?;
        }
        Ok(())
    }
}

pub fn write_step_csv<W: Write>(steps: &[StepRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,epoch,bce_global,triplet,bce_region,total")?;
    for s in steps {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.step, s.epoch, s.loss.bce_global, s.loss.triplet, s.loss.bce_region, s.loss.total
        )?;
    }
    Ok(())
}

/// Earliest epoch with the highest validation AUC; epochs without one rank
/// below all others.
pub fn best_epoch(aucs: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in aucs.iter().enumerate() {
        let a = a.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((i, a));
        }
    }
    best.map(|(i, _)| i)
}

/// The checkpoint of the log's best epoch; `checkpoints[i]` belongs to epoch
/// `i`.
pub fn select_model(log: &TrainLog, checkpoints: &[ModelState]) -> Result<ModelState> {
    checkpoints
        .get(log.best_epoch)
        .cloned()
        .ok_or_else(|| Error::Config(format!("no checkpoint for best epoch {}", log.best_epoch)))
}

pub struct TrainOutcome {
    pub best: ModelState,
    pub last: ModelState,
    pub log: TrainLog,
    pub steps: Vec<StepRecord>,
}

// Stream families under the run seed; each consumer owns one so toggling a
// module never shifts another's random numbers.
const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 1 << 60;
const STREAM_MINING: u64 = 2 << 60;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mean validation AUC of the inference-time score (fused when RV is on).
pub fn validation_auc(state: &ModelState, val: &[&Sample]) -> Result<Option<f64>> {
    let scores = eval::score_samples(state, val)?;
    let labels: Vec<&LabelVector> = val.iter().map(|s| &s.labels).collect();
    Ok(eval::class_aucs(&scores, &labels, state.config.classes).mean)
}

pub fn train(
    train: &[&Sample],
    val: &[&Sample],
    hashes: Option<&HashCache>,
    model_config: ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_observer(train, val, hashes, model_config, config, |_, _| Ok(()))
}

/// [`train`] with a callback after every epoch, given the epoch's record
/// and the parameters at its end.
pub fn train_with_observer<F>(
    train: &[&Sample],
    val: &[&Sample],
    hashes: Option<&HashCache>,
    mut model_config: ModelConfig,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &ModelState) -> Result<()>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    for s in train.iter().chain(val) {
        s.validate(model_config.classes)?;
    }
    model_config.cam_threshold = config.cam_threshold;
    model_config.rv_enabled = config.use_rv;
    let mut state = ModelState::new(model_config, &mut stream_rng(config.seed, STREAM_INIT))?;

    let pools = if config.use_dl {
        let hashes = match hashes {
            Some(cache) => train
                .iter()
                .map(|s| cache.get(&s.id).ok_or_else(|| Error::Schema(format!("no cached hash for {}", s.id))))
                .collect::<Result<Vec<_>>>()?,
            None => train.par_iter().map(|s| phash(&s.image)).collect(),
        };
        let corpus = MiningCorpus {
            labels: train.iter().map(|s| s.labels.clone()).collect(),
            hashes,
        };
        Some(PoolSet::build(&corpus, &config.pool, config.seed))
    } else {
        None
    };

    let frozen: &[TensorRole] = if config.use_rv { &[] } else { &[TensorRole::HeadRegion] };
    let curriculum = config.curriculum();
    let terms = config.terms();
    let mut adam = Adam::new(&state, config.adam);
    let mut order_rng = stream_rng(config.seed, STREAM_ORDER);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, ModelState)> = None;
    let mut step = 0usize;

    for epoch in 0..config.max_epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut sum = LossBreakdown::default();
        let mut n_steps = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch_stream = ((epoch as u64) << 32) | ((b as u64) << 12);
            let items: Vec<StepItem> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &a)| {
                    let mut aug = stream_rng(config.seed, STREAM_AUGMENT | batch_stream | i as u64);
                    let image = augment_image(&train[a].image, &mut aug, &config.augment);
                    let triplet = pools.as_ref().and_then(|pools| {
                        let mut rng = stream_rng(config.seed, STREAM_MINING | batch_stream | i as u64);
                        let t = triplet_for_anchor(pools.get(a)?, epoch, &curriculum, &mut rng)?;
                        let pos = augment_image(&train[t.positive].image, &mut rng, &config.augment);
                        let neg = augment_image(&train[t.negative].image, &mut rng, &config.augment);
                        Some((pos, neg))
                    });
                    StepItem {
                        image,
                        labels: train[a].labels.clone(),
                        triplet,
                    }
                })
                .collect();
            let (parts, grads) = batch_loss_and_grads(&state, &items, &terms)?;
            if !parts.is_finite() || grads.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    sample_ids: chunk.iter().map(|&a| train[a].id.clone()).collect(),
                });
            }
            adam.step(&mut state, &grads, lr, frozen);
            steps.push(StepRecord { step, epoch, loss: parts });
            sum = LossBreakdown::new(
                sum.bce_global + parts.bce_global,
                sum.triplet + parts.triplet,
                sum.bce_region + parts.bce_region,
            );
            n_steps += 1;
            step += 1;
        }
        let k = n_steps as f64;
        let loss = LossBreakdown::new(sum.bce_global / k, sum.triplet / k, sum.bce_region / k);
        let val_mean_auc = if val.is_empty() { None } else { validation_auc(&state, val)? };
        let record = EpochRecord {
            epoch,
            lr,
            loss,
            val_mean_auc,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.1e} loss {:.4} (bce {:.4}, triplet {:.4}, rv {:.4}) val auc {}",
            loss.total,
            loss.bce_global,
            loss.triplet,
            loss.bce_region,
            val_mean_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
        observer(&record, &state)?;
        let score = val_mean_auc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, state.clone()));
        }
        epochs.push(record);
    }

    let best_epoch = best_epoch(&epochs.iter().map(|e| e.val_mean_auc).collect::<Vec<_>>()).expect("at least one epoch");
    Ok(TrainOutcome {
        best: best.expect("at least one epoch").1,
        last: state,
        log: TrainLog {
            epochs,
            best_epoch,
            adam: config.adam,
        },
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split_by_patient, SyntheticConfig};
    use crate::model::BackboneConfig;

    fn tiny_data(n: usize, seed: u64) -> Vec<Sample> {
        generate_synthetic(&SyntheticConfig::new(n, 3, 32), seed).unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig::new(3, BackboneConfig::conv_stack(32, &[(4, 2), (8, 2)], 8))
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            max_epochs: 3,
            batch_size: 8,
            lr_decay_epoch: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_steps_at_decay_epoch() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(14), 1e-3);
        assert_eq!(c.lr_at(15), 1e-4);
        assert_eq!(c.lr_at(29), 1e-4);
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                max_epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr_initial: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                cam_threshold: 1.5,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn best_epoch_is_earliest_argmax() {
        assert_eq!(best_epoch(&[Some(0.5), Some(0.6), Some(0.7)]), Some(2));
        let peak: Vec<Option<f64>> = [0.5, 0.6, 0.7, 0.9, 0.8, 0.7, 0.6, 0.6, 0.5, 0.5].iter().map(|&a| Some(a)).collect();
        assert_eq!(best_epoch(&peak), Some(3));
        assert_eq!(best_epoch(&[Some(0.7), Some(0.8), Some(0.8)]), Some(1));
        assert_eq!(best_epoch(&[None, Some(0.1), None]), Some(1));
        assert_eq!(best_epoch(&[]), None);
    }

    #[test]
    fn select_model_returns_best_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ckpts: Vec<ModelState> = (0..3).map(|_| ModelState::new(tiny_model(), &mut rng).unwrap()).collect();
        let log = TrainLog {
            epochs: Vec::new(),
            best_epoch: 1,
            adam: AdamConfig::default(),
        };
        assert_eq!(select_model(&log, &ckpts).unwrap(), ckpts[1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut state = ModelState::new(tiny_model(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = state.clone();
        let mut grads = state.zero_grads();
        grads.head_global.bias[0] = 3.0;
        grads.head_global.bias[1] = -0.2;
        let mut adam = Adam::new(&state, AdamConfig::default());
        adam.step(&mut state, &grads, 0.01, &[]);
        let d0 = state.head_global.bias()[0] - before.head_global.bias()[0];
        let d1 = state.head_global.bias()[1] - before.head_global.bias()[1];
        assert!((d0 + 0.01).abs() < 1e-8 && (d1 - 0.01).abs() < 1e-7);
        assert_eq!(state.head_global.bias()[2], before.head_global.bias()[2]);
    }

    #[test]
    fn training_is_deterministic_and_respects_toggles() {
        let data = tiny_data(60, 2);
        let split = split_by_patient(&data, (0.7, 0.15), 0).unwrap();
        let [tr, va, _] = split.partition(&data).unwrap();
        let cfg = tiny_config();
        let a = train(&tr, &va, None, tiny_model(), &cfg).unwrap();
        let b = train(&tr, &va, None, tiny_model(), &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.best, b.best);
        assert!(a.log.epochs.iter().all(|e| e.loss.triplet >= 0.0 && e.loss.bce_region > 0.0));

        let no_rv = TrainConfig {
            use_rv: false,
            ..cfg.clone()
        };
        let init = ModelState::new(tiny_model(), &mut stream_rng(cfg.seed, STREAM_INIT)).unwrap();
        let r = train(&tr, &va, None, tiny_model(), &no_rv).unwrap();
        assert_eq!(r.last.head_rv, init.head_rv);
        assert!(r.steps.iter().all(|s| s.loss.bce_region == 0.0));

        let base = TrainConfig {
            use_dl: false,
            use_rv: false,
            ..cfg
        };
        let r = train(&tr, &va, None, tiny_model(), &base).unwrap();
        assert!(r.steps.iter().all(|s| s.loss.total == s.loss.bce_global));
    }

    #[test]
    fn disabled_mining_ignores_hash_source() {
        let data = tiny_data(40, 3);
        let refs: Vec<&Sample> = data.iter().collect();
        let cfg = TrainConfig {
            use_dl: false,
            max_epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let cache = HashCache::build(&data);
        let a = train(&refs[..30], &refs[30..], None, tiny_model(), &cfg).unwrap();
        let b = train(&refs[..30], &refs[30..], Some(&cache), tiny_model(), &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best, b.best);
    }

    #[test]
    fn region_branch_reaches_backbone() {
        let data = tiny_data(8, 5);
        let state = ModelState::new(tiny_model(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let items: Vec<StepItem> = data
            .iter()
            .filter(|s| !s.labels.is_no_finding())
            .map(|s| StepItem {
                image: s.image.clone(),
                labels: s.labels.clone(),
                triplet: None,
            })
            .collect();
        assert!(!items.is_empty());
        // zero the global head's bias path: compare region-only gradient
        let terms = LossTerms {
            triplet: false,
            region: true,
            margin: 0.5,
            distance: Distance::L2,
            cam_threshold: 0.8,
        };
        let (with_rv, g_rv) = batch_loss_and_grads(&state, &items, &terms).unwrap();
        let (without, g_base) = batch_loss_and_grads(&state, &items, &LossTerms { region: false, ..terms }).unwrap();
        assert!(with_rv.bce_region > 0.0 && without.bce_region == 0.0);
        let differs = g_rv.backbone.iter().zip(&g_base.backbone).any(|((a, _), (b, _))| a != b);
        assert!(differs);
    }

    #[test]
    fn empty_training_split_is_config_error() {
        assert!(matches!(
            train(&[], &[], None, tiny_model(), &tiny_config()),
            Err(Error::Config(_))
        ));
    }
}
