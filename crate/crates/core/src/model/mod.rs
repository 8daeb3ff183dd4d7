//! Embedding network, the global and region-verification heads, and fused
//! inference.

mod backbone;
mod checkpoint;
pub mod conv;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{self, RegionMask};
use crate::dataset::{GrayImage, LabelVector};
use crate::error::{Error, Result};

pub use backbone::{Backbone, BackboneConfig, ConvBackbone, ConvTape};
pub use checkpoint::CHECKPOINT_VERSION;

/// `K × H × W` activations of the last convolutional layer, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    k: usize,
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(k: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != k * h * w {
            return Err(Error::Shape(format!(
                "feature map {k}x{h}x{w} needs {} values, got {}",
                k * h * w,
                values.len()
            )));
        }
        Ok(FeatureMap { k, h, w, values })
    }

    pub fn zeros(k: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            k,
            h,
            w,
            values: vec![0.0; k * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.k, self.h, self.w)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.values[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn at(&self, k: usize, a: usize, b: usize) -> f64 {
        self.values[(k * self.h + a) * self.w + b]
    }

    /// Global average pooling.
    pub fn pooled(&self) -> Embedding {
        let n = (self.h * self.w) as f64;
        Embedding(
            self.values
                .chunks_exact(self.h * self.w)
                .map(|c| c.iter().sum::<f64>() / n)
                .collect(),
        )
    }

    /// Gradient of a loss w.r.t. this map given its gradient w.r.t. the
    /// pooled embedding: each cell receives `g[k] / (H·W)`.
    pub fn unpool_gradient(&self, grad: &[f64]) -> FeatureMap {
        let n = self.h * self.w;
        let values = grad.iter().flat_map(|g| std::iter::repeat_n(g / n as f64, n)).collect();
        FeatureMap {
            k: self.k,
            h: self.h,
            w: self.w,
            values,
        }
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Pooled feature vector `f(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Linear multi-label classifier: `C × K` weights plus one bias per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ClassifierHead {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    /// Uniform in `±1/√K`, zero bias.
    pub fn init<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Self {
        let mut head = Self::zeros(classes, dim);
        let limit = 1.0 / (dim as f64).sqrt();
        for w in &mut head.weights {
            *w = rng.gen_range(-limit..limit);
        }
        head
    }

    pub fn from_parts(classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != classes * dim || bias.len() != classes {
            return Err(Error::Shape(format!("head {classes}x{dim} has wrong parameter sizes")));
        }
        Ok(ClassifierHead {
            classes,
            dim,
            weights,
            bias,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn class_weights(&self, c: usize) -> &[f64] {
        &self.weights[c * self.dim..(c + 1) * self.dim]
    }

    pub fn logits(&self, emb: &Embedding) -> Vec<f64> {
        debug_assert_eq!(emb.dim(), self.dim);
        (0..self.classes)
            .map(|c| {
                self.class_weights(c)
                    .iter()
                    .zip(&emb.0)
                    .map(|(w, f)| w * f)
                    .sum::<f64>()
                    + self.bias[c]
            })
            .collect()
    }

    /// Accumulates `d loss / d logits` into head gradients; returns
    /// `d loss / d embedding`.
    pub fn backward(&self, emb: &Embedding, grad_logits: &[f64], grad: &mut HeadGrads) -> Vec<f64> {
        let mut g_emb = vec![0.0; self.dim];
        for (c, &g) in grad_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[c] += g;
            let gw = &mut grad.weights[c * self.dim..(c + 1) * self.dim];
            for ((gwk, &fk), (gek, &wk)) in gw.iter_mut().zip(&emb.0).zip(g_emb.iter_mut().zip(self.class_weights(c))) {
                *gwk += g * fk;
                *gek += g * wk;
            }
        }
        g_emb
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros_like(head: &ClassifierHead) -> Self {
        HeadGrads {
            weights: vec![0.0; head.weights.len()],
            bias: vec![0.0; head.bias.len()],
        }
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Independent per-class probabilities `σ(w_c·f + b_c)`.
pub fn classify_global(emb: &Embedding, head: &ClassifierHead) -> Vec<f64> {
    head.logits(emb).into_iter().map(logistic).collect()
}

/// Region branch: pool the masked map, then apply the region head.
pub fn classify_region(masked: &FeatureMap, head: &ClassifierHead) -> Vec<f64> {
    classify_global(&masked.pooled(), head)
}

/// How global and region logits combine into the fused score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// `σ(global + region)`.
    #[default]
    SumLogits,
    /// `σ((global + region) / 2)`.
    MeanLogits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub backbone: BackboneConfig,
    pub cam_threshold: f64,
    pub fusion: FusionMode,
    /// Whether the region head is trained and takes part in inference and
    /// localization.
    pub rv_enabled: bool,
}

impl ModelConfig {
    pub fn new(classes: usize, backbone: BackboneConfig) -> Self {
        ModelConfig {
            classes,
            backbone,
            cam_threshold: 0.8,
            fusion: FusionMode::SumLogits,
            rv_enabled: true,
        }
    }
}

/// Backbone parameters plus the two heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub backbone: ConvBackbone,
    pub head_global: ClassifierHead,
    pub head_rv: ClassifierHead,
}

/// Gradients laid out like [`ModelState::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub backbone: Vec<(Vec<f64>, Vec<f64>)>,
    pub head_global: HeadGrads,
    pub head_rv: HeadGrads,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in &self.backbone {
            out.push(w);
            out.push(b);
        }
        out.extend([
            self.head_global.weights.as_slice(),
            self.head_global.bias.as_slice(),
            self.head_rv.weights.as_slice(),
            self.head_rv.bias.as_slice(),
        ]);
        out
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        for ((aw, ab), (bw, bb)) in self.backbone.iter_mut().zip(&other.backbone) {
            add(aw, bw);
            add(ab, bb);
        }
        add(&mut self.head_global.weights, &other.head_global.weights);
        add(&mut self.head_global.bias, &other.head_global.bias);
        add(&mut self.head_rv.weights, &other.head_rv.weights);
        add(&mut self.head_rv.bias, &other.head_rv.bias);
    }
}

/// Tensor kinds in [`ModelState::tensors`] order, used to keep the region
/// head frozen when it is disabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Backbone,
    HeadGlobal,
    HeadRegion,
}

impl ModelState {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.classes == 0 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        let backbone = ConvBackbone::new(config.backbone.clone(), rng)?;
        let (k, _, _) = backbone.feature_shape();
        let head_global = ClassifierHead::init(config.classes, k, rng);
        let head_rv = ClassifierHead::init(config.classes, k, rng);
        Ok(ModelState {
            config,
            backbone,
            head_global,
            head_rv,
        })
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            backbone: self.backbone.zero_grads(),
            head_global: HeadGrads::zeros_like(&self.head_global),
            head_rv: HeadGrads::zeros_like(&self.head_rv),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in self.backbone.layers() {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([
            self.head_global.weights(),
            self.head_global.bias(),
            self.head_rv.weights(),
            self.head_rv.bias(),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.backbone.layers_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head_global.weights);
        out.push(&mut self.head_global.bias);
        out.push(&mut self.head_rv.weights);
        out.push(&mut self.head_rv.bias);
        out
    }

    pub fn tensor_roles(&self) -> Vec<TensorRole> {
        let mut roles = vec![TensorRole::Backbone; 2 * self.backbone.layers().len()];
        roles.extend([
            TensorRole::HeadGlobal,
            TensorRole::HeadGlobal,
            TensorRole::HeadRegion,
            TensorRole::HeadRegion,
        ]);
        roles
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn feature_map(&self, image: &GrayImage) -> Result<FeatureMap> {
        self.backbone.forward(image)
    }
}

/// Which classes build the inference-time region mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPolicy {
    /// Classes with global probability above this are merged.
    pub prob_threshold: f64,
    /// Threshold on the normalized merged map.
    pub cam_threshold: f64,
}

impl RegionPolicy {
    pub fn for_model(state: &ModelState) -> Self {
        RegionPolicy {
            prob_threshold: 0.5,
            cam_threshold: state.config.cam_threshold,
        }
    }

    /// Predicted classes, or the single most probable class when none
    /// clears the threshold.
    pub fn active_classes(&self, p_global: &[f64]) -> Vec<usize> {
        let active: Vec<usize> = (0..p_global.len()).filter(|&c| p_global[c] > self.prob_threshold).collect();
        if !active.is_empty() {
            return active;
        }
        (0..p_global.len())
            .max_by(|&a, &b| p_global[a].total_cmp(&p_global[b]).then(b.cmp(&a)))
            .into_iter()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub logits_global: Vec<f64>,
    pub logits_region: Vec<f64>,
    pub p_global: Vec<f64>,
    pub p_region: Vec<f64>,
    pub p_total: Vec<f64>,
    pub predicted: LabelVector,
    pub active_classes: Vec<usize>,
    pub region: RegionMask,
}

/// Fuses global and region logits per `mode`.
pub fn fuse(logit_global: f64, logit_region: f64, mode: FusionMode) -> f64 {
    match mode {
        FusionMode::SumLogits => logistic(logit_global + logit_region),
        FusionMode::MeanLogits => logistic(0.5 * (logit_global + logit_region)),
    }
}

/// Inference from an already computed feature map.
pub fn infer_features(fmap: &FeatureMap, state: &ModelState, policy: &RegionPolicy) -> Inference {
    let emb = fmap.pooled();
    let logits_global = state.head_global.logits(&emb);
    let p_global: Vec<f64> = logits_global.iter().copied().map(logistic).collect();
    let active_classes = policy.active_classes(&p_global);
    let merged = cam::normalize(&cam::merged_map(fmap, &state.head_global, &active_classes));
    let region = cam::extract_box(&merged, policy.cam_threshold);
    let masked = cam::mask_features(fmap, &region);
    let logits_region = state.head_rv.logits(&masked.pooled());
    let p_region: Vec<f64> = logits_region.iter().copied().map(logistic).collect();
    let p_total: Vec<f64> = if state.config.rv_enabled {
        logits_global
            .iter()
            .zip(&logits_region)
            .map(|(&g, &r)| fuse(g, r, state.config.fusion))
            .collect()
    } else {
        p_global.clone()
    };
    let predicted = LabelVector::from_bits(p_total.iter().map(|&p| p > 0.5).collect());
    Inference {
        logits_global,
        logits_region,
        p_global,
        p_region,
        p_total,
        predicted,
        active_classes,
        region,
    }
}

pub fn infer(image: &GrayImage, state: &ModelState, policy: &RegionPolicy) -> Result<Inference> {
    Ok(infer_features(&state.feature_map(image)?, state, policy))
}
