use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{ConvCache, ConvLayer, ConvSpec};
use super::FeatureMap;
use crate::dataset::GrayImage;
use crate::error::{Error, Result};

/// Embedding network producing a `K × H × W` feature map from an image.
pub trait Backbone {
    type Tape;

    /// `(K, H, W)` of the feature map.
    fn feature_shape(&self) -> (usize, usize, usize);

    fn forward(&self, image: &GrayImage) -> Result<FeatureMap> {
        self.forward_tape(image).map(|(f, _)| f)
    }

    /// Forward pass that keeps what [`Backbone::backward`] needs.
    fn forward_tape(&self, image: &GrayImage) -> Result<(FeatureMap, Self::Tape)>;

    /// Accumulates parameter gradients (one `(weight, bias)` pair per layer)
    /// for an upstream feature-map gradient; returns the image gradient when
    /// `want_input` is set.
    fn backward(
        &self,
        tape: &Self::Tape,
        grad: &FeatureMap,
        grads: &mut [(Vec<f64>, Vec<f64>)],
        want_input: bool,
    ) -> Option<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub layers: Vec<ConvSpec>,
}

impl BackboneConfig {
    /// Strided 3×3 blocks of the given widths, then a 1×1 projection to
    /// `k` channels.
    pub fn conv_stack(input_size: usize, widths: &[(usize, usize)], k: usize) -> Self {
        let mut layers: Vec<ConvSpec> = widths.iter().map(|&(c, s)| ConvSpec::conv3x3(c, s)).collect();
        layers.push(ConvSpec::pointwise(k));
        BackboneConfig {
            input_size,
            in_channels: 1,
            layers,
        }
    }

    /// Desk-scale default: 64×64 input, 16×16×64 features.
    pub fn desk() -> Self {
        Self::desk_sized(64)
    }

    /// The desk layout for another input size; the grid is `size / 4`.
    pub fn desk_sized(input_size: usize) -> Self {
        Self::conv_stack(input_size, &[(16, 2), (32, 2), (32, 1), (64, 1)], 64)
    }

    /// Five stride-2 blocks take a 224×224 input to a 7×7 grid.
    pub fn reference_224(k: usize) -> Self {
        Self::conv_stack(224, &[(16, 2), (32, 2), (64, 2), (64, 2), (128, 2)], k)
    }

    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        let mut side = self.input_size;
        let mut channels = self.in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            side = l
                .out_size(side)
                .ok_or_else(|| Error::Config(format!("layer {i} kernel exceeds its {side}px input")))?;
            channels = l.out_channels;
        }
        if self.layers.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        Ok((channels, side, side))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBackbone {
    config: BackboneConfig,
    pub(crate) layers: Vec<ConvLayer>,
}

pub struct ConvTape {
    caches: Vec<ConvCache>,
}

impl ConvBackbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.feature_shape()?;
        let mut cin = config.in_channels;
        let layers = config
            .layers
            .iter()
            .map(|spec| {
                let l = ConvLayer::init(cin, spec.clone(), rng);
                cin = spec.out_channels;
                l
            })
            .collect();
        Ok(ConvBackbone { config, layers })
    }

    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.feature_shape()?;
        let mut cin = config.in_channels;
        let layers = config
            .layers
            .iter()
            .map(|spec| {
                let l = ConvLayer::zeros(cin, spec.clone());
                cin = spec.out_channels;
                l
            })
            .collect();
        Ok(ConvBackbone { config, layers })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn zero_grads(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
            .collect()
    }

    fn input_planes(&self, image: &GrayImage) -> Result<Vec<f64>> {
        if image.side() != self.config.input_size {
            return Err(Error::Shape(format!(
                "backbone expects {0}x{0} input, got {1}x{1}",
                self.config.input_size,
                image.side()
            )));
        }
        let gray = image.pixels().iter().map(|&v| f64::from(v));
        // grayscale is replicated when the first layer wants several channels
        Ok(std::iter::repeat_n(gray, self.config.in_channels).flatten().collect())
    }

    /// Forward pass from raw input planes (`in_channels × side × side`).
    pub fn forward_planes(&self, planes: Vec<f64>) -> (FeatureMap, ConvTape) {
        let mut side = self.config.input_size;
        let mut caches: Vec<ConvCache> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cache = {
                let input = caches.last().map(ConvCache::output).unwrap_or(&planes);
                layer.forward(input, side, side)
            };
            side = ConvLayer::output_dims(&cache).0;
            caches.push(cache);
        }
        let (k, h, w) = self.feature_shape();
        let values = caches.last().expect("non-empty backbone").output().to_vec();
        (FeatureMap::new(k, h, w, values).expect("shape follows config"), ConvTape { caches })
    }
}

impl Backbone for ConvBackbone {
    type Tape = ConvTape;

    fn feature_shape(&self) -> (usize, usize, usize) {
        self.config.feature_shape().expect("validated at construction")
    }

    fn forward_tape(&self, image: &GrayImage) -> Result<(FeatureMap, ConvTape)> {
        let planes = self.input_planes(image)?;
        Ok(self.forward_planes(planes))
    }

    fn backward(
        &self,
        tape: &ConvTape,
        grad: &FeatureMap,
        grads: &mut [(Vec<f64>, Vec<f64>)],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let mut upstream = grad.values().to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gw, gb) = &mut grads[i];
            let need = i > 0 || want_input;
            upstream = layer.backward(&tape.caches[i], &upstream, gw, gb, need)?;
        }
        if self.config.in_channels > 1 {
            // fold replicated channels back onto the single image plane
            let n = self.config.input_size * self.config.input_size;
            let mut folded = vec![0.0; n];
            for plane in upstream.chunks_exact(n) {
                for (f, g) in folded.iter_mut().zip(plane) {
                    *f += g;
                }
            }
            upstream = folded;
        }
        Some(upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_config_yields_seven_by_seven() {
        let cfg = BackboneConfig::reference_224(1024);
        assert_eq!(cfg.feature_shape().unwrap(), (1024, 7, 7));
        let bb = ConvBackbone::new(BackboneConfig::reference_224(24), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = bb.forward(&GrayImage::filled(224, 0.3)).unwrap();
        assert_eq!(f.shape(), (24, 7, 7));
    }

    #[test]
    fn desk_config_shape() {
        assert_eq!(BackboneConfig::desk().feature_shape().unwrap(), (64, 16, 16));
    }

    #[test]
    fn resolution_mismatch_is_shape_error() {
        let bb = ConvBackbone::new(BackboneConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(bb.forward(&GrayImage::zeros(32)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_linear_backbone_maps_zero_to_zero() {
        let mut cfg = BackboneConfig::conv_stack(32, &[(4, 2)], 3);
        for l in &mut cfg.layers {
            l.relu = false;
        }
        let bb = ConvBackbone::zeros(cfg).unwrap();
        let f = bb.forward(&GrayImage::zeros(32)).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn replicated_channels_fold_gradient() {
        let mut cfg = BackboneConfig::conv_stack(32, &[(2, 2)], 2);
        cfg.in_channels = 3;
        let bb = ConvBackbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let img = GrayImage::filled(32, 0.5);
        let (f, tape) = bb.forward_tape(&img).unwrap();
        let ones = FeatureMap::new(2, 16, 16, vec![1.0; f.values().len()]).unwrap();
        let mut grads = bb.zero_grads();
        let gx = bb.backward(&tape, &ones, &mut grads, true).unwrap();
        assert_eq!(gx.len(), 32 * 32);
    }
}
