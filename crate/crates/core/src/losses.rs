//! Global BCE, triplet hinge and region-verification losses, with the
//! gradients the training loop needs.
//!
//! Reductions: both BCE terms average over samples and sum over classes; the
//! triplet term averages over triplets.

use serde::{Deserialize, Serialize};

use crate::dataset::LabelVector;
use crate::error::{Error, Result};
use crate::model::{logistic, Embedding};

/// Probability clamp keeping `ln` finite.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Summed-over-classes BCE of one sample.
pub fn bce_sample(p: &[f64], y: &LabelVector) -> f64 {
    debug_assert_eq!(p.len(), y.len());
    p.iter()
        .zip(y.bits())
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            if t {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// Mean over the batch of the per-sample class-summed BCE.
pub fn bce_multilabel(p: &[Vec<f64>], y: &[LabelVector]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!("{} predictions for {} label vectors", p.len(), y.len())));
    }
    if let Some((i, _)) = p.iter().zip(y).enumerate().find(|(_, (p, y))| p.len() != y.len()) {
        return Err(Error::Shape(format!("sample {i}: {} probabilities for {} classes", p[i].len(), y[i].len())));
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    Ok(p.iter().zip(y).map(|(p, y)| bce_sample(p, y)).sum::<f64>() / p.len() as f64)
}

/// Class-summed BCE of one sample from logits and its gradient w.r.t. the
/// logits. The gradient is that of the clamped loss: `p − y` inside the
/// clamp, zero where the clamp is active.
pub fn bce_with_grad(logits: &[f64], y: &LabelVector) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(y.bits())
        .map(|(&z, &t)| {
            let p = logistic(z);
            let pc = clamp_prob(p);
            loss -= if t { pc.ln() } else { (1.0 - pc).ln() };
            if p == pc {
                p - f64::from(u8::from(t))
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}

/// Region-verification loss: the BCE form over the samples that have at
/// least one positive label, averaged over those samples. Zero when none
/// qualify.
pub fn rv_loss(p_region: &[Vec<f64>], y: &[LabelVector]) -> Result<f64> {
    if p_region.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} label vectors",
            p_region.len(),
            y.len()
        )));
    }
    let (p, y): (Vec<Vec<f64>>, Vec<LabelVector>) = p_region
        .iter()
        .zip(y)
        .filter(|(_, y)| !y.is_no_finding())
        .map(|(p, y)| (p.clone(), y.clone()))
        .unzip();
    bce_multilabel(&p, &y)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distance {
    #[default]
    L2,
    SquaredL2,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Distance::L2 => sq.sqrt(),
            Distance::SquaredL2 => sq,
        }
    }

    /// `∂d/∂a`; `∂d/∂b` is its negation. Zero at coincident points for L2.
    fn grad(self, a: &[f64], b: &[f64]) -> Vec<f64> {
        match self {
            Distance::L2 => {
                let d = self.eval(a, b);
                if d == 0.0 {
                    return vec![0.0; a.len()];
                }
                a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
            }
            Distance::SquaredL2 => a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect(),
        }
    }
}

/// `[d(a,p) − d(a,n) + m]₊` with plain ℓ2 distance.
pub fn triplet_hinge(fa: &Embedding, fp: &Embedding, fneg: &Embedding, margin: f64) -> f64 {
    triplet_hinge_with(fa, fp, fneg, margin, Distance::L2)
}

pub fn triplet_hinge_with(fa: &Embedding, fp: &Embedding, fneg: &Embedding, margin: f64, dist: Distance) -> f64 {
    (dist.eval(&fa.0, &fp.0) - dist.eval(&fa.0, &fneg.0) + margin).max(0.0)
}

/// Gradients of one hinge w.r.t. anchor, positive and negative embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Hinge value and gradients; the subgradient at and below the kink is 0.
pub fn triplet_hinge_grad(fa: &Embedding, fp: &Embedding, fneg: &Embedding, margin: f64, dist: Distance) -> TripletGrad {
    let loss = triplet_hinge_with(fa, fp, fneg, margin, dist);
    let k = fa.dim();
    if loss <= 0.0 {
        return TripletGrad {
            loss: 0.0,
            anchor: vec![0.0; k],
            positive: vec![0.0; k],
            negative: vec![0.0; k],
        };
    }
    let gap = dist.grad(&fa.0, &fp.0);
    let gan = dist.grad(&fa.0, &fneg.0);
    TripletGrad {
        loss,
        anchor: gap.iter().zip(&gan).map(|(p, n)| p - n).collect(),
        positive: gap.iter().map(|g| -g).collect(),
        negative: gan,
    }
}

/// Mean hinge over the batch; an empty batch contributes 0.
pub fn triplet_batch(triplets: &[(Embedding, Embedding, Embedding)], margin: f64) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    triplets
        .iter()
        .map(|(a, p, n)| triplet_hinge(a, p, n, margin))
        .sum::<f64>()
        / triplets.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce_global: f64,
    pub triplet: f64,
    pub bce_region: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(bce_global: f64, triplet: f64, bce_region: f64) -> Self {
        let mut parts = LossBreakdown {
            bce_global,
            triplet,
            bce_region,
            total: 0.0,
        };
        parts.total = total_loss(&parts);
        parts
    }

    pub fn is_finite(&self) -> bool {
        self.bce_global.is_finite() && self.triplet.is_finite() && self.bce_region.is_finite() && self.total.is_finite()
    }
}

/// Unweighted sum of the three terms.
pub fn total_loss(parts: &LossBreakdown) -> f64 {
    parts.bce_global + parts.bce_region + parts.triplet
}
