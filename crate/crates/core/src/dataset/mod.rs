//! Samples, labels, boxes and everything needed to get them into memory:
//! CSV manifests, patient-disjoint splits, training augmentation and a
//! synthetic lesion generator.

mod augment;
mod manifest;
mod split;
mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, augment_image, hflip, rotate, AugmentConfig};
pub use manifest::{
    load_manifest, read_class_names, write_manifest, LoadedManifest, ManifestPaths, MissingImage,
    CHESTXRAY14_CLASSES, NO_FINDING,
};
pub use split::{split_by_patient, SplitSpec};
pub use synthetic::{generate_synthetic, glyph_class_names, Cooccurrence, Glyph, SyntheticConfig};

/// Square single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    side: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn zeros(side: usize) -> Self {
        Self::filled(side, 0.0)
    }

    pub fn filled(side: usize, value: f32) -> Self {
        GrayImage {
            side,
            data: vec![value; side * side],
        }
    }

    pub fn from_vec(side: usize, data: Vec<f32>) -> Result<Self> {
        if side == 0 || data.len() != side * side {
            return Err(Error::Shape(format!(
                "image of side {side} needs {} pixels, got {}",
                side * side,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(GrayImage { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.side + x]
    }

    /// Writes a pixel, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.side + x] = v.clamp(0.0, 1.0);
    }

    /// Quantizes every pixel to `k / 255` so the image survives an 8-bit
    /// lossless round trip bit-exactly.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = quantize(*v);
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_u8(side: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(side, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> f32 {
    f32::from((v.clamp(0.0, 1.0) * 255.0).round() as u8) / 255.0
}

/// Multi-hot disease indicator of fixed length `C`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector(Vec<bool>);

impl LabelVector {
    pub fn empty(classes: usize) -> Self {
        LabelVector(vec![false; classes])
    }

    pub fn from_indices(classes: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; classes];
        for &c in indices {
            if c >= classes {
                return Err(Error::Schema(format!(
                    "class index {c} out of range for {classes} classes"
                )));
            }
            bits[c] = true;
        }
        Ok(LabelVector(bits))
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        LabelVector(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, c: usize) -> bool {
        self.0[c]
    }

    pub fn set(&mut self, c: usize, on: bool) {
        self.0[c] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    /// Indices of the classes present.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// True when no disease is present ("No Finding").
    pub fn is_no_finding(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn intersects(&self, other: &LabelVector) -> bool {
        self.0.iter().zip(&other.0).any(|(&a, &b)| a && b)
    }

    pub fn as_targets(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Display for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let idx: Vec<String> = self.indices().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", idx.join(","))
    }
}

/// Axis-aligned box in pixels, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        if !(w > 0.0 && h > 0.0 && x >= 0.0 && y >= 0.0) || !b.is_finite() {
            return Err(Error::Schema(format!(
                "invalid box ({x}, {y}, {w}, {h}): need w, h > 0 and non-negative corner"
            )));
        }
        Ok(b)
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn fits_in(&self, side: usize) -> bool {
        let s = side as f64;
        self.right() <= s + 1e-9 && self.bottom() <= s + 1e-9
    }
}

/// One training or evaluation image. `gt_boxes` is empty when no box
/// annotation exists.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub labels: LabelVector,
    pub patient_id: String,
    pub gt_boxes: Vec<(usize, BBox)>,
}

impl Sample {
    /// Checks the label length and box invariants against `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.labels.len() != classes {
            return Err(Error::Schema(format!(
                "sample {}: label vector has {} entries, expected {classes}",
                self.id,
                self.labels.len()
            )));
        }
        for (c, b) in &self.gt_boxes {
            if *c >= classes {
                return Err(Error::Schema(format!(
                    "sample {}: box class {c} out of range",
                    self.id
                )));
            }
            if !b.fits_in(self.image.side()) {
                return Err(Error::Schema(format!(
                    "sample {}: box {b:?} exceeds image bounds",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn boxes_for(&self, class: usize) -> impl Iterator<Item = &BBox> + '_ {
        self.gt_boxes
            .iter()
            .filter(move |(c, _)| *c == class)
            .map(|(_, b)| b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_vector_basics() {
        let l = LabelVector::from_indices(5, &[1, 3]).unwrap();
        assert_eq!(l.indices().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(l.count(), 2);
        assert!(!l.is_no_finding());
        assert!(LabelVector::empty(5).is_no_finding());
        assert!(LabelVector::from_indices(5, &[5]).is_err());
        assert_eq!(l.to_string(), "{1,3}");
    }

    #[test]
    fn bbox_rejects_degenerate() {
        assert!(BBox::new(0.0, 0.0, 0.0, 3.0).is_err());
        assert!(BBox::new(-1.0, 0.0, 2.0, 3.0).is_err());
        assert!(BBox::new(1.0, 2.0, 2.0, 3.0).is_ok());
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(GrayImage::from_vec(2, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(GrayImage::from_vec(2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn u8_round_trip_is_exact_after_quantize() {
        let mut img = GrayImage::from_vec(2, vec![0.1, 0.33, 0.5, 0.999]).unwrap();
        img.quantize_u8();
        let back = GrayImage::from_u8(2, &img.to_u8()).unwrap();
        assert_eq!(img, back);
    }
}
