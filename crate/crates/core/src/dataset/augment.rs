use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GrayImage, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 5.0,
            hflip_prob: 0.5,
        }
    }
}

/// Random rotation in `[-max, max]` degrees followed by a horizontal flip
/// with probability `hflip_prob`. Labels are kept; boxes are dropped since
/// augmented copies only feed training.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R, config: &AugmentConfig) -> Sample {
    Sample {
        id: sample.id.clone(),
        image: augment_image(&sample.image, rng, config),
        labels: sample.labels.clone(),
        patient_id: sample.patient_id.clone(),
        gt_boxes: Vec::new(),
    }
}

/// Image-only form of [`augment`]; draws the same random numbers.
pub fn augment_image<R: Rng + ?Sized>(image: &GrayImage, rng: &mut R, config: &AugmentConfig) -> GrayImage {
    let angle = if config.max_rotation_deg > 0.0 {
        rng.gen_range(-config.max_rotation_deg..=config.max_rotation_deg)
    } else {
        0.0
    };
    let flip = rng.gen::<f64>() < config.hflip_prob;
    let rotated = rotate(image, angle);
    if flip {
        hflip(&rotated)
    } else {
        rotated
    }
}

pub fn hflip(image: &GrayImage) -> GrayImage {
    let n = image.side();
    let mut out = GrayImage::zeros(n);
    for y in 0..n {
        for x in 0..n {
            out.set(x, y, image.get(n - 1 - x, y));
        }
    }
    out
}

/// Rotates about the image center by `degrees` (counter-clockwise in image
/// coordinates), bilinear sampling, zero fill outside the source.
pub fn rotate(image: &GrayImage, degrees: f64) -> GrayImage {
    if degrees == 0.0 {
        return image.clone();
    }
    let n = image.side();
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let fetch = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= n as isize || y >= n as isize {
            0.0
        } else {
            f64::from(image.get(x as usize, y as usize))
        }
    };
    let mut out = GrayImage::zeros(n);
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let sx = c + cos * dx + sin * dy;
            let sy = c - sin * dx + cos * dy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = fetch(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + fetch(x0 + 1, y0) * fx * (1.0 - fy)
                + fetch(x0, y0 + 1) * (1.0 - fx) * fy
                + fetch(x0 + 1, y0 + 1) * fx * fy;
            out.set(x, y, v as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabelVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured(n: usize) -> GrayImage {
        let data = (0..n * n).map(|i| ((i * 37 % 101) as f32) / 100.0).collect();
        GrayImage::from_vec(n, data).unwrap()
    }

    fn centroid(img: &GrayImage) -> (f64, f64) {
        let n = img.side();
        let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
        for y in 0..n {
            for x in 0..n {
                let v = f64::from(img.get(x, y));
                sx += v * x as f64;
                sy += v * y as f64;
                m += v;
            }
        }
        (sx / m, sy / m)
    }

    #[test]
    fn zero_rotation_no_flip_is_identity() {
        let img = textured(16);
        assert_eq!(rotate(&img, 0.0), img);
        let s = Sample {
            id: "a".into(),
            image: img.clone(),
            labels: LabelVector::from_indices(3, &[1]).unwrap(),
            patient_id: "p".into(),
            gt_boxes: vec![],
        };
        let cfg = AugmentConfig {
            max_rotation_deg: 0.0,
            hflip_prob: 0.0,
        };
        let out = augment(&s, &mut ChaCha8Rng::seed_from_u64(3), &cfg);
        assert_eq!(out.image, img);
        assert_eq!(out.labels, s.labels);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = textured(13);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
    }

    #[test]
    fn rotating_centered_disc_keeps_centroid() {
        let n = 64;
        let c = (n as f64 - 1.0) / 2.0;
        let mut img = GrayImage::zeros(n);
        for y in 0..n {
            for x in 0..n {
                if (x as f64 - c).hypot(y as f64 - c) <= 12.0 {
                    img.set(x, y, 1.0);
                }
            }
        }
        let before = centroid(&img);
        let after = centroid(&rotate(&img, 5.0));
        assert!((before.0 - after.0).abs() <= 1.0 && (before.1 - after.1).abs() <= 1.0);
    }

    #[test]
    fn augmentation_keeps_labels_and_range() {
        let s = Sample {
            id: "a".into(),
            image: textured(20),
            labels: LabelVector::from_indices(4, &[0, 3]).unwrap(),
            patient_id: "p".into(),
            gt_boxes: vec![(0, crate::dataset::BBox::new(1.0, 1.0, 2.0, 2.0).unwrap())],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let out = augment(&s, &mut rng, &AugmentConfig::default());
            assert_eq!(out.labels, s.labels);
            assert!(out.gt_boxes.is_empty());
            assert!(out.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
