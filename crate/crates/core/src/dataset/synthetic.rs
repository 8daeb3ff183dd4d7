//! Desk-scale stand-in for a chest X-ray corpus: textured noise backgrounds
//! with one glyph per present class and exact ground-truth boxes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{quantize, BBox, GrayImage, LabelVector, Sample};
use crate::error::{Error, Result};

/// Glyph family drawn for a class. Class `c` uses `Glyph::ALL[c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Glyph {
    Disc,
    Ring,
    Cross,
    Bar,
    Checker,
    Triangle,
    Frame,
    Diamond,
}

impl Glyph {
    pub const ALL: [Glyph; 8] = [
        Glyph::Disc,
        Glyph::Ring,
        Glyph::Cross,
        Glyph::Bar,
        Glyph::Checker,
        Glyph::Triangle,
        Glyph::Frame,
        Glyph::Diamond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Glyph::Disc => "disc",
            Glyph::Ring => "ring",
            Glyph::Cross => "cross",
            Glyph::Bar => "bar",
            Glyph::Checker => "checker",
            Glyph::Triangle => "triangle",
            Glyph::Frame => "frame",
            Glyph::Diamond => "diamond",
        }
    }

    /// Whether offset `(u, v)` inside an `s` × `s` cell belongs to the glyph.
    pub fn covers(self, u: usize, v: usize, s: usize) -> bool {
        let sf = s as f64;
        let half = sf / 2.0;
        let dx = u as f64 + 0.5 - half;
        let dy = v as f64 + 0.5 - half;
        let stroke = (sf / 5.0).max(2.0);
        match self {
            Glyph::Disc => dx.hypot(dy) <= half,
            Glyph::Ring => {
                let d = dx.hypot(dy);
                d <= half && d >= half - stroke
            }
            Glyph::Cross => dx.abs() <= sf / 6.0 || dy.abs() <= sf / 6.0,
            Glyph::Bar => dy.abs() <= sf / 6.0,
            Glyph::Checker => {
                let cell = (s / 4).max(2);
                (u / cell + v / cell) % 2 == 0
            }
            Glyph::Triangle => {
                let t = (v as f64 + 0.5) / sf;
                dx.abs() <= t * half
            }
            Glyph::Frame => {
                let edge = u.min(v).min(s - 1 - u).min(s - 1 - v);
                (edge as f64) < stroke
            }
            Glyph::Diamond => dx.abs() + dy.abs() <= half,
        }
    }
}

/// Class names of a synthetic dataset with `classes` classes.
pub fn glyph_class_names(classes: usize) -> Vec<String> {
    Glyph::ALL[..classes.min(Glyph::ALL.len())]
        .iter()
        .map(|g| g.name().to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cooccurrence {
    /// Each class present independently with probability `prob`; a
    /// `no_finding_frac` share of samples is forced empty.
    Independent { prob: f64, no_finding_frac: f64 },
    /// Every sample carries exactly these classes.
    Fixed(Vec<usize>),
}

impl Default for Cooccurrence {
    fn default() -> Self {
        Cooccurrence::Independent {
            prob: 0.25,
            no_finding_frac: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub classes: usize,
    pub image_size: usize,
    /// Inclusive range of glyph cell sides in pixels.
    pub glyph_size: (usize, usize),
    pub cooccurrence: Cooccurrence,
    pub noise_level: f64,
}

impl SyntheticConfig {
    pub fn new(n_samples: usize, classes: usize, image_size: usize) -> Self {
        SyntheticConfig {
            n_samples,
            classes,
            image_size,
            glyph_size: (image_size * 3 / 16, image_size * 3 / 8),
            cooccurrence: Cooccurrence::default(),
            noise_level: 0.15,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > Glyph::ALL.len() {
            return Err(Error::Config(format!(
                "synthetic classes must be in 2..={}, got {}",
                Glyph::ALL.len(),
                self.classes
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!("image_size must be >= 32, got {}", self.image_size)));
        }
        let (lo, hi) = self.glyph_size;
        if lo < 6 || lo > hi {
            return Err(Error::Config(format!("glyph size range {lo}..={hi} is invalid (min 6)")));
        }
        if hi > self.image_size {
            return Err(Error::Config(format!(
                "glyphs of side {hi} cannot fit in a {0}x{0} image",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config(format!("noise_level {} outside [0, 1]", self.noise_level)));
        }
        match &self.cooccurrence {
            Cooccurrence::Independent { prob, no_finding_frac } => {
                if !(0.0..=1.0).contains(prob) || !(0.0..=1.0).contains(no_finding_frac) {
                    return Err(Error::Config("co-occurrence probabilities must lie in [0, 1]".into()));
                }
            }
            Cooccurrence::Fixed(classes) => {
                if let Some(c) = classes.iter().find(|&&c| c >= self.classes) {
                    return Err(Error::Config(format!("fixed label {c} out of range")));
                }
            }
        }
        Ok(())
    }
}

const BACKGROUND: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 200;
const LAYOUT_RESTARTS: usize = 20;

/// Generates `n_samples` samples. Sample `i` depends only on `(config, seed, i)`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Vec<Sample>> {
    config.validate()?;
    (0..config.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_one(config, i, &mut rng)
        })
        .collect()
}

fn draw_labels(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> LabelVector {
    let mut labels = LabelVector::empty(config.classes);
    match &config.cooccurrence {
        Cooccurrence::Independent { prob, no_finding_frac } => {
            let forced_empty = rng.gen::<f64>() < *no_finding_frac;
            for c in 0..config.classes {
                let on = rng.gen::<f64>() < *prob;
                labels.set(c, on && !forced_empty);
            }
        }
        Cooccurrence::Fixed(classes) => {
            for &c in classes {
                labels.set(c, true);
            }
        }
    }
    labels
}

fn background(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = config.image_size;
    let amp = config.noise_level;
    // low-frequency value noise on a coarse lattice
    let grid = 6;
    let lattice: Vec<f64> = (0..grid * grid).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![BACKGROUND; n * n];
    if amp == 0.0 {
        return out;
    }
    let scale = (grid - 1) as f64 / (n - 1) as f64;
    for y in 0..n {
        for x in 0..n {
            let gx = x as f64 * scale;
            let gy = y as f64 * scale;
            let x0 = (gx.floor() as usize).min(grid - 2);
            let y0 = (gy.floor() as usize).min(grid - 2);
            let fx = gx - x0 as f64;
            let fy = gy - y0 as f64;
            let l = |xx: usize, yy: usize| lattice[yy * grid + xx];
            let smooth = l(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + l(x0 + 1, y0) * fx * (1.0 - fy)
                + l(x0, y0 + 1) * (1.0 - fx) * fy
                + l(x0 + 1, y0 + 1) * fx * fy;
            out[y * n + x] += amp * smooth;
        }
    }
    out
}

fn overlaps(a: (usize, usize, usize), b: (usize, usize, usize), gap: usize) -> bool {
    let (ax, ay, asz) = a;
    let (bx, by, bsz) = b;
    ax < bx + bsz + gap && bx < ax + asz + gap && ay < by + bsz + gap && by < ay + asz + gap
}

fn layout(config: &SyntheticConfig, present: &[usize], rng: &mut ChaCha8Rng) -> Option<Vec<(usize, usize, usize)>> {
    let n = config.image_size;
    let (lo, hi) = config.glyph_size;
    'restart: for _ in 0..LAYOUT_RESTARTS {
        let mut placed: Vec<(usize, usize, usize)> = Vec::with_capacity(present.len());
        for _ in present {
            let mut ok = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let s = rng.gen_range(lo..=hi);
                let x = rng.gen_range(0..=n - s);
                let y = rng.gen_range(0..=n - s);
                if placed.iter().all(|&p| !overlaps(p, (x, y, s), 2)) {
                    ok = Some((x, y, s));
                    break;
                }
            }
            match ok {
                Some(p) => placed.push(p),
                None => continue 'restart,
            }
        }
        return Some(placed);
    }
    None
}

fn generate_one(config: &SyntheticConfig, index: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let n = config.image_size;
    let labels = draw_labels(config, rng);
    let present: Vec<usize> = labels.indices().collect();
    let mut pixels = background(config, rng);

    let cells = layout(config, &present, rng).ok_or_else(|| {
        Error::Config(format!(
            "cannot place {} non-overlapping glyphs of side {:?} in a {n}x{n} image",
            present.len(),
            config.glyph_size
        ))
    })?;

    let mut gt_boxes = Vec::with_capacity(present.len());
    for (&class, &(x0, y0, s)) in present.iter().zip(&cells) {
        let glyph = Glyph::ALL[class];
        let intensity = rng.gen_range(0.6..0.9);
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
        for v in 0..s {
            for u in 0..s {
                if glyph.covers(u, v, s) {
                    let (x, y) = (x0 + u, y0 + v);
                    pixels[y * n + x] = intensity;
                    min_x = min_x.min(x);
                    min_y = min_y.min(y);
                    max_x = max_x.max(x);
                    max_y = max_y.max(y);
                }
            }
        }
        let bbox = BBox::new(
            min_x as f64,
            min_y as f64,
            (max_x - min_x + 1) as f64,
            (max_y - min_y + 1) as f64,
        )?;
        gt_boxes.push((class, bbox));
    }

    let grain = config.noise_level / 2.0;
    let data: Vec<f32> = pixels
        .into_iter()
        .map(|v| {
            let jitter = if grain > 0.0 { rng.gen_range(-grain..grain) } else { 0.0 };
            quantize((v + jitter) as f32)
        })
        .collect();

    Ok(Sample {
        id: format!("s{index:06}.png"),
        image: GrayImage::from_vec(n, data)?,
        labels,
        patient_id: format!("p{index:06}"),
        gt_boxes,
    })
}
