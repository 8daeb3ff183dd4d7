//! Class activation maps on the feature grid, region boxes, feature masking
//! and image-resolution box prediction.

use crate::dataset::BBox;
use crate::model::{ClassifierHead, FeatureMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    PerClass(usize),
    Merged,
    Localization(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub h: usize,
    pub w: usize,
    /// Row-major `h × w`.
    pub values: Vec<f64>,
    pub normalized: bool,
    /// Set by [`normalize`] on a constant map, which it maps to zeros.
    pub degenerate: bool,
    /// Merged over no classes.
    pub empty: bool,
    pub source: MapSource,
}

impl ActivationMap {
    #[inline]
    pub fn at(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.w + b]
    }
}

/// Weighted channel sum `Σ_k weights[k] · fmap[k]` over the grid.
fn weighted_sum(fmap: &FeatureMap, weights: &[f64]) -> Vec<f64> {
    let (k, h, w) = fmap.shape();
    debug_assert_eq!(weights.len(), k);
    let mut out = vec![0.0; h * w];
    for (ki, &wk) in weights.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        for (o, &g) in out.iter_mut().zip(fmap.channel(ki)) {
            *o += wk * g;
        }
    }
    out
}

fn raw_map(fmap: &FeatureMap, values: Vec<f64>, source: MapSource) -> ActivationMap {
    let (_, h, w) = fmap.shape();
    ActivationMap {
        h,
        w,
        values,
        normalized: false,
        degenerate: false,
        empty: false,
        source,
    }
}

/// `M_c = Σ_k w_c^k g_k`; biases do not enter.
pub fn class_map(fmap: &FeatureMap, head: &ClassifierHead, c: usize) -> ActivationMap {
    raw_map(fmap, weighted_sum(fmap, head.class_weights(c)), MapSource::PerClass(c))
}

/// Sum of the class maps of `active`; an empty set gives a zero map flagged
/// `empty`.
pub fn merged_map(fmap: &FeatureMap, head: &ClassifierHead, active: &[usize]) -> ActivationMap {
    let (k, h, w) = fmap.shape();
    // summing the weight vectors first is equivalent and K·|active| cheaper
    let mut weights = vec![0.0; k];
    for &c in active {
        for (a, b) in weights.iter_mut().zip(head.class_weights(c)) {
            *a += b;
        }
    }
    let mut map = raw_map(fmap, weighted_sum(fmap, &weights), MapSource::Merged);
    if active.is_empty() {
        map.values = vec![0.0; h * w];
        map.empty = true;
    }
    map
}

/// Map built from the averaged weights `½(w_c + v_c)`.
pub fn localization_map(fmap: &FeatureMap, head_global: &ClassifierHead, head_rv: &ClassifierHead, c: usize) -> ActivationMap {
    let weights: Vec<f64> = head_global
        .class_weights(c)
        .iter()
        .zip(head_rv.class_weights(c))
        .map(|(w, v)| 0.5 * (w + v))
        .collect();
    raw_map(fmap, weighted_sum(fmap, &weights), MapSource::Localization(c))
}

/// Min–max scaling to `[0, 1]`; constant maps become all zeros and are
/// flagged degenerate.
pub fn normalize(map: &ActivationMap) -> ActivationMap {
    let (lo, hi) = map
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let mut out = map.clone();
    out.normalized = true;
    if !(range > 0.0) || !range.is_finite() {
        out.values.iter_mut().for_each(|v| *v = 0.0);
        out.degenerate = true;
        return out;
    }
    for v in &mut out.values {
        *v = ((*v - lo) / range).clamp(0.0, 1.0);
    }
    out.degenerate = false;
    out
}

/// Inclusive cell rectangle on the feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl GridBox {
    pub fn full(h: usize, w: usize) -> Self {
        GridBox {
            row0: 0,
            col0: 0,
            row1: h - 1,
            col1: w - 1,
        }
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        (self.row0..=self.row1).contains(&a) && (self.col0..=self.col1).contains(&b)
    }

    pub fn cells(&self) -> usize {
        (self.row1 - self.row0 + 1) * (self.col1 - self.col0 + 1)
    }
}

/// Tight box around the super-threshold cells; `None` when there are none.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMask {
    pub h: usize,
    pub w: usize,
    pub threshold: f64,
    pub grid_box: Option<GridBox>,
}

impl RegionMask {
    pub fn is_empty(&self) -> bool {
        self.grid_box.is_none()
    }

    /// The box features are kept in; an empty mask keeps the whole grid.
    pub fn effective_box(&self) -> GridBox {
        self.grid_box.unwrap_or_else(|| GridBox::full(self.h, self.w))
    }
}

pub fn extract_box(map: &ActivationMap, threshold: f64) -> RegionMask {
    debug_assert!(map.normalized);
    let mut bx: Option<GridBox> = None;
    for a in 0..map.h {
        for b in 0..map.w {
            if map.at(a, b) > threshold {
                bx = Some(match bx {
                    None => GridBox {
                        row0: a,
                        col0: b,
                        row1: a,
                        col1: b,
                    },
                    Some(g) => GridBox {
                        row0: g.row0.min(a),
                        col0: g.col0.min(b),
                        row1: g.row1.max(a),
                        col1: g.col1.max(b),
                    },
                });
            }
        }
    }
    RegionMask {
        h: map.h,
        w: map.w,
        threshold,
        grid_box: bx,
    }
}

/// Zeroes every channel outside the mask box. An empty mask keeps the full
/// map so the region branch stays defined.
pub fn mask_features(fmap: &FeatureMap, mask: &RegionMask) -> FeatureMap {
    let (k, h, w) = fmap.shape();
    debug_assert_eq!((h, w), (mask.h, mask.w));
    let bx = mask.effective_box();
    let mut out = fmap.clone();
    let vals = out.values_mut();
    for ki in 0..k {
        for a in 0..h {
            for b in 0..w {
                if !bx.contains(a, b) {
                    vals[(ki * h + a) * w + b] = 0.0;
                }
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centers and edge clamping: output pixel
/// `(y, x)` samples the grid at `((y + ½)·h/size − ½, (x + ½)·w/size − ½)`.
pub fn upsample_bilinear(map: &ActivationMap, size: usize) -> Vec<f64> {
    let coords = |n: usize| -> Vec<(usize, usize, f64)> {
        (0..size)
            .map(|i| {
                let s = ((i as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = coords(map.h);
    let cols = coords(map.w);
    let mut out = Vec::with_capacity(size * size);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = map.at(r0, c0) * (1.0 - fx) + map.at(r0, c1) * fx;
            let bot = map.at(r1, c0) * (1.0 - fx) + map.at(r1, c1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Tight boxes of the 8-connected components of `values > threshold` on a
/// `side × side` raster, largest box area first.
pub fn component_boxes(values: &[f64], side: usize, threshold: f64) -> Vec<BBox> {
    let mut seen = vec![false; values.len()];
    let mut comps: Vec<(usize, usize, usize, usize, usize)> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..values.len() {
        if seen[start] || !(values[start] > threshold) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut count = 0;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / side, p % side);
            count += 1;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= side as i64 || nx >= side as i64 {
                        continue;
                    }
                    let q = ny as usize * side + nx as usize;
                    if !seen[q] && values[q] > threshold {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        comps.push((x0, y0, x1, y1, count));
    }
    let area = |c: &(usize, usize, usize, usize, usize)| (c.2 - c.0 + 1) * (c.3 - c.1 + 1);
    // stable sort keeps raster order among equal areas
    comps.sort_by(|a, b| area(b).cmp(&area(a)).then(b.4.cmp(&a.4)));
    comps
        .into_iter()
        .map(|(x0, y0, x1, y1, _)| BBox {
            x: x0 as f64,
            y: y0 as f64,
            w: (x1 - x0 + 1) as f64,
            h: (y1 - y0 + 1) as f64,
        })
        .collect()
}

/// Upsamples a normalized map to `image_size` and returns the component boxes
/// above `threshold`, largest first.
pub fn predict_boxes(map: &ActivationMap, threshold: f64, image_size: usize) -> Vec<BBox> {
    if map.degenerate || map.empty {
        return Vec::new();
    }
    component_boxes(&upsample_bilinear(map, image_size), image_size, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_setup(seed: u64, c: usize, k: usize, h: usize, w: usize) -> (FeatureMap, ClassifierHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fmap = FeatureMap::new(k, h, w, rand_vec(&mut rng, k * h * w)).unwrap();
        let head = ClassifierHead::from_parts(c, k, rand_vec(&mut rng, c * k), rand_vec(&mut rng, c)).unwrap();
        (fmap, head)
    }

    fn map_of(h: usize, w: usize, values: Vec<f64>) -> ActivationMap {
        ActivationMap {
            h,
            w,
            values,
            normalized: true,
            degenerate: false,
            empty: false,
            source: MapSource::Merged,
        }
    }

    #[test]
    fn class_map_matches_triple_loop() {
        let (fmap, head) = rand_setup(1, 3, 8, 3, 3);
        for c in 0..3 {
            let m = class_map(&fmap, &head, c);
            for a in 0..3 {
                for b in 0..3 {
                    let mut s = 0.0;
                    for k in 0..8 {
                        s += head.weights()[c * 8 + k] * fmap.at(k, a, b);
                    }
                    assert!((m.at(a, b) - s).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn class_map_trivial_cases() {
        let (fmap, _) = rand_setup(2, 1, 4, 3, 3);
        let zero = ClassifierHead::zeros(2, 4);
        assert!(class_map(&fmap, &zero, 1).values.iter().all(|&v| v == 0.0));
        let single = FeatureMap::new(1, 2, 2, vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let one = ClassifierHead::from_parts(1, 1, vec![1.0], vec![7.0]).unwrap();
        assert_eq!(class_map(&single, &one, 0).values, single.values());
    }

    #[test]
    fn merged_map_sums_class_maps() {
        let (fmap, head) = rand_setup(3, 4, 8, 5, 5);
        let m = merged_map(&fmap, &head, &[0, 1]);
        let (a, b) = (class_map(&fmap, &head, 0), class_map(&fmap, &head, 1));
        for i in 0..25 {
            assert!((m.values[i] - a.values[i] - b.values[i]).abs() < 1e-6);
        }
        let single = merged_map(&fmap, &head, &[2]);
        for (x, y) in single.values.iter().zip(&class_map(&fmap, &head, 2).values) {
            assert!((x - y).abs() < 1e-12);
        }
        let empty = merged_map(&fmap, &head, &[]);
        assert!(empty.empty && empty.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_cases() {
        let m = normalize(&ActivationMap {
            normalized: false,
            ..map_of(1, 2, vec![1.0, 3.0])
        });
        assert_eq!(m.values, vec![0.0, 1.0]);
        let c = normalize(&map_of(2, 2, vec![4.0; 4]));
        assert!(c.degenerate && c.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extract_box_cases() {
        let mut v = vec![0.0; 49];
        v[2 * 7 + 5] = 1.0;
        let r = extract_box(&map_of(7, 7, v.clone()), 0.8);
        assert_eq!(
            r.grid_box,
            Some(GridBox {
                row0: 2,
                col0: 5,
                row1: 2,
                col1: 5
            })
        );
        v[2 * 7 + 5] = 0.0;
        v[0] = 0.9;
        v[48] = 1.0;
        assert_eq!(extract_box(&map_of(7, 7, v), 0.8).grid_box, Some(GridBox::full(7, 7)));
        assert!(extract_box(&map_of(2, 2, vec![0.8; 4]), 0.8).is_empty());
    }

    #[test]
    fn mask_features_cases() {
        let (fmap, _) = rand_setup(4, 1, 3, 4, 4);
        let full = RegionMask {
            h: 4,
            w: 4,
            threshold: 0.8,
            grid_box: Some(GridBox::full(4, 4)),
        };
        assert_eq!(mask_features(&fmap, &full), fmap);
        let one = RegionMask {
            grid_box: Some(GridBox {
                row0: 1,
                col0: 2,
                row1: 1,
                col1: 2,
            }),
            ..full
        };
        let masked = mask_features(&fmap, &one);
        for k in 0..3 {
            assert_eq!(masked.channel(k).iter().filter(|&&v| v == 0.0).count(), 15);
            assert_eq!(masked.at(k, 1, 2), fmap.at(k, 1, 2));
        }
        let empty = RegionMask { grid_box: None, ..full };
        assert_eq!(mask_features(&fmap, &empty), fmap);
    }

    #[test]
    fn localization_map_cases() {
        let (fmap, head) = rand_setup(5, 3, 6, 4, 4);
        let same = localization_map(&fmap, &head, &head, 1);
        for (x, y) in same.values.iter().zip(&class_map(&fmap, &head, 1).values) {
            assert!((x - y).abs() < 1e-12);
        }
        let neg = ClassifierHead::from_parts(3, 6, head.weights().iter().map(|v| -v).collect(), vec![0.0; 3]).unwrap();
        assert!(localization_map(&fmap, &head, &neg, 1).values.iter().all(|v| v.abs() < 1e-12));
        let (_, rv) = rand_setup(6, 3, 6, 4, 4);
        let l = localization_map(&fmap, &head, &rv, 2);
        let (g, r) = (class_map(&fmap, &head, 2), class_map(&fmap, &rv, 2));
        for i in 0..16 {
            assert!((l.values[i] - 0.5 * (g.values[i] + r.values[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn single_bright_cell_upsamples_to_one_cell_box() {
        let mut v = vec![0.0; 49];
        v[3 * 7 + 3] = 1.0;
        let boxes = predict_boxes(&map_of(7, 7, v), 0.5, 224);
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert!((b.w - 32.0).abs() <= 2.0 && (b.h - 32.0).abs() <= 2.0, "{b:?}");
        let (cx, cy) = b.center();
        assert!((cx - 112.0).abs() <= 1.0 && (cy - 112.0).abs() <= 1.0);
    }

    #[test]
    fn zero_map_gives_no_boxes() {
        assert!(predict_boxes(&map_of(7, 7, vec![0.0; 49]), 0.5, 64).is_empty());
    }

    #[test]
    fn two_blobs_ordered_by_area() {
        let mut v = vec![0.0; 49];
        v[7 + 1] = 1.0;
        for (a, b) in [(4, 4), (4, 5), (5, 4), (5, 5)] {
            v[a * 7 + b] = 1.0;
        }
        let boxes = predict_boxes(&map_of(7, 7, v), 0.5, 70);
        assert_eq!(boxes.len(), 2);
        assert!(boxes[0].area() > boxes[1].area());
        assert!(boxes[0].x > boxes[1].x);
    }

    #[test]
    fn upsampling_identity_at_native_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = map_of(5, 5, (0..25).map(|_| rng.gen()).collect());
        assert_eq!(upsample_bilinear(&m, 5), m.values);
    }

    #[test]
    fn diagonal_pixels_join_one_component() {
        let mut v = vec![0.0; 16];
        v[0] = 1.0;
        v[5] = 1.0;
        v[10] = 1.0;
        let boxes = component_boxes(&v, 4, 0.5);
        assert_eq!(boxes, vec![BBox {
            x: 0.0,
            y: 0.0,
            w: 3.0,
            h: 3.0
        }]);
    }

    proptest! {
        #[test]
        fn class_map_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            let (f1, head) = rand_setup(seed, 2, 5, 3, 4);
            let (f2, _) = rand_setup(seed + 7919, 2, 5, 3, 4);
            let sum = FeatureMap::new(5, 3, 4, f1.values().iter().zip(f2.values()).map(|(a, b)| alpha * a + b).collect()).unwrap();
            let (m1, m2, ms) = (class_map(&f1, &head, 1), class_map(&f2, &head, 1), class_map(&sum, &head, 1));
            for i in 0..12 {
                prop_assert!((ms.values[i] - (alpha * m1.values[i] + m2.values[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn merged_map_additive_over_disjoint_sets(seed in 0u64..1000) {
            let (fmap, head) = rand_setup(seed, 5, 4, 3, 3);
            let (s, t) = (vec![0, 3], vec![1, 4]);
            let all = merged_map(&fmap, &head, &[0, 1, 3, 4]);
            let (ms, mt) = (merged_map(&fmap, &head, &s), merged_map(&fmap, &head, &t));
            for i in 0..9 {
                prop_assert!((all.values[i] - ms.values[i] - mt.values[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn normalize_range_and_idempotence(values in prop::collection::vec(-100.0f64..100.0, 2..50)) {
            let n = values.len();
            let m = normalize(&ActivationMap { normalized: false, ..map_of(1, n, values) });
            if !m.degenerate {
                let lo = m.values.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = m.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(lo, 0.0);
                prop_assert_eq!(hi, 1.0);
                let again = normalize(&m);
                for (a, b) in again.values.iter().zip(&m.values) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn extract_box_sound_tight_and_matches_scan(values in prop::collection::vec(0.0f64..1.0, 49)) {
            let m = map_of(7, 7, values);
            let r = extract_box(&m, 0.8);
            let hot: Vec<(usize, usize)> = (0..7).flat_map(|a| (0..7).map(move |b| (a, b))).filter(|&(a, b)| m.at(a, b) > 0.8).collect();
            match r.grid_box {
                None => prop_assert!(hot.is_empty()),
                Some(g) => {
                    prop_assert!(hot.iter().all(|&(a, b)| g.contains(a, b)));
                    prop_assert_eq!(g.row0, hot.iter().map(|p| p.0).min().unwrap());
                    prop_assert_eq!(g.row1, hot.iter().map(|p| p.0).max().unwrap());
                    prop_assert_eq!(g.col0, hot.iter().map(|p| p.1).min().unwrap());
                    prop_assert_eq!(g.col1, hot.iter().map(|p| p.1).max().unwrap());
                }
            }
        }

        #[test]
        fn masked_sum_is_box_partial_sum(seed in 0u64..1000, r0 in 0usize..5, c0 in 0usize..5, dr in 0usize..5, dc in 0usize..5) {
            let (fmap, _) = rand_setup(seed, 1, 3, 5, 5);
            let g = GridBox { row0: r0, col0: c0, row1: (r0 + dr).min(4), col1: (c0 + dc).min(4) };
            let mask = RegionMask { h: 5, w: 5, threshold: 0.8, grid_box: Some(g) };
            let masked = mask_features(&fmap, &mask);
            let mut oracle = 0.0;
            for k in 0..3 {
                for a in g.row0..=g.row1 {
                    for b in g.col0..=g.col1 {
                        oracle += fmap.at(k, a, b);
                    }
                }
            }
            prop_assert!((masked.values().iter().sum::<f64>() - oracle).abs() < 1e-9);
        }

        #[test]
        fn bias_does_not_move_boxes(seed in 0u64..500, shift in -5.0f64..5.0) {
            let (fmap, head) = rand_setup(seed, 2, 4, 7, 7);
            let shifted = ClassifierHead::from_parts(2, 4, head.weights().to_vec(), head.bias().iter().map(|b| b + shift).collect()).unwrap();
            let a = normalize(&class_map(&fmap, &head, 0));
            let b = normalize(&class_map(&fmap, &shifted, 0));
            prop_assert_eq!(extract_box(&a, 0.8), extract_box(&b, 0.8));
            prop_assert_eq!(predict_boxes(&a, 0.6, 56), predict_boxes(&b, 0.6, 56));
        }
    }
}
