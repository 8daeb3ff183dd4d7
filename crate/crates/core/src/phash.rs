//! 64-bit DCT perceptual hash and Hamming distance.
//!
//! Pipeline: area-average the image down to 32×32, take the 2-D type-II DCT,
//! keep the 8×8 lowest-frequency block, and set bit `8·row + col` when that
//! coefficient exceeds the median of the 63 AC coefficients. The DC bit is
//! always 0. Ties at the median give 0.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataset::{GrayImage, Sample};
use crate::error::{Error, Result};

pub const WORK_SIZE: usize = 32;
pub const BLOCK: usize = 8;
const ROUNDOFF: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct HashCode(pub u64);

impl HashCode {
    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 16 {
            return None;
        }
        u64::from_str_radix(s, 16).ok().map(HashCode)
    }
}

impl fmt::Display for HashCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[inline]
pub fn hamming(a: HashCode, b: HashCode) -> u32 {
    (a.0 ^ b.0).count_ones()
}

/// Area-averaging resample of an `n`×`n` grid to `out`×`out`. Each output
/// cell is the mean of the source area it covers, with fractional weights
/// for partially covered pixels.
pub fn area_downscale(values: &[f64], n: usize, out: usize) -> Vec<f64> {
    assert_eq!(values.len(), n * n, "grid size mismatch");
    // 1-D weights: weights[o] = list of (src index, overlap length)
    let axis: Vec<Vec<(usize, f64)>> = (0..out)
        .map(|o| {
            let lo = o as f64 * n as f64 / out as f64;
            let hi = (o + 1) as f64 * n as f64 / out as f64;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|i| {
                    let overlap = hi.min((i + 1) as f64) - lo.max(i as f64);
                    (overlap > 0.0).then_some((i, overlap))
                })
                .collect()
        })
        .collect();
    let mut result = vec![0.0; out * out];
    for (oy, wy) in axis.iter().enumerate() {
        for (ox, wx) in axis.iter().enumerate() {
            let mut acc = 0.0;
            let mut total = 0.0;
            for &(sy, ay) in wy {
                for &(sx, ax) in wx {
                    let w = ay * ax;
                    acc += w * values[sy * n + sx];
                    total += w;
                }
            }
            result[oy * out + ox] = acc / total;
        }
    }
    result
}

fn dct_basis() -> &'static [f64] {
    static BASIS: OnceLock<Vec<f64>> = OnceLock::new();
    BASIS.get_or_init(|| {
        let n = WORK_SIZE;
        let mut b = vec![0.0; n * n];
        for u in 0..n {
            let scale = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for x in 0..n {
                b[u * n + x] =
                    scale * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos();
            }
        }
        b
    })
}

/// Low-frequency `BLOCK`×`BLOCK` corner of the orthonormal 2-D DCT-II of a
/// `WORK_SIZE`×`WORK_SIZE` grid, computed separably.
pub fn dct_low_block(grid: &[f64]) -> [f64; BLOCK * BLOCK] {
    let n = WORK_SIZE;
    let basis = dct_basis();
    // rows: tmp[y][v] = sum_x grid[y][x] * basis[v][x]
    let mut tmp = vec![0.0; n * BLOCK];
    for y in 0..n {
        for v in 0..BLOCK {
            tmp[y * BLOCK + v] = (0..n).map(|x| grid[y * n + x] * basis[v * n + x]).sum();
        }
    }
    let mut out = [0.0; BLOCK * BLOCK];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            out[u * BLOCK + v] = (0..n).map(|y| basis[u * n + y] * tmp[y * BLOCK + v]).sum();
        }
    }
    // Cosine sums of a flat signal cancel only up to rounding; snap that
    // residue to an exact zero.
    let snap = ROUNDOFF * out[0].abs().max(1.0);
    for c in out.iter_mut().skip(1) {
        if c.abs() < snap {
            *c = 0.0;
        }
    }
    out
}

/// Bits from a low-frequency block: bit `k` set iff `block[k]` exceeds the
/// median of the AC coefficients (`k >= 1`); the DC bit is never set.
pub fn hash_from_block(block: &[f64; BLOCK * BLOCK]) -> HashCode {
    let mut ac: Vec<f64> = block[1..].to_vec();
    ac.sort_by(f64::total_cmp);
    let median = ac[ac.len() / 2];
    let mut bits = 0u64;
    for (k, &c) in block.iter().enumerate().skip(1) {
        if c > median {
            bits |= 1 << k;
        }
    }
    HashCode(bits)
}

pub fn phash(image: &GrayImage) -> HashCode {
    let values: Vec<f64> = image.pixels().iter().map(|&v| f64::from(v)).collect();
    let small = area_downscale(&values, image.side(), WORK_SIZE);
    hash_from_block(&dct_low_block(&small))
}

/// Hashes of a sample set keyed by sample id, plus a digest of the image
/// content they were computed from.
#[derive(Clone, Debug, Default)]
pub struct HashCache {
    hashes: HashMap<String, HashCode>,
    digest: String,
}

/// SHA-256 over every sample's id and raw pixels, in order.
pub fn content_digest(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        h.update([0u8]);
        for v in s.image.pixels() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl HashCache {
    pub fn build(samples: &[Sample]) -> Self {
        let hashes = samples
            .par_iter()
            .map(|s| (s.id.clone(), phash(&s.image)))
            .collect();
        HashCache {
            hashes,
            digest: content_digest(samples),
        }
    }

    pub fn get(&self, id: &str) -> Option<HashCode> {
        self.hashes.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hashes.is_empty()
    }

    /// Writes `#content=<digest>` then one `sample_id,hex16` line per sample,
    /// sorted by id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ids: Vec<&String> = self.hashes.keys().collect();
        ids.sort();
        let mut out = Vec::new();
        writeln!(out, "#content={}", self.digest).expect("write to Vec");
        for id in ids {
            writeln!(out, "{},{}", id, self.hashes[id]).expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads a cache file if its content digest matches `samples`; otherwise
    /// (or when the file is absent) rebuilds and rewrites it.
    pub fn load_or_build(path: &Path, samples: &[Sample]) -> Result<Self> {
        let digest = content_digest(samples);
        if let Ok(text) = fs::read_to_string(path) {
            let mut lines = text.lines();
            if lines.next().and_then(|l| l.strip_prefix("#content=")) == Some(digest.as_str()) {
                let mut hashes = HashMap::with_capacity(samples.len());
                for (i, line) in lines.enumerate() {
                    let (id, hex) = line.split_once(',').ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        line: i as u64 + 2,
                        message: "expected sample_id,hex16".into(),
                    })?;
                    let code = HashCode::from_hex(hex).ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        line: i as u64 + 2,
                        message: format!("bad hash {hex:?}"),
                    })?;
                    hashes.insert(id.to_string(), code);
                }
                return Ok(HashCache { hashes, digest });
            }
            log::info!("hash cache {} is stale; rebuilding", path.display());
        }
        let cache = Self::build(samples);
        cache.save(path)?;
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_from_fn(n: usize, f: impl Fn(usize, usize) -> f32) -> GrayImage {
        let data = (0..n * n).map(|i| f(i % n, i / n)).collect();
        GrayImage::from_vec(n, data).unwrap()
    }

    fn natural(n: usize) -> GrayImage {
        image_from_fn(n, |x, y| {
            let (fx, fy) = (x as f32 / n as f32, y as f32 / n as f32);
            0.45 + 0.2 * (6.0 * fx).sin() * (4.0 * fy).cos() + 0.15 * (fx - fy)
        })
    }

    #[test]
    fn constant_image_hashes_to_zero() {
        assert_eq!(phash(&GrayImage::filled(64, 0.7)), HashCode(0));
        assert_eq!(phash(&GrayImage::zeros(40)), HashCode(0));
    }

    #[test]
    fn hamming_extremes() {
        let h = HashCode(0xdead_beef_0123_4567);
        assert_eq!(hamming(h, h), 0);
        assert_eq!(hamming(HashCode(0), HashCode(u64::MAX)), 64);
    }

    #[test]
    fn downscale_of_multiple_is_block_mean() {
        let img: Vec<f64> = (0..64 * 64).map(|i| (i % 7) as f64).collect();
        let small = area_downscale(&img, 64, 32);
        let expect = (img[0] + img[1] + img[64] + img[65]) / 4.0;
        assert!((small[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn downscale_preserves_mean_for_odd_sizes() {
        let img: Vec<f64> = (0..45 * 45).map(|i| ((i * 13) % 17) as f64).collect();
        let small = area_downscale(&img, 45, 32);
        let m0 = img.iter().sum::<f64>() / img.len() as f64;
        let m1 = small.iter().sum::<f64>() / small.len() as f64;
        assert!((m0 - m1).abs() < 1e-9);
    }

    #[test]
    fn brightness_shift_changes_few_bits() {
        let img = natural(64);
        let shifted = image_from_fn(64, |x, y| img.get(x, y) + 0.05);
        assert!(hamming(phash(&img), phash(&shifted)) <= 8);
    }

    #[test]
    fn nearest_neighbour_upscale_keeps_hash() {
        for n in [32, 64] {
            let img = natural(n);
            let up = image_from_fn(2 * n, |x, y| img.get(x / 2, y / 2));
            assert_eq!(phash(&img), phash(&up));
        }
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hashes.csv");
        let mut samples: Vec<Sample> = (0..3)
            .map(|i| Sample {
                id: format!("s{i}"),
                image: image_from_fn(32, |x, y| ((x * (i + 1) + y) % 32) as f32 / 32.0),
                labels: crate::dataset::LabelVector::empty(2),
                patient_id: "p".into(),
                gt_boxes: vec![],
            })
            .collect();
        let built = HashCache::load_or_build(&path, &samples).unwrap();
        let loaded = HashCache::load_or_build(&path, &samples).unwrap();
        assert_eq!(built.hashes, loaded.hashes);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("s0,"));

        samples[0].image = GrayImage::filled(32, 0.5);
        let rebuilt = HashCache::load_or_build(&path, &samples).unwrap();
        assert_eq!(rebuilt.get("s0"), Some(HashCode(0)));
    }

    /// Naive 2-D DCT-II straight from the definition, O(N^4).
    fn naive_block(grid: &[f64]) -> [f64; 64] {
        let n = WORK_SIZE;
        let alpha = |u: usize| if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        let mut out = [0.0; 64];
        for u in 0..8 {
            for v in 0..8 {
                let mut acc = 0.0;
                for y in 0..n {
                    for x in 0..n {
                        acc += grid[y * n + x]
                            * (std::f64::consts::PI * (2 * y + 1) as f64 * u as f64 / (2 * n) as f64).cos()
                            * (std::f64::consts::PI * (2 * x + 1) as f64 * v as f64 / (2 * n) as f64).cos();
                    }
                }
                out[u * 8 + v] = alpha(u) * alpha(v) * acc;
            }
        }
        out
    }

    #[test]
    fn centered_square_matches_naive_dct() {
        let img = image_from_fn(32, |x, y| if (12..20).contains(&x) && (12..20).contains(&y) { 1.0 } else { 0.0 });
        let grid: Vec<f64> = img.pixels().iter().map(|&v| f64::from(v)).collect();
        let naive = naive_block(&grid);
        let fast = dct_low_block(&grid);
        for k in 0..64 {
            assert!((naive[k] - fast[k]).abs() < 1e-9, "coefficient {k}");
        }
        let mut ac: Vec<f64> = naive[1..].to_vec();
        ac.sort_by(f64::total_cmp);
        let median = ac[31];
        let expect = (1..64).filter(|&k| naive[k] > median + 1e-9).fold(0u64, |h, k| h | 1 << k);
        assert_eq!(phash(&img), HashCode(expect));
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
            let (a, b, c) = (HashCode(a), HashCode(b), HashCode(c));
            prop_assert_eq!(hamming(a, b), hamming(b, a));
            prop_assert!(hamming(a, c) <= hamming(a, b) + hamming(b, c));
            prop_assert_eq!(hamming(a, b) == 0, a == b);
        }

        #[test]
        fn hamming_matches_bit_loop(a in any::<u64>(), b in any::<u64>()) {
            let slow = (0..64).filter(|k| (a >> k) & 1 != (b >> k) & 1).count() as u32;
            prop_assert_eq!(hamming(HashCode(a), HashCode(b)), slow);
        }
    }
}
