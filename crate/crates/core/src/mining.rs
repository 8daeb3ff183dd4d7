//! Multi-label hard example mining.
//!
//! Every anchor with at least one disease gets a candidate pool: a random
//! subset of disjoint-label negatives and of exact/partial-match positives,
//! each sorted ascending by perceptual-hash distance to the anchor. A hard
//! negative looks like the anchor (small distance); a hard positive does not
//! (large distance). The curriculum shrinks the sampling window from the
//! whole pool toward the hard end over `ramp_epochs`.

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelVector, Sample};
use crate::error::{Error, Result};
use crate::phash::{hamming, HashCache, HashCode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchKind {
    Exact,
    Partial,
    Disjoint,
}

/// Two empty label sets have an empty intersection and are `Disjoint`.
pub fn match_kind(a: &LabelVector, b: &LabelVector) -> MatchKind {
    debug_assert_eq!(a.len(), b.len());
    if !a.intersects(b) {
        MatchKind::Disjoint
    } else if a == b {
        MatchKind::Exact
    } else {
        MatchKind::Partial
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub n_neg: usize,
    pub n_pos_max: usize,
    pub partial_frac: f64,
    pub allow_partial: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            n_neg: 1000,
            n_pos_max: 500,
            partial_frac: 0.25,
            allow_partial: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub ramp_epochs: usize,
    /// Smallest window, as a fraction of the pool, reached at `ramp_epochs`.
    pub floor_frac: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            ramp_epochs: 10,
            floor_frac: 0.1,
        }
    }
}

/// Labels and hashes of the mining corpus, addressed by position.
#[derive(Clone, Debug)]
pub struct MiningCorpus {
    pub labels: Vec<LabelVector>,
    pub hashes: Vec<HashCode>,
}

impl MiningCorpus {
    pub fn from_samples(samples: &[&Sample], cache: &HashCache) -> Result<Self> {
        let hashes = samples
            .iter()
            .map(|s| {
                cache
                    .get(&s.id)
                    .ok_or_else(|| Error::Schema(format!("no cached hash for sample {}", s.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MiningCorpus {
            labels: samples.iter().map(|s| s.labels.clone()).collect(),
            hashes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveEntry {
    pub index: usize,
    pub kind: MatchKind,
    pub distance: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeEntry {
    pub index: usize,
    pub distance: u32,
}

/// Candidates for one anchor; both lists sorted ascending by distance (ties
/// by corpus index).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub anchor: usize,
    pub positives: Vec<PositiveEntry>,
    pub negatives: Vec<NegativeEntry>,
}

impl CandidatePool {
    /// A pool that cannot produce a triplet; the sampler skips it.
    pub fn is_poolless(&self) -> bool {
        self.positives.is_empty() || self.negatives.is_empty()
    }

    pub fn partial_count(&self) -> usize {
        self.positives.iter().filter(|p| p.kind == MatchKind::Partial).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletConstraint {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn pick<R: Rng + ?Sized>(rng: &mut R, from: &[usize], k: usize) -> Vec<usize> {
    let k = k.min(from.len());
    let mut chosen: Vec<usize> = index::sample(rng, from.len(), k).into_iter().map(|i| from[i]).collect();
    chosen.sort_unstable();
    chosen
}

/// Builds the candidate pool of corpus member `anchor`.
///
/// Positives: when partial matches are allowed, `⌊partial_frac · n⌋` of the
/// `n = min(n_pos_max, available)` slots go to partial matches and the rest
/// to exact matches, each kind backfilling the other when short.
pub fn build_pool<R: Rng + ?Sized>(
    anchor: usize,
    corpus: &MiningCorpus,
    rng: &mut R,
    config: &PoolConfig,
) -> Result<CandidatePool> {
    let anchor_labels = &corpus.labels[anchor];
    if anchor_labels.is_no_finding() {
        return Err(Error::Schema(format!(
            "anchor {anchor} has no positive label and cannot be mined"
        )));
    }
    let mut exact = Vec::new();
    let mut partial = Vec::new();
    let mut disjoint = Vec::new();
    for (i, labels) in corpus.labels.iter().enumerate() {
        if i == anchor {
            continue;
        }
        match match_kind(anchor_labels, labels) {
            MatchKind::Exact => exact.push(i),
            MatchKind::Partial => partial.push(i),
            MatchKind::Disjoint => disjoint.push(i),
        }
    }

    let negatives_idx = pick(rng, &disjoint, config.n_neg);

    let (n_exact, n_partial) = if config.allow_partial {
        let total = config.n_pos_max.min(exact.len() + partial.len());
        let want_partial = (config.partial_frac * total as f64 + 1e-9).floor() as usize;
        let mut n_partial = want_partial.min(partial.len());
        let n_exact = (total - n_partial).min(exact.len());
        n_partial = total - n_exact;
        (n_exact, n_partial)
    } else {
        (config.n_pos_max.min(exact.len()), 0)
    };
    let exact_idx = pick(rng, &exact, n_exact);
    let partial_idx = pick(rng, &partial, n_partial);

    let hash = corpus.hashes[anchor];
    let dist = |i: usize| hamming(hash, corpus.hashes[i]);
    let mut positives: Vec<PositiveEntry> = exact_idx
        .into_iter()
        .map(|i| (i, MatchKind::Exact))
        .chain(partial_idx.into_iter().map(|i| (i, MatchKind::Partial)))
        .map(|(index, kind)| PositiveEntry {
            index,
            kind,
            distance: dist(index),
        })
        .collect();
    positives.sort_by_key(|p| (p.distance, p.index));
    let mut negatives: Vec<NegativeEntry> = negatives_idx
        .into_iter()
        .map(|index| NegativeEntry {
            index,
            distance: dist(index),
        })
        .collect();
    negatives.sort_by_key(|n| (n.distance, n.index));

    let pool = CandidatePool {
        anchor,
        positives,
        negatives,
    };
    if pool.is_poolless() {
        log::debug!(
            "anchor {anchor} {}: {} positives, {} negatives; skipped by the sampler",
            anchor_labels,
            pool.positives.len(),
            pool.negatives.len()
        );
    }
    Ok(pool)
}

/// Pools for every corpus member, `None` for no-finding anchors. Pool `i`
/// draws from its own random stream so the result is independent of
/// scheduling.
#[derive(Clone, Debug)]
pub struct PoolSet {
    pools: Vec<Option<CandidatePool>>,
}

impl PoolSet {
    pub fn build(corpus: &MiningCorpus, config: &PoolConfig, seed: u64) -> Self {
        let pools = (0..corpus.len())
            .into_par_iter()
            .map(|i| {
                if corpus.labels[i].is_no_finding() {
                    return None;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                Some(build_pool(i, corpus, &mut rng, config).expect("anchor has labels"))
            })
            .collect();
        PoolSet { pools }
    }

    pub fn from_pools(len: usize, pools: Vec<CandidatePool>) -> Self {
        let mut slots = vec![None; len];
        for p in pools {
            let a = p.anchor;
            slots[a] = Some(p);
        }
        PoolSet { pools: slots }
    }

    pub fn get(&self, anchor: usize) -> Option<&CandidatePool> {
        self.pools.get(anchor).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CandidatePool> + '_ {
        self.pools.iter().flatten()
    }

    /// Anchors whose pools can produce a triplet.
    pub fn usable_anchors(&self) -> Vec<usize> {
        self.iter().filter(|p| !p.is_poolless()).map(|p| p.anchor).collect()
    }
}

/// `q = max(0, 1 − epoch / ramp_epochs)`: 1 means the whole pool is
/// eligible, 0 means only the hardest window.
pub fn curriculum_quantile(epoch: usize, config: &CurriculumConfig) -> f64 {
    if config.ramp_epochs == 0 {
        return 0.0;
    }
    (1.0 - epoch as f64 / config.ramp_epochs as f64).max(0.0)
}

/// Number of hardest candidates eligible at `epoch` in a pool of `len`.
pub fn window_len(len: usize, epoch: usize, config: &CurriculumConfig) -> usize {
    if len == 0 {
        return 0;
    }
    let frac = curriculum_quantile(epoch, config).max(config.floor_frac);
    (((frac * len as f64) - 1e-9).ceil() as usize).clamp(1, len)
}

/// One triplet for `pool` from the epoch's hardness window: negatives from
/// the closest end, positives from the farthest end.
pub fn triplet_for_anchor<R: Rng + ?Sized>(
    pool: &CandidatePool,
    epoch: usize,
    config: &CurriculumConfig,
    rng: &mut R,
) -> Option<TripletConstraint> {
    if pool.is_poolless() {
        return None;
    }
    let np = pool.positives.len();
    let wp = window_len(np, epoch, config);
    let positive = pool.positives[np - wp + rng.gen_range(0..wp)].index;
    let wn = window_len(pool.negatives.len(), epoch, config);
    let negative = pool.negatives[rng.gen_range(0..wn)].index;
    Some(TripletConstraint {
        anchor: pool.anchor,
        positive,
        negative,
    })
}

/// Draws `batch_size` anchors uniformly among usable pools and one triplet
/// for each. Empty when no pool is usable.
pub fn sample_triplets<R: Rng + ?Sized>(
    pools: &PoolSet,
    epoch: usize,
    batch_size: usize,
    config: &CurriculumConfig,
    rng: &mut R,
) -> Vec<TripletConstraint> {
    let usable = pools.usable_anchors();
    if usable.is_empty() {
        return Vec::new();
    }
    (0..batch_size)
        .filter_map(|_| {
            let anchor = usable[rng.gen_range(0..usable.len())];
            triplet_for_anchor(pools.get(anchor)?, epoch, config, rng)
        })
        .collect()
}
