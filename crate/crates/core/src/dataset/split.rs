use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

/// Sample ids of the three partitions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    /// Checks pairwise disjointness of ids and of the patients behind them.
    pub fn check_disjoint(&self, samples: &[Sample]) -> Result<()> {
        let patient: BTreeMap<&str, &str> = samples
            .iter()
            .map(|s| (s.id.as_str(), s.patient_id.as_str()))
            .collect();
        let mut seen_ids = HashSet::new();
        let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
        for (part, ids) in [&self.train, &self.val, &self.test].into_iter().enumerate() {
            for id in ids {
                if !seen_ids.insert(id.as_str()) {
                    return Err(Error::Schema(format!("sample {id} appears in two splits")));
                }
                let p = patient
                    .get(id.as_str())
                    .ok_or_else(|| Error::Schema(format!("split references unknown sample {id}")))?;
                match owner.get(p) {
                    Some(&other) if other != part => {
                        return Err(Error::Schema(format!("patient {p} crosses splits")))
                    }
                    _ => {
                        owner.insert(p, part);
                    }
                }
            }
        }
        Ok(())
    }

    /// Resolves the three id lists against `samples`, preserving split order.
    pub fn partition<'a>(&self, samples: &'a [Sample]) -> Result<[Vec<&'a Sample>; 3]> {
        let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let resolve = |ids: &[String]| -> Result<Vec<&'a Sample>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::Schema(format!("split references unknown sample {id}")))
                })
                .collect()
        };
        Ok([resolve(&self.train)?, resolve(&self.val)?, resolve(&self.test)?])
    }
}

/// Patient-disjoint split. `fractions` are the train and validation shares;
/// whatever remains becomes the test set (empty when they sum to 1).
///
/// Patients are shuffled with `seed` and assigned greedily: train until its
/// quota is met, then validation, then test. A patient that fits in no
/// remaining quota goes to train with a warning.
pub fn split_by_patient(samples: &[Sample], fractions: (f64, f64), seed: u64) -> Result<SplitSpec> {
    let (f_train, f_val) = fractions;
    if !(f_train > 0.0 && f_val >= 0.0 && f_train + f_val <= 1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "split fractions ({f_train}, {f_val}) must be positive and sum to at most 1"
        )));
    }
    let n = samples.len();
    let n_train = (f_train * n as f64).round() as usize;
    let n_val = ((f_val * n as f64).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_val);

    let mut by_patient: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in samples {
        by_patient.entry(&s.patient_id).or_default().push(&s.id);
    }
    let mut patients: Vec<(&str, Vec<&str>)> = by_patient.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);

    let mut split = SplitSpec::default();
    for (patient, ids) in patients {
        let k = ids.len();
        let target = if split.train.len() + k <= n_train {
            &mut split.train
        } else if split.val.len() + k <= n_val {
            &mut split.val
        } else if split.test.len() + k <= n_test {
            &mut split.test
        } else {
            if k > n_val.max(n_test) {
                log::warn!("patient {patient} owns {k} samples, more than any split allows; placed in train");
            }
            &mut split.train
        };
        target.extend(ids.into_iter().map(String::from));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{GrayImage, LabelVector};
    use proptest::prelude::*;

    fn sample(id: usize, patient: usize) -> Sample {
        Sample {
            id: format!("s{id}"),
            image: GrayImage::zeros(1),
            labels: LabelVector::empty(2),
            patient_id: format!("p{patient}"),
            gt_boxes: vec![],
        }
    }

    #[test]
    fn two_patients_are_never_split() {
        let samples: Vec<Sample> = (0..6).map(|i| sample(i, i % 2)).collect();
        for seed in 0..10 {
            let split = split_by_patient(&samples, (0.5, 0.5), seed).unwrap();
            split.check_disjoint(&samples).unwrap();
            assert_eq!(split.train.len() + split.val.len(), 6);
            assert!(split.test.is_empty());
        }
    }

    #[test]
    fn hundred_single_image_patients_split_ninety_ten() {
        let samples: Vec<Sample> = (0..100).map(|i| sample(i, i)).collect();
        let split = split_by_patient(&samples, (0.9, 0.1), 0).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (90, 10, 0));
        let train: HashSet<_> = split.train.iter().collect();
        assert!(split.val.iter().all(|id| !train.contains(id)));
        split.check_disjoint(&samples).unwrap();
    }

    #[test]
    fn deterministic_for_seed() {
        let samples: Vec<Sample> = (0..50).map(|i| sample(i, i / 3)).collect();
        let a = split_by_patient(&samples, (0.7, 0.1), 9).unwrap();
        let b = split_by_patient(&samples, (0.7, 0.1), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_patient_goes_to_train() {
        let mut samples: Vec<Sample> = (0..10).map(|i| sample(i, 0)).collect();
        samples.push(sample(10, 1));
        let split = split_by_patient(&samples, (0.5, 0.3), 1).unwrap();
        assert!(split.train.contains(&"s0".to_string()));
        split.check_disjoint(&samples).unwrap();
    }

    #[test]
    fn rejects_bad_fractions() {
        assert!(split_by_patient(&[], (0.8, 0.3), 0).is_err());
        assert!(split_by_patient(&[], (0.0, 0.3), 0).is_err());
    }

    proptest! {
        #[test]
        fn patients_never_cross(patients in prop::collection::vec(0usize..12, 1..60), seed in any::<u64>()) {
            let samples: Vec<Sample> = patients.iter().enumerate().map(|(i, &p)| sample(i, p)).collect();
            let split = split_by_patient(&samples, (0.6, 0.2), seed).unwrap();
            prop_assert!(split.check_disjoint(&samples).is_ok());
            prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), samples.len());
        }
    }
}
