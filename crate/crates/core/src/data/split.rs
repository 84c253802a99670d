use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.70;
pub const VAL_FRACTION: f64 = 0.20;
const MIN_SCENES: usize = 10;

/// Scene indices for each partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Shuffles `0..n` with `seed` and cuts it 70/20/10.
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n < MIN_SCENES {
            return Err(Error::usage(format!(
                "splitting needs at least {MIN_SCENES} scenes, got {n}"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
        let n_val = (n as f64 * VAL_FRACTION).round() as usize;
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok(Self {
            train: idx,
            val,
            test,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl DatasetSplit {
    pub fn from_indices(scenes: &[Scene], idx: &SplitIndices) -> Result<Self> {
        let pick = |ids: &[usize]| -> Result<Vec<Scene>> {
            ids.iter()
                .map(|&i| {
                    scenes
                        .get(i)
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("split refers to missing scene {i}")))
                })
                .collect()
        };
        Ok(Self {
            train: pick(&idx.train)?,
            val: pick(&idx.val)?,
            test: pick(&idx.test)?,
        })
    }
}

/// Scene-level 70/20/10 split, deterministic in `seed`.
pub fn split_dataset(scenes: &[Scene], seed: u64) -> Result<DatasetSplit> {
    let idx = SplitIndices::new(scenes.len(), seed)?;
    DatasetSplit::from_indices(scenes, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(n: usize) -> (usize, usize, usize) {
        let s = SplitIndices::new(n, 42).unwrap();
        (s.train.len(), s.val.len(), s.test.len())
    }

    #[test]
    fn ten_scenes_split_seven_two_one() {
        assert_eq!(sizes(10), (7, 2, 1));
    }

    #[test]
    fn hundred_scenes_split_seventy_twenty_ten() {
        assert_eq!(sizes(100), (70, 20, 10));
    }

    #[test]
    fn too_few_scenes_is_usage_error() {
        assert!(matches!(SplitIndices::new(9, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn same_seed_same_split() {
        assert_eq!(SplitIndices::new(57, 5).unwrap(), SplitIndices::new(57, 5).unwrap());
        assert_ne!(SplitIndices::new(57, 5).unwrap(), SplitIndices::new(57, 6).unwrap());
    }

    #[test]
    fn partitions_are_disjoint_and_close_to_targets() {
        for n in 10..200 {
            let s = SplitIndices::new(n, n as u64).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            let nf = n as f64;
            assert!((s.train.len() as f64 - 0.7 * nf).abs() <= 1.0);
            assert!((s.val.len() as f64 - 0.2 * nf).abs() <= 1.0);
            assert!((s.test.len() as f64 - 0.1 * nf).abs() <= 1.0);
        }
    }
}
