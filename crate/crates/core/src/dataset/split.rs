use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetIndex;
use crate::error::{Error, Result};
use crate::rng;

/// Train / validation / test image counts of the reference VRD partition.
pub const SPLIT_PROPORTIONS: [u64; 3] = [3030, 750, 955];

#[derive(Debug, Clone)]
pub struct Split {
    pub train: DatasetIndex,
    pub val: DatasetIndex,
    pub test: DatasetIndex,
}

/// Image-name lists describing a split, as written by the `split` command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn manifest(&self, seed: u64) -> SplitManifest {
        let names = |i: &DatasetIndex| i.images.keys().cloned().collect();
        SplitManifest {
            seed,
            train: names(&self.train),
            val: names(&self.val),
            test: names(&self.test),
        }
    }
}

impl SplitManifest {
    pub fn apply(&self, index: &DatasetIndex) -> Split {
        let pick = |names: &[String]| index.subset(names.iter().map(String::as_str));
        Split {
            train: pick(&self.train),
            val: pick(&self.val),
            test: pick(&self.test),
        }
    }
}

/// Largest-remainder apportionment of `n` items by `weights`; ties go to the
/// earlier part, so leftovers favour train, then val.
pub(crate) fn apportion(n: usize, weights: &[u64]) -> Vec<usize> {
    let total: u64 = weights.iter().sum();
    let n = n as u64;
    let mut counts: Vec<u64> = weights.iter().map(|w| n * w / total).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(n * weights[i] % total));
    let assigned: u64 = counts.iter().sum();
    for &i in order.iter().take((n - assigned) as usize) {
        counts[i] += 1;
    }
    counts.into_iter().map(|c| c as usize).collect()
}

fn shuffled_names(index: &DatasetIndex, seed: u64) -> Vec<String> {
    let mut names: Vec<String> = index.images.keys().cloned().collect();
    names.shuffle(&mut rng::seeded(seed));
    names
}

/// Seeded partition of a single source by the 3030:750:955 proportions.
///
/// Every part receives at least one image; if rounding leaves a part empty
/// one image is moved to it from the largest part.
pub fn split(index: &DatasetIndex, seed: u64) -> Result<Split> {
    let n = index.num_images();
    if n < 3 {
        return Err(Error::invalid(format!(
            "cannot split {n} image(s) into train/val/test: at least 3 are required"
        )));
    }
    let mut counts = apportion(n, &SPLIT_PROPORTIONS);
    for i in 0..3 {
        if counts[i] == 0 {
            let largest = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[largest] -= 1;
            counts[i] += 1;
        }
    }
    let names = shuffled_names(index, seed);
    let (train, rest) = names.split_at(counts[0]);
    let (val, test) = rest.split_at(counts[1]);
    let pick = |s: &[String]| index.subset(s.iter().map(String::as_str));
    Ok(Split {
        train: pick(train),
        val: pick(val),
        test: pick(test),
    })
}

/// Partition for sources that ship separate train and test dictionaries
/// (the VRD layout).
///
/// Images without any relationship are dropped. Every remaining test image
/// goes to test; the remaining train images are divided 3030:750 between
/// train and validation after a seeded shuffle. For VRD (3780 annotated
/// train images, 955 annotated test images) this gives 3030/750/955.
pub fn split_with_test(train_source: &DatasetIndex, test_source: &DatasetIndex, seed: u64) -> Result<Split> {
    let annotated = |i: &DatasetIndex| {
        let names = i
            .images
            .iter()
            .filter(|(_, a)| !a.relationships.is_empty())
            .map(|(n, _)| n.as_str());
        i.subset(names)
    };
    let train_pool = annotated(train_source);
    let test = annotated(test_source);
    if train_pool.num_images() < 2 || test.num_images() < 1 {
        return Err(Error::invalid(format!(
            "need at least 2 annotated train images and 1 annotated test image, got {} and {}",
            train_pool.num_images(),
            test.num_images()
        )));
    }
    let mut counts = apportion(train_pool.num_images(), &SPLIT_PROPORTIONS[..2]);
    if counts[1] == 0 {
        counts[0] -= 1;
        counts[1] = 1;
    }
    let names = shuffled_names(&train_pool, seed);
    let (train, val) = names.split_at(counts[0]);
    let pick = |s: &[String]| train_pool.subset(s.iter().map(String::as_str));
    Ok(Split {
        train: pick(train),
        val: pick(val),
        test,
    })
}
