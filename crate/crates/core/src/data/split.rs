use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ChangeSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        })
    }
}

impl std::str::FromStr for Part {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            other => Err(Error::Config(format!("unknown split part `{other}` (train|val|test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn part(&self, part: Part) -> &[String] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }
}

/// Partition sizes for `n` items: floor of each share, then the leftover
/// items go to the largest fractional remainders (earlier part on ties).
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Config(format!("split ratios must be non-negative: {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {sum}")));
    }
    let exact = ratios.map(|r| n as f64 * r);
    // Tolerate representation error such as 10 * 0.7 = 6.999...
    let mut sizes = exact.map(|e| (e + 1e-9).floor() as usize);
    let frac: Vec<f64> = exact.iter().zip(&sizes).map(|(e, &s)| e - s as f64).collect();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok(sizes)
}

/// Seeded permutation of the (sorted) sample ids, then a train/val/test
/// partition by [`split_sizes`].
pub fn split(samples: &[ChangeSample], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let mut ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Data("duplicate sample ids".into()));
    }
    let [a, b, _] = split_sizes(ids.len(), ratios)?;
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(a + b);
    let val = ids.split_off(a);
    Ok(DatasetSplit {
        train: ids,
        val,
        test,
        seed,
    })
}

/// Mini-batches of ids for one epoch of `part`. Order depends only on
/// `(seed, epoch)`; a trailing partial batch is dropped.
pub fn iterate_batches(split: &DatasetSplit, part: Part, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<String>>> {
    let ids = split.part(part);
    if batch_size == 0 || batch_size > ids.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} does not fit the {} {part} samples",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[String]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_follow_largest_remainder() {
        assert_eq!(split_sizes(10, [0.7, 0.1, 0.2]).unwrap(), [7, 1, 2]);
        assert_eq!(split_sizes(8189, [0.6, 0.1, 0.3]).unwrap(), [4913, 819, 2457]);
        assert_eq!(split_sizes(2, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap(), [1, 1, 0]);
        assert_eq!(split_sizes(0, [0.7, 0.1, 0.2]).unwrap(), [0, 0, 0]);
        assert!(split_sizes(10, [0.7, 0.1, 0.1]).is_err());
        assert!(split_sizes(10, [1.2, -0.1, -0.1]).is_err());
    }
}
