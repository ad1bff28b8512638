use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CellRecord, DataError, Result};

const MIN_RECORDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: f64,
    pub val: f64,
    /// Cut each rounded-score class separately.
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 0.64,
            val: 0.16,
            stratify: false,
        }
    }
}

/// Record indices of each split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Floors train and val sizes; the remainder goes to test.
fn cut_sizes(n: usize, spec: &SplitSpec) -> (usize, usize) {
    let floor = |f: f64| ((n as f64 * f) + 1e-9).floor() as usize;
    let train = floor(spec.train).min(n);
    let val = floor(spec.val).min(n - train);
    (train, val)
}

fn cut(ids: &[usize], spec: &SplitSpec, out: &mut SplitAssignment) {
    let (tr, va) = cut_sizes(ids.len(), spec);
    out.train.extend_from_slice(&ids[..tr]);
    out.val.extend_from_slice(&ids[tr..tr + va]);
    out.test.extend_from_slice(&ids[tr + va..]);
}

/// Seeded shuffle of `0..n` then contiguous cuts. With `strata`, each stratum
/// is shuffled and cut on its own.
pub fn split_indices(n: usize, strata: Option<&[i64]>, spec: &SplitSpec) -> Result<SplitAssignment> {
    if n < MIN_RECORDS {
        return Err(DataError::TooFew {
            need: MIN_RECORDS,
            got: n,
        });
    }
    if !(spec.train > 0.0 && spec.val >= 0.0 && spec.train + spec.val <= 1.0) {
        return Err(DataError::Config(format!(
            "split fractions train={} val={} are invalid",
            spec.train, spec.val
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SplitAssignment::default();
    match strata {
        None => {
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut rng);
            cut(&ids, spec, &mut out);
        }
        Some(keys) => {
            let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
            for (i, &k) in keys.iter().enumerate().take(n) {
                groups.entry(k).or_default().push(i);
            }
            for ids in groups.values_mut() {
                ids.shuffle(&mut rng);
                cut(ids, spec, &mut out);
            }
        }
    }
    Ok(out)
}

/// Splits records; stratification uses the ground truth rounded half up.
pub fn split(records: &[CellRecord], spec: &SplitSpec) -> Result<SplitAssignment> {
    if spec.stratify {
        let keys: Vec<i64> = records.iter().map(|r| (r.ground_truth + 0.5).floor() as i64).collect();
        split_indices(records.len(), Some(&keys), spec)
    } else {
        split_indices(records.len(), None, spec)
    }
}
