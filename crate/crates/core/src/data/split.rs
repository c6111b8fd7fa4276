use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{labels_of, ActigraphyRecord};
use crate::error::{contract_err, PatError, Result};

/// Requested training-pool size: a participant count or everything left
/// after the test carve-out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubsetSize {
    Count(usize),
    All,
}

impl fmt::Display for SubsetSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubsetSize::Count(n) => write!(f, "{n}"),
            SubsetSize::All => f.write_str("N"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub test_size: usize,
    pub subset_sizes: Vec<SubsetSize>,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_size: 2000,
            subset_sizes: vec![
                SubsetSize::Count(500),
                SubsetSize::Count(1000),
                SubsetSize::Count(2500),
                SubsetSize::All,
            ],
            val_fraction: 0.20,
            seed: 0,
        }
    }
}

/// One size-graded subset, split into training and validation members.
/// Members are indices into the input record list, ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetSplit {
    pub size: SubsetSize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl SubsetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subsets {
    pub test: Vec<usize>,
    pub subsets: Vec<SubsetSplit>,
}

/// Splits `k` draws between two classes in proportion to `counts`,
/// rounding half up and keeping at least one of each class when possible.
fn allocate(k: usize, counts: [usize; 2]) -> [usize; 2] {
    let n = counts[0] + counts[1];
    if n == 0 || k == 0 {
        return [0, 0];
    }
    let mut k1 = ((k as f64 * counts[1] as f64 / n as f64) + 0.5).floor() as usize;
    if k >= 2 && counts[1] > 0 && counts[0] > 0 {
        k1 = k1.clamp(1, k - 1);
    }
    k1 = k1.min(counts[1]).max(k.saturating_sub(counts[0]));
    [k - k1, k1]
}

/// Test carve-out, size-graded stratified subsets and their train/val
/// splits. Participants are distinct within a subset; subsets of different
/// sizes may overlap each other but never the test set.
pub fn stratified_subsets(records: &[ActigraphyRecord], spec: &SplitSpec) -> Result<Subsets> {
    let labels = labels_of(records)?;
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    if by_class[0].is_empty() || by_class[1].is_empty() {
        return contract_err("stratified splitting needs both classes present");
    }
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return contract_err(format!("validation fraction {} outside [0, 1)", spec.val_fraction));
    }
    let largest = spec
        .subset_sizes
        .iter()
        .map(|s| match s {
            SubsetSize::Count(n) => *n,
            SubsetSize::All => 0,
        })
        .max()
        .unwrap_or(0);
    if spec.test_size + largest > records.len() {
        return contract_err(format!(
            "test size {} plus largest subset {largest} exceeds {} participants",
            spec.test_size,
            records.len()
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for class in &mut by_class {
        class.shuffle(&mut rng);
    }
    let take = allocate(spec.test_size, [by_class[0].len(), by_class[1].len()]);
    let mut test: Vec<usize> = Vec::with_capacity(spec.test_size);
    let mut pool: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for c in 0..2 {
        test.extend_from_slice(&by_class[c][..take[c]]);
        pool[c] = by_class[c][take[c]..].to_vec();
    }
    test.sort_unstable();

    let mut subsets = Vec::with_capacity(spec.subset_sizes.len());
    for &size in &spec.subset_sizes {
        let available = pool[0].len() + pool[1].len();
        let k = match size {
            SubsetSize::Count(n) => n,
            SubsetSize::All => available,
        };
        let alloc = allocate(k, [pool[0].len(), pool[1].len()]);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in 0..2 {
            let mut members = pool[c].clone();
            members.shuffle(&mut rng);
            members.truncate(alloc[c]);
            let n_val = ((alloc[c] as f64 * spec.val_fraction) + 0.5).floor() as usize;
            val.extend_from_slice(&members[..n_val]);
            train.extend_from_slice(&members[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        subsets.push(SubsetSplit { size, train, val });
    }
    Ok(Subsets { test, subsets })
}

/// Writes participant ids, one per line.
pub fn write_manifest(path: &Path, records: &[ActigraphyRecord], members: &[usize]) -> Result<()> {
    let mut text = String::new();
    for &i in members {
        text.push_str(&records[i].participant_id);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if ids.is_empty() {
        return Err(PatError::Parse { line: 1, message: "empty manifest".into() });
    }
    Ok(ids)
}
