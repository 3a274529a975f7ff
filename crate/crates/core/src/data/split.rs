use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidInput(format!("split ratios must be non-negative: {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Split sizes by largest remainder: each split gets `floor(n * r)`, and
    /// the leftover records go to the splits with the largest fractional
    /// parts (earlier split wins ties).
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let ratios = [self.train, self.val, self.test];
        let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
        // Absorb representation error such as 0.7 * 10 = 7.000000000000001.
        let mut sizes: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
        let mut leftover = n - sizes.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - sizes[a] as f64;
            let fb = exact[b] - sizes[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            sizes[i] += 1;
            leftover -= 1;
        }
        [sizes[0], sizes[1], sizes[2]]
    }
}

/// Contiguous train/val/test partition of a time-ordered dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
    pub ratios: SplitRatios,
    /// Source file or generator seed.
    pub provenance: String,
}

impl<T> DatasetSplit<T> {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> DatasetSplit<U> {
        DatasetSplit {
            train: self.train.into_iter().map(&mut f).collect(),
            val: self.val.into_iter().map(&mut f).collect(),
            test: self.test.into_iter().map(&mut f).collect(),
            ratios: self.ratios,
            provenance: self.provenance,
        }
    }
}

/// Splits time-ordered records into prefix/middle/suffix partitions.
pub fn temporal_split<T>(
    records: Vec<T>,
    ratios: SplitRatios,
    provenance: impl Into<String>,
) -> Result<DatasetSplit<T>> {
    ratios.validate()?;
    if records.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 records to split, got {}",
            records.len()
        )));
    }
    let [n_train, n_val, _] = ratios.sizes(records.len());
    let mut rest = records;
    let mut middle = rest.split_off(n_train);
    let test = middle.split_off(n_val);
    Ok(DatasetSplit {
        train: rest,
        val: middle,
        test,
        ratios,
        provenance: provenance.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sizes(n: usize, r: (f64, f64, f64)) -> (usize, usize, usize) {
        let s = temporal_split(
            (0..n).collect::<Vec<_>>(),
            SplitRatios {
                train: r.0,
                val: r.1,
                test: r.2,
            },
            "test",
        )
        .unwrap();
        (s.train.len(), s.val.len(), s.test.len())
    }

    #[test]
    fn spec_examples() {
        assert_eq!(sizes(10, (0.7, 0.2, 0.1)), (7, 2, 1));
        assert_eq!(sizes(3, (0.7, 0.2, 0.1)), (2, 1, 0));
        assert_eq!(sizes(10, (1.0, 0.0, 0.0)), (10, 0, 0));
    }

    #[test]
    fn rejects_tiny_inputs_and_bad_ratios() {
        let ratios = SplitRatios::default();
        assert!(temporal_split(vec![1, 2], ratios, "x").is_err());
        let bad = SplitRatios {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(temporal_split(vec![1, 2, 3], bad, "x").is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_input(n in 3usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let ratios = SplitRatios { train: lo, val: hi - lo, test: 1.0 - hi };
            let input: Vec<usize> = (0..n).collect();
            let split = temporal_split(input.clone(), ratios, "p").unwrap();
            let sizes = [split.train.len(), split.val.len(), split.test.len()];
            for (size, r) in sizes.iter().zip([ratios.train, ratios.val, ratios.test]) {
                prop_assert!((*size as f64 - n as f64 * r).abs() <= 1.0 + 1e-9);
            }
            let joined: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
            prop_assert_eq!(joined, input);
        }
    }
}
