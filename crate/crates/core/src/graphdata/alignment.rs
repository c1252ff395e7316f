use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graphdata::kg::Vocab;

/// Pre-aligned cross-graph entity pairs split into seed and test parts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentSet {
    pub seed: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl AlignmentSet {
    /// Shuffles `pairs` and puts `round(ratio * n)` of them in the seed set.
    pub fn split<R: Rng + ?Sized>(pairs: &[(usize, usize)], ratio: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::invalid(format!("seed ratio {ratio} outside [0, 1]")));
        }
        check_one_to_one(pairs)?;
        let mut shuffled = pairs.to_vec();
        shuffled.shuffle(rng);
        let n_seed = (ratio * pairs.len() as f64).round() as usize;
        let test = shuffled.split_off(n_seed);
        Ok(AlignmentSet {
            seed: shuffled,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.seed.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seed_ratio(&self) -> f64 {
        self.seed.len() as f64 / self.len().max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let all: Vec<_> = self.seed.iter().chain(&self.test).copied().collect();
        check_one_to_one(&all)
    }
}

fn check_one_to_one(pairs: &[(usize, usize)]) -> Result<()> {
    let mut left = HashSet::new();
    let mut right = HashSet::new();
    for &(a, b) in pairs {
        if !left.insert(a) || !right.insert(b) {
            return Err(Error::invalid(format!("entity in pair ({a}, {b}) aligned twice")));
        }
    }
    Ok(())
}

/// Reads `e1<TAB>e2` lines against the two graphs' vocabularies.
pub fn load_pairs(path: &Path, left: &Vocab, right: &Vocab) -> Result<Vec<(usize, usize)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected e1<TAB>e2".into()))?;
        let a = left.get(a).ok_or_else(|| parse_err(format!("unknown entity `{a}`")))?;
        let b = right.get(b).ok_or_else(|| parse_err(format!("unknown entity `{b}`")))?;
        out.push((a, b));
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[(usize, usize)], left: &Vocab, right: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &(a, b) in pairs {
        writeln!(w, "{}\t{}", left.name(a), right.name(b))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn split_honors_ratio_within_one_pair() {
        let pairs: Vec<_> = (0..37).map(|i| (i, 36 - i)).collect();
        for ratio in [0.0, 0.2, 0.3, 0.5, 1.0] {
            let a = AlignmentSet::split(&pairs, ratio, &mut seeded(1)).unwrap();
            assert_eq!(a.len(), 37);
            assert!((a.seed.len() as f64 - ratio * 37.0).abs() <= 1.0);
            a.validate().unwrap();
        }
    }

    #[test]
    fn duplicate_entity_is_rejected() {
        let pairs = vec![(0, 1), (0, 2)];
        assert!(AlignmentSet::split(&pairs, 0.5, &mut seeded(0)).is_err());
        assert!(AlignmentSet::split(&[(0, 1)], 1.5, &mut seeded(0)).is_err());
    }
}
