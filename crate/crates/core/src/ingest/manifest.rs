use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// The four dataset partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::TestSeen, Split::TestUnseen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}")))
    }
}

/// Sequence paths per split. The lists are disjoint.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub train: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
    pub test_seen: Vec<PathBuf>,
    pub test_unseen: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn get(&self, split: Split) -> &[PathBuf] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::TestSeen => &self.test_seen,
            Split::TestUnseen => &self.test_unseen,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<PathBuf> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::TestSeen => &mut self.test_seen,
            Split::TestUnseen => &mut self.test_unseen,
        }
    }

    pub fn sizes(&self) -> [usize; 4] {
        Split::ALL.map(|s| self.get(s).len())
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut all: Vec<&PathBuf> = Split::ALL.iter().flat_map(|&s| self.get(s)).collect();
        all.sort();
        match all.windows(2).find(|w| w[0] == w[1]) {
            Some(w) => Err(Error::invalid(format!("{} appears in more than one split", w[0].display()))),
            None => Ok(()),
        }
    }

    /// Parses `split<TAB>path` lines. Blank lines and `#` comments are skipped;
    /// relative paths resolve against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut m = DatasetManifest::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                column: "split".into(),
                msg: msg.into(),
            };
            let (split, file) = line.split_once('\t').ok_or_else(|| bad("expected split<TAB>path"))?;
            let split: Split = split.parse().map_err(|_| bad("unknown split name"))?;
            let file = Path::new(file);
            let resolved = if file.is_absolute() { file.to_path_buf() } else { base.join(file) };
            m.get_mut(split).push(resolved);
        }
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for split in Split::ALL {
            for p in self.get(split) {
                out.push_str(&format!("{split}\t{}\n", p.display()));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Shuffles `sequences` with `seed` and partitions them by `ratios`
/// (train, validation, test-seen, test-unseen). Counts follow the
/// largest-remainder rule and every split receives at least one sequence.
pub fn split_manifest(sequences: &[PathBuf], ratios: [f64; 4], seed: u64) -> Result<DatasetManifest> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::invalid(format!("split ratios must be positive, got {ratios:?}")));
    }
    let n = sequences.len();
    if n < 4 {
        return Err(Error::invalid(format!("need at least 4 sequences to split, got {n}")));
    }
    let total: f64 = ratios.iter().sum();
    let quotas = ratios.map(|r| r / total * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..4).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap_or(0);
        counts[largest] -= 1;
        counts[empty] += 1;
    }

    let mut shuffled = sequences.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut m = DatasetManifest::default();
    let mut rest = shuffled.as_slice();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        let (head, tail) = rest.split_at(count);
        m.get_mut(split).extend_from_slice(head);
        rest = tail;
    }
    m.check_disjoint()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paths(n: usize) -> Vec<PathBuf> {
        (0..n).map(|i| PathBuf::from(format!("seq_{i:03}.csv"))).collect()
    }

    #[test]
    fn default_ratio_on_25() {
        let m = split_manifest(&paths(25), [15.0, 3.0, 3.0, 4.0], 1).unwrap();
        assert_eq!(m.sizes(), [15, 3, 3, 4]);
    }

    #[test]
    fn one_each() {
        let m = split_manifest(&paths(4), [1.0; 4], 9).unwrap();
        assert_eq!(m.sizes(), [1, 1, 1, 1]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = split_manifest(&paths(40), [15.0, 3.0, 3.0, 4.0], 5).unwrap();
        let b = split_manifest(&paths(40), [15.0, 3.0, 3.0, 4.0], 5).unwrap();
        let c = split_manifest(&paths(40), [15.0, 3.0, 3.0, 4.0], 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn errors() {
        assert!(split_manifest(&paths(3), [1.0; 4], 0).is_err());
        assert!(split_manifest(&paths(10), [1.0, 0.0, 1.0, 1.0], 0).is_err());
    }

    #[test]
    fn skewed_ratios_keep_every_split() {
        let m = split_manifest(&paths(5), [100.0, 1.0, 1.0, 1.0], 0).unwrap();
        assert_eq!(m.sizes(), [2, 1, 1, 1]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seqs: Vec<PathBuf> = paths(8).into_iter().map(|p| dir.path().join(p)).collect();
        let m = split_manifest(&seqs, [15.0, 3.0, 3.0, 4.0], 2).unwrap();
        let file = dir.path().join("manifest.tsv");
        m.save(&file).unwrap();
        assert_eq!(DatasetManifest::load(&file).unwrap(), m);
    }

    #[test]
    fn overlapping_lists_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("m.tsv");
        std::fs::write(&file, "train\ta.csv\ntest_seen\ta.csv\n").unwrap();
        assert!(DatasetManifest::load(&file).is_err());
        std::fs::write(&file, "training\ta.csv\n").unwrap();
        assert!(matches!(DatasetManifest::load(&file), Err(Error::Parse { row: 1, .. })));
    }

    proptest::proptest! {
        #[test]
        fn partition_is_complete(n in 4usize..80, r in proptest::array::uniform4(0.1f64..20.0), seed in 0u64..1000) {
            let seqs = paths(n);
            let m = split_manifest(&seqs, r, seed).unwrap();
            let mut all: Vec<PathBuf> = Split::ALL.iter().flat_map(|&s| m.get(s).to_vec()).collect();
            all.sort();
            proptest::prop_assert_eq!(all, seqs);
            let total: f64 = r.iter().sum();
            for (i, s) in m.sizes().iter().enumerate() {
                proptest::prop_assert!(*s >= 1);
                let quota = r[i] / total * n as f64;
                proptest::prop_assert!((*s as f64 - quota).abs() < 4.0);
            }
        }
    }
}
