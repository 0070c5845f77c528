use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};

use crate::dataset::{Dataset, Fold};
use crate::error::{Error, Result};
use crate::seed;

/// Train/test partition as dataset row indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainTest {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl TrainTest {
    /// Uses the manifest's `fold` column.
    pub fn from_folds(dataset: &Dataset) -> Result<TrainTest> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, ex) in dataset.examples().iter().enumerate() {
            match ex.fold {
                Some(Fold::Train) => train.push(i),
                Some(Fold::Test) => test.push(i),
                None => {
                    return Err(Error::Metadata(format!("{} has no fold", ex.id)));
                }
            }
        }
        Ok(TrainTest { train, test })
    }
}

/// Labeled (`L`), unlabeled (`U`) and test rows of one budgeted run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn l(&self) -> usize {
        self.labeled.len()
    }

    pub fn u(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn n(&self) -> usize {
        self.l() + self.u()
    }

    pub fn train(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.labeled.iter().chain(&self.unlabeled).copied().collect();
        all.sort_unstable();
        all
    }

    /// Checks pairwise disjointness of the three parts.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, part) in [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("test", &self.test),
        ] {
            for &i in part {
                if !seen.insert(i) {
                    return Err(Error::Integrity(format!(
                        "row {i} appears twice (second time in {name})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the split as `[section]` blocks of ids.
    pub fn save(&self, dataset: &Dataset, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (name, part) in [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("test", &self.test),
        ] {
            out.push_str(&format!("[{name}]\n"));
            for &i in part {
                out.push_str(&dataset.example(i).id);
                out.push('\n');
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(dataset: &Dataset, path: &Path) -> Result<DatasetSplit> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut parts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut current = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name);
                parts.entry(name).or_default();
                continue;
            }
            let section = current.ok_or_else(|| Error::Parse {
                path: path.into(),
                row: n + 1,
                msg: "id before any [section]".into(),
            })?;
            let i = dataset.position(line).ok_or_else(|| Error::Parse {
                path: path.into(),
                row: n + 1,
                msg: format!("unknown id `{line}`"),
            })?;
            parts.entry(section).or_default().push(i);
        }
        let mut take = |name: &str| parts.remove(name).unwrap_or_default();
        let split = DatasetSplit {
            labeled: take("labeled"),
            unlabeled: take("unlabeled"),
            test: take("test"),
        };
        split.validate()?;
        Ok(split)
    }
}

/// Random train/test split. With `group_key`, groups (e.g. patients) move as a whole and
/// `test_fraction` applies to the number of groups.
pub fn split_train_test(
    dataset: &Dataset,
    test_fraction: f64,
    group_key: Option<&str>,
    seed: u64,
) -> Result<TrainTest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Precondition(format!(
            "test fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    let mut rng = seed::rng_for(seed, "split_train_test");
    let n = dataset.len();
    let mut is_test = vec![false; n];
    match group_key {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let n_test = (n as f64 * test_fraction).round() as usize;
            for &i in &order[..n_test] {
                is_test[i] = true;
            }
        }
        Some(key) => {
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            let mut missing = Vec::new();
            for (i, ex) in dataset.examples().iter().enumerate() {
                match ex.meta(key) {
                    Some(g) => groups.entry(g).or_default().push(i),
                    None => missing.push(ex.id.clone()),
                }
            }
            if !missing.is_empty() {
                return Err(Error::Metadata(format!(
                    "`{key}` missing on {} rows: {}",
                    missing.len(),
                    missing.join(", ")
                )));
            }
            let mut names: Vec<&str> = groups.keys().copied().collect();
            names.shuffle(&mut rng);
            let n_test = (names.len() as f64 * test_fraction).round() as usize;
            for name in &names[..n_test] {
                for &i in &groups[name] {
                    is_test[i] = true;
                }
            }
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_test[i]);
    Ok(TrainTest { train, test })
}

/// Draws `m` expert-labeled training instances per ground-truth class, uniformly without
/// replacement within each class; the remaining training rows form `U`.
pub fn sample_labeled_subset(
    dataset: &Dataset,
    folds: &TrainTest,
    m: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if m == 0 {
        return Err(Error::Precondition("per-class budget m must be positive".into()));
    }
    let k = dataset.k();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in &folds.train {
        by_class[dataset.example(i).y.index()].push(i);
    }
    let mut rng = seed::rng_for(seed, &format!("sample_labeled_subset/{m}"));
    let mut labeled = Vec::with_capacity(m * k);
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < m {
            return Err(Error::InsufficientData {
                class: class + 1,
                available: members.len(),
                required: m,
            });
        }
        labeled.extend(members.choose_multiple(&mut rng, m).copied());
    }
    labeled.sort_unstable();
    let chosen: BTreeSet<usize> = labeled.iter().copied().collect();
    let unlabeled = folds
        .train
        .iter()
        .copied()
        .filter(|i| !chosen.contains(i))
        .collect();
    let split = DatasetSplit {
        labeled,
        unlabeled,
        test: folds.test.clone(),
    };
    split.validate()?;
    Ok(split)
}

/// Every training row is expert-labeled and `U` is empty.
pub fn complete_split(folds: &TrainTest) -> DatasetSplit {
    let mut labeled = folds.train.clone();
    labeled.sort_unstable();
    DatasetSplit {
        labeled,
        unlabeled: Vec::new(),
        test: folds.test.clone(),
    }
}
