//! Synthetic experts over a subclass taxonomy.
//!
//! An expert is a set of strength subclasses (always answered correctly) grown from a
//! uniformly drawn base subclass by similarity-weighted sampling. On a weakness the
//! expert answers a subclass drawn with probability proportional to its similarity to
//! the true subclass (the true subclass included), reported at superclass level.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Class, Dataset, TaxonomyMap};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Pairwise subclass similarities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn from_values(values: Array2<f64>) -> Result<SimilarityMatrix> {
        let (r, c) = values.dim();
        if r != c || r == 0 {
            return Err(Error::Precondition(format!(
                "similarity matrix must be square and non-empty, got {r}x{c}"
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Numeric("similarities must be finite and in [0,1]".into()));
        }
        for a in 0..r {
            for b in 0..r {
                if values[[a, b]] != values[[b, a]] {
                    return Err(Error::Numeric(format!("S[{a}][{b}] != S[{b}][{a}]")));
                }
                if values[[a, b]] > values[[a, a]] {
                    return Err(Error::Numeric(format!(
                        "S[{a}][{b}] exceeds the diagonal of row {a}"
                    )));
                }
            }
        }
        Ok(SimilarityMatrix { values })
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[[a, b]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SimilarityMatrix> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                line.split(',')
                    .map(|t| {
                        t.trim().parse::<f64>().map_err(|_| Error::Parse {
                            path: path.into(),
                            row: i + 1,
                            msg: format!("bad number `{t}`"),
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let values = Array2::from_shape_vec((n, flat.len() / n.max(1)), flat)
            .map_err(|e| Error::Parse {
                path: path.into(),
                row: 0,
                msg: e.to_string(),
            })?;
        SimilarityMatrix::from_values(values)
    }
}

/// Mean pairwise cosine similarity between the instances of every pair of subclasses,
/// mapped from `[-1, 1]` to `[0, 1]`. Self-similarity is fixed at 1.
///
/// The mean of pairwise cosines equals the dot product of the subclass means of the
/// unit-normalized vectors, which is what is computed.
pub fn build_similarity_matrix(
    features: &Array2<f64>,
    subclasses: &[usize],
    k_sub: usize,
) -> Result<SimilarityMatrix> {
    if features.nrows() != subclasses.len() {
        return Err(Error::Precondition(format!(
            "{} feature rows for {} subclass labels",
            features.nrows(),
            subclasses.len()
        )));
    }
    let d = features.ncols();
    let mut sums = Array2::<f64>::zeros((k_sub, d));
    let mut counts = vec![0usize; k_sub];
    for (row, &sub) in features.rows().into_iter().zip(subclasses) {
        if sub >= k_sub {
            return Err(Error::Precondition(format!("subclass {} out of range", sub + 1)));
        }
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "feature vector of subclass {} has norm {norm}",
                sub + 1
            )));
        }
        let mut acc = sums.row_mut(sub);
        acc.scaled_add(1.0 / norm, &row);
        counts[sub] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Coverage(empty + 1));
    }
    let means: Vec<Array1<f64>> = (0..k_sub)
        .map(|s| sums.row(s).to_owned() / counts[s] as f64)
        .collect();
    let mut values = Array2::zeros((k_sub, k_sub));
    for a in 0..k_sub {
        values[[a, a]] = 1.0;
        for b in a + 1..k_sub {
            let cos = means[a].dot(&means[b]);
            let s = ((cos + 1.0) / 2.0).clamp(0.0, 1.0);
            values[[a, b]] = s;
            values[[b, a]] = s;
        }
    }
    SimilarityMatrix::from_values(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExpert {
    pub strengths: BTreeSet<usize>,
    pub base: usize,
    pub seed: u64,
    pub similarity: SimilarityMatrix,
    pub taxonomy: TaxonomyMap,
}

fn weighted_draw(weights: &[f64], rng: &mut Rng) -> usize {
    match WeightedIndex::new(weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => rng.random_range(0..weights.len()),
    }
}

/// Draws the strength set: a uniform base, then `n_strengths - 1` further subclasses
/// without replacement, each with probability proportional to its similarity to the base.
pub fn sample_strength_set(
    similarity: &SimilarityMatrix,
    taxonomy: &TaxonomyMap,
    n_strengths: usize,
    seed: u64,
) -> Result<SyntheticExpert> {
    let k_sub = similarity.size();
    if k_sub != taxonomy.k_sub() {
        return Err(Error::Precondition(format!(
            "similarity covers {k_sub} subclasses, taxonomy has {}",
            taxonomy.k_sub()
        )));
    }
    if n_strengths == 0 || n_strengths > k_sub {
        return Err(Error::Precondition(format!(
            "number of strengths {n_strengths} outside 1..={k_sub}"
        )));
    }
    let mut rng = seed::rng_for(seed, "strength_set");
    let base = rng.random_range(0..k_sub);
    let mut strengths = BTreeSet::from([base]);
    let mut remaining: Vec<usize> = (0..k_sub).filter(|&s| s != base).collect();
    while strengths.len() < n_strengths {
        let weights: Vec<f64> = remaining.iter().map(|&s| similarity.get(base, s)).collect();
        let pick = weighted_draw(&weights, &mut rng);
        strengths.insert(remaining.remove(pick));
    }
    Ok(SyntheticExpert {
        strengths,
        base,
        seed,
        similarity: similarity.clone(),
        taxonomy: taxonomy.clone(),
    })
}

impl SyntheticExpert {
    pub fn is_strength(&self, sub: usize) -> bool {
        self.strengths.contains(&sub)
    }

    /// Subclass the expert confuses `y_sub` with, drawn ∝ `S[y_sub][·]`.
    pub fn sample_confusion(&self, y_sub: usize, rng: &mut Rng) -> usize {
        let weights: Vec<f64> = self.similarity.values().row(y_sub).to_vec();
        weighted_draw(&weights, rng)
    }

    /// Superclass prediction for an instance; a pure function of `(seed, id, y_sub)`.
    pub fn predict(&self, y_sub: usize, id: &str) -> Result<Class> {
        if y_sub >= self.taxonomy.k_sub() {
            return Err(Error::Precondition(format!(
                "subclass {} outside 1..={}",
                y_sub + 1,
                self.taxonomy.k_sub()
            )));
        }
        if self.is_strength(y_sub) {
            return Ok(self.taxonomy.superclass(y_sub));
        }
        let mut rng = seed::rng_for(self.seed, &format!("expert_predict/{id}"));
        Ok(self.taxonomy.superclass(self.sample_confusion(y_sub, &mut rng)))
    }

    /// Predictions for every example; each must carry a subclass label.
    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<Class>> {
        dataset
            .examples()
            .iter()
            .map(|ex| {
                let sub = ex.y_sub.ok_or_else(|| {
                    Error::Precondition(format!("{} has no subclass label", ex.id))
                })?;
                self.predict(sub, &ex.id)
            })
            .collect()
    }

    /// Writes `<stem>.txt` (base, strengths, seed; 1-based) and the similarity matrix.
    pub fn save(&self, path: &Path) -> Result<()> {
        let sim_path = similarity_path(path);
        self.similarity.save(&sim_path)?;
        let mut out = String::new();
        writeln!(out, "base={}", self.base + 1).expect("string write");
        let strengths: Vec<String> = self.strengths.iter().map(|s| (s + 1).to_string()).collect();
        writeln!(out, "strengths={}", strengths.join(",")).expect("string write");
        writeln!(out, "seed={}", self.seed).expect("string write");
        writeln!(
            out,
            "similarity={}",
            sim_path.file_name().and_then(|f| f.to_str()).unwrap_or_default()
        )
        .expect("string write");
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, taxonomy: &TaxonomyMap) -> Result<SyntheticExpert> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut base = None;
        let mut strengths = None;
        let mut seed = None;
        let mut sim_file = None;
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Parse {
                path: path.into(),
                row: i + 1,
                msg: msg.into(),
            };
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            match key.trim() {
                "base" => base = Some(one_based(value).ok_or_else(|| bad("bad base"))?),
                "strengths" => {
                    strengths = Some(
                        value
                            .split(',')
                            .filter(|t| !t.trim().is_empty())
                            .map(one_based)
                            .collect::<Option<BTreeSet<usize>>>()
                            .ok_or_else(|| bad("bad strengths"))?,
                    )
                }
                "seed" => seed = Some(value.trim().parse().map_err(|_| bad("bad seed"))?),
                "similarity" => sim_file = Some(value.trim().to_string()),
                _ => {}
            }
        }
        let missing = |k: &str| Error::Parse {
            path: path.into(),
            row: 0,
            msg: format!("missing `{k}`"),
        };
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let similarity =
            SimilarityMatrix::load(&dir.join(sim_file.ok_or_else(|| missing("similarity"))?))?;
        let expert = SyntheticExpert {
            strengths: strengths.ok_or_else(|| missing("strengths"))?,
            base: base.ok_or_else(|| missing("base"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            similarity,
            taxonomy: taxonomy.clone(),
        };
        if !expert.strengths.contains(&expert.base) {
            return Err(Error::Integrity("strength base is not a strength".into()));
        }
        if expert.similarity.size() != taxonomy.k_sub()
            || expert.strengths.iter().any(|&s| s >= taxonomy.k_sub())
        {
            return Err(Error::Integrity("expert does not match the taxonomy".into()));
        }
        Ok(expert)
    }
}

fn one_based(text: &str) -> Option<usize> {
    text.trim().parse::<usize>().ok()?.checked_sub(1)
}

fn similarity_path(expert_path: &Path) -> PathBuf {
    let stem = expert_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("expert");
    expert_path.with_file_name(format!("{stem}.similarity.csv"))
}
