//! Instances, labels, expert predictions and the labeled/unlabeled partition.
//!
//! Class indices are 0-based inside the crate and 1-based in every file the crate reads
//! or writes. [`Class`] is the only place where that conversion happens.

mod generate;
mod manifest;
mod split;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate_cifar_style, generate_nih_style, CifarStyleConfig, NihStyleConfig};
pub use manifest::{load_manifest, resolve_data_path, save_manifest, DATA_ROOT_ENV};
pub use split::{complete_split, sample_labeled_subset, split_train_test, DatasetSplit, TrainTest};

/// A class index, 0-based internally.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Class(pub usize);

impl Class {
    pub fn from_one_based(value: usize) -> Option<Class> {
        value.checked_sub(1).map(Class)
    }

    pub fn one_based(self) -> usize {
        self.0 + 1
    }

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.one_based())
    }
}

/// Shape of every payload in a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadShape {
    Features(usize),
    /// Height, width, channels; stored row-major as H×W×C.
    Image { height: usize, width: usize, channels: usize },
}

impl PayloadShape {
    pub fn len(&self) -> usize {
        match *self {
            PayloadShape::Features(d) => d,
            PayloadShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parse(text: &str) -> Option<PayloadShape> {
        let parts: Vec<usize> = text
            .split('x')
            .map(|p| p.trim().parse().ok())
            .collect::<Option<_>>()?;
        match parts.as_slice() {
            [d] if *d > 0 => Some(PayloadShape::Features(*d)),
            [h, w, c] if h * w * c > 0 => Some(PayloadShape::Image {
                height: *h,
                width: *w,
                channels: *c,
            }),
            _ => None,
        }
    }
}

impl fmt::Display for PayloadShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PayloadShape::Features(d) => write!(f, "{d}"),
            PayloadShape::Image {
                height,
                width,
                channels,
            } => write!(f, "{height}x{width}x{channels}"),
        }
    }
}

/// Predefined train/test membership carried by a manifest row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fold {
    Train,
    Test,
}

/// Where an expert prediction came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    Artificial { correct: bool, confidence: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub payload: Vec<f64>,
    /// Payload reference as written in the manifest, relative to the dataset root.
    pub source: String,
    pub y: Class,
    /// Fine-grained class, when the dataset has a taxonomy.
    pub y_sub: Option<usize>,
    pub h: Option<Class>,
    pub provenance: Option<Provenance>,
    pub fold: Option<Fold>,
    pub meta: BTreeMap<String, String>,
}

impl Example {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Whether the stored expert prediction matches the ground truth.
    pub fn expert_correct(&self) -> Option<bool> {
        self.h.map(|h| h == self.y)
    }
}

/// Subclass to superclass mapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyMap {
    sub_to_super: Vec<Class>,
    k: usize,
}

impl TaxonomyMap {
    pub fn new(sub_to_super: Vec<Class>, k: usize) -> Result<TaxonomyMap> {
        if k == 0 || sub_to_super.is_empty() {
            return Err(Error::Integrity("taxonomy must be non-empty".into()));
        }
        let mut covered = vec![false; k];
        for (sub, sup) in sub_to_super.iter().enumerate() {
            if sup.index() >= k {
                return Err(Error::Integrity(format!(
                    "subclass {} maps to superclass {sup} outside 1..={k}",
                    sub + 1
                )));
            }
            covered[sup.index()] = true;
        }
        if let Some(missing) = covered.iter().position(|c| !c) {
            return Err(Error::Integrity(format!(
                "superclass {} has no subclass",
                missing + 1
            )));
        }
        Ok(TaxonomyMap { sub_to_super, k })
    }

    /// Each class is its own single subclass.
    pub fn identity(k: usize) -> TaxonomyMap {
        TaxonomyMap {
            sub_to_super: (0..k).map(Class).collect(),
            k,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn k_sub(&self) -> usize {
        self.sub_to_super.len()
    }

    pub fn superclass(&self, sub: usize) -> Class {
        self.sub_to_super[sub]
    }

    pub fn subclasses_of(&self, sup: Class) -> impl Iterator<Item = usize> + '_ {
        self.sub_to_super
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == sup)
            .map(|(i, _)| i)
    }
}

/// A loaded dataset. Examples are sorted by id and immutable once loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    examples: Vec<Example>,
    index: HashMap<String, usize>,
    taxonomy: TaxonomyMap,
    shape: PayloadShape,
    /// Directory payload references are resolved against.
    root: PathBuf,
}

impl Dataset {
    pub fn new(
        mut examples: Vec<Example>,
        taxonomy: TaxonomyMap,
        shape: PayloadShape,
        root: PathBuf,
    ) -> Result<Dataset> {
        examples.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::with_capacity(examples.len());
        let k = taxonomy.k();
        for (i, ex) in examples.iter().enumerate() {
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
            if ex.y.index() >= k {
                return Err(Error::Integrity(format!(
                    "{}: label {} outside 1..={k}",
                    ex.id, ex.y
                )));
            }
            if let Some(h) = ex.h {
                if h.index() >= k {
                    return Err(Error::Integrity(format!(
                        "{}: expert prediction {h} outside 1..={k}",
                        ex.id
                    )));
                }
            }
            if let Some(sub) = ex.y_sub {
                if sub >= taxonomy.k_sub() {
                    return Err(Error::Integrity(format!(
                        "{}: subclass {} outside 1..={}",
                        ex.id,
                        sub + 1,
                        taxonomy.k_sub()
                    )));
                }
                if taxonomy.superclass(sub) != ex.y {
                    return Err(Error::Integrity(format!(
                        "{}: subclass {} belongs to superclass {}, row says {}",
                        ex.id,
                        sub + 1,
                        taxonomy.superclass(sub),
                        ex.y
                    )));
                }
            }
            if ex.payload.len() != shape.len() {
                return Err(Error::Input(format!(
                    "{}: payload has {} values, shape {shape} needs {}",
                    ex.id,
                    ex.payload.len(),
                    shape.len()
                )));
            }
        }
        Ok(Dataset {
            examples,
            index,
            taxonomy,
            shape,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn k(&self) -> usize {
        self.taxonomy.k()
    }

    pub fn taxonomy(&self) -> &TaxonomyMap {
        &self.taxonomy
    }

    pub fn shape(&self) -> PayloadShape {
        self.shape
    }

    pub fn root(&self) -> &std::path::Path {
        &self.root
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn example(&self, index: usize) -> &Example {
        &self.examples[index]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Stacks the payloads of `indices` into a row matrix.
    pub fn inputs(&self, indices: &[usize]) -> Array2<f64> {
        let d = self.shape.len();
        let mut out = Array2::zeros((indices.len(), d));
        for (row, &i) in indices.iter().enumerate() {
            out.row_mut(row)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&self.examples[i].payload);
        }
        out
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<Class> {
        indices.iter().map(|&i| self.examples[i].y).collect()
    }

    /// Copy with the expert column replaced. `None` entries clear the prediction.
    pub fn with_expert(
        &self,
        predictions: impl IntoIterator<Item = (usize, Option<Class>, Option<Provenance>)>,
    ) -> Result<Dataset> {
        let mut examples = self.examples.clone();
        for (i, h, provenance) in predictions {
            let ex = examples
                .get_mut(i)
                .ok_or_else(|| Error::Integrity(format!("row {i} out of range")))?;
            ex.h = h;
            ex.provenance = provenance;
        }
        Dataset::new(examples, self.taxonomy.clone(), self.shape, self.root.clone())
    }

    /// Restricts to `indices`, keeping their order by id.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let examples = indices.iter().map(|&i| self.examples[i].clone()).collect();
        Dataset::new(examples, self.taxonomy.clone(), self.shape, self.root.clone())
    }

    /// Fingerprint over ids, labels and payloads.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(self.shape.to_string().as_bytes());
        for ex in &self.examples {
            bytes.extend_from_slice(ex.id.as_bytes());
            bytes.extend_from_slice(&(ex.y.index() as u64).to_le_bytes());
            for v in &ex.payload {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::seed::fingerprint(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(id: &str, y: usize) -> Example {
        Example {
            id: id.into(),
            payload: vec![0.0; 2],
            source: String::new(),
            y: Class(y),
            y_sub: None,
            h: None,
            provenance: None,
            fold: None,
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn class_is_one_based_outside() {
        assert_eq!(Class::from_one_based(1), Some(Class(0)));
        assert_eq!(Class::from_one_based(0), None);
        assert_eq!(Class(6).one_based(), 7);
        assert_eq!(Class(6).to_string(), "7");
    }

    #[test]
    fn taxonomy_requires_full_coverage() {
        assert!(TaxonomyMap::new(vec![Class(0), Class(0)], 2).is_err());
        assert!(TaxonomyMap::new(vec![Class(0), Class(2)], 2).is_err());
        let t = TaxonomyMap::new(vec![Class(0), Class(1), Class(1)], 2).unwrap();
        assert_eq!(t.k_sub(), 3);
        assert_eq!(t.subclasses_of(Class(1)).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn dataset_sorts_and_rejects_duplicates() {
        let t = TaxonomyMap::identity(2);
        let ds = Dataset::new(
            vec![example("b", 0), example("a", 1)],
            t.clone(),
            PayloadShape::Features(2),
            PathBuf::new(),
        )
        .unwrap();
        assert_eq!(ds.example(0).id, "a");
        assert_eq!(ds.position("b"), Some(1));
        let dup = Dataset::new(
            vec![example("a", 0), example("a", 1)],
            t,
            PayloadShape::Features(2),
            PathBuf::new(),
        );
        assert!(matches!(dup, Err(Error::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn shape_parses_both_forms() {
        assert_eq!(PayloadShape::parse("32"), Some(PayloadShape::Features(32)));
        assert_eq!(
            PayloadShape::parse("8x8x3"),
            Some(PayloadShape::Image {
                height: 8,
                width: 8,
                channels: 3
            })
        );
        assert_eq!(PayloadShape::parse("8x8"), None);
        assert_eq!(PayloadShape::parse("0"), None);
    }
}
