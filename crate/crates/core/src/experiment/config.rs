use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{CifarStyleConfig, NihStyleConfig};
use crate::defer::{DeferAlgorithm, DeferConfig};
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::expertise::{ExpertiseConfig, ExpertiseVariant};
use crate::seed;

/// Where the dataset comes from. Exactly one of `manifest`, `cifar_style` and
/// `nih_style` must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub cifar_style: Option<CifarStyleConfig>,
    pub nih_style: Option<NihStyleConfig>,
    /// Used only when the rows carry no `fold` column.
    pub test_fraction: f64,
    /// Metadata column whose groups never straddle train and test.
    pub group_key: Option<String>,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            cifar_style: None,
            nih_style: None,
            test_fraction: 0.2,
            group_key: None,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    /// Strength-set expert over the dataset's subclass taxonomy.
    Synthetic,
    /// The `h` column already present in the data.
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub name: String,
    pub kind: ExpertKind,
    /// Fraction of subclasses that are strengths (synthetic experts).
    #[serde(default = "default_strength_fraction")]
    pub strength_fraction: f64,
    /// Seed of the strength draw and of the embedding whose features define similarity.
    #[serde(default)]
    pub seed: u64,
}

fn default_strength_fraction() -> f64 {
    0.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Expert predictions per class.
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<ExpertiseVariant>,
    /// Empty runs only the expertise stage.
    pub algorithms: Vec<DeferAlgorithm>,
    /// Also train every algorithm on the fully expert-labeled training set.
    pub complete_boundary: bool,
    pub save_models: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            budgets: vec![2, 4, 6, 10, 20, 50, 250],
            seeds: vec![0, 1, 2, 3, 4],
            variants: vec![ExpertiseVariant::EmbeddingFixMatch],
            algorithms: DeferAlgorithm::ALL.to_vec(),
            complete_boundary: true,
            save_models: true,
        }
    }
}

/// Full description of a grid run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset label used in the result tables.
    pub name: String,
    pub data: DataConfig,
    #[serde(rename = "expert")]
    pub experts: Vec<ExpertSpec>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub expertise: ExpertiseConfig,
    #[serde(default)]
    pub defer: DeferConfig,
    pub output: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, then applies `section.key=value` overrides in order.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let sources = usize::from(self.data.manifest.is_some())
            + usize::from(self.data.cifar_style.is_some())
            + usize::from(self.data.nih_style.is_some());
        if sources != 1 {
            return Err(Error::Config(format!(
                "data needs exactly one of manifest, cifar_style, nih_style (got {sources})"
            )));
        }
        let g = &self.grid;
        if g.budgets.is_empty() || g.budgets.contains(&0) {
            return Err(Error::Config("budgets must be a non-empty list of positive values".into()));
        }
        if g.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if g.seeds.iter().collect::<BTreeSet<_>>().len() != g.seeds.len() {
            return Err(Error::Config(format!("seeds must be unique: {:?}", g.seeds)));
        }
        if g.variants.is_empty() {
            return Err(Error::Config("at least one expertise variant is required".into()));
        }
        if self.experts.is_empty() {
            return Err(Error::Config("at least one [[expert]] is required".into()));
        }
        let names: BTreeSet<&str> = self.experts.iter().map(|e| e.name.as_str()).collect();
        if names.len() != self.experts.len() {
            return Err(Error::Config("expert names must be unique".into()));
        }
        for e in &self.experts {
            if e.kind == ExpertKind::Synthetic
                && !(e.strength_fraction > 0.0 && e.strength_fraction <= 1.0)
            {
                return Err(Error::Config(format!(
                    "expert {}: strength_fraction {} outside (0, 1]",
                    e.name, e.strength_fraction
                )));
            }
        }
        self.expertise.ssl.validate()?;
        Ok(())
    }

    /// Fingerprint of everything except the output directory.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        seed::fingerprint(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

/// Sets a dotted key in a TOML table. The value is parsed as TOML and taken as a bare
/// string when that fails, so `--set data.manifest=a/b.csv` works unquoted.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut node = table;
    for p in path {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            // [[expert]] arrays: address the first element.
            toml::Value::Array(a) => match a.first_mut() {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(Error::Config(format!("`{p}` in `{key}` is not a table"))),
            },
            _ => return Err(Error::Config(format!("`{p}` in `{key}` is not a table"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "toy"
output = "out"

[data.cifar_style]
classes = 3

[[expert]]
name = "H60"
kind = "synthetic"

[grid]
budgets = [2]
seeds = [0]
variants = ["embedding-nn"]
algorithms = ["surrogate"]
"#;

    #[test]
    fn parses_minimal_config() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.data.cifar_style.as_ref().unwrap().classes, 3);
        assert_eq!(c.experts[0].strength_fraction, 0.6);
        assert_eq!(c.grid.variants, vec![ExpertiseVariant::EmbeddingNn]);
        assert_eq!(c.grid.algorithms, vec![DeferAlgorithm::Surrogate]);
        assert_eq!(c.embedding, EmbeddingConfig::default());
    }

    #[test]
    fn overrides_replace_and_create_keys() {
        let c = RunConfig::from_toml_with(
            MINIMAL,
            &[
                "grid.seeds=[3, 4]".into(),
                "embedding.epochs=7".into(),
                "data.cifar_style.instance_noise=0.25".into(),
                "expert.strength_fraction=0.9".into(),
                "output=elsewhere/run".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.grid.seeds, vec![3, 4]);
        assert_eq!(c.embedding.epochs, 7);
        assert_eq!(c.data.cifar_style.unwrap().instance_noise, 0.25);
        assert_eq!(c.experts[0].strength_fraction, 0.9);
        assert_eq!(c.output, PathBuf::from("elsewhere/run"));
    }

    #[test]
    fn rejects_invalid_grids() {
        for o in ["grid.budgets=[0]", "grid.seeds=[1, 1]", "grid.variants=[]", "grid.budgets=[]"] {
            let err = RunConfig::from_toml_with(MINIMAL, &[o.to_string()]).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{o}: {err}");
        }
        let err = RunConfig::from_toml_with(MINIMAL, &["grid.typo=1".into()]).unwrap_err();
        assert!(err.to_string().contains("typo"));
        let err = RunConfig::from_toml_with(MINIMAL, &["data.manifest=m.csv".into()]).unwrap_err();
        assert!(err.to_string().contains("exactly one"));
        assert!(RunConfig::from_toml_with(MINIMAL, &["nonsense".into()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        let again = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.fingerprint(), again.fingerprint());
        let mut moved = c.clone();
        moved.output = PathBuf::from("x");
        assert_eq!(c.fingerprint(), moved.fingerprint());
    }
}
