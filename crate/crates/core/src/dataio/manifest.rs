//! Dataset manifest: classes, per-sample records and the query/database
//! designation recorded at export time.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::FeatureStore;
use crate::encoder::Pooling;
use crate::error::{Error, Result};
use crate::knowledge::DEFAULT_PROMPT_TEMPLATE;
use crate::retrieval::Labels;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Query,
    /// Source of the N-shot training samples; the rest form the gallery.
    Database,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    /// Multi-hot, one entry per class.
    pub labels: Vec<u8>,
    /// Store tensor holding this sample's token matrix.
    pub tensor: String,
    /// Frozen-backbone feature exported for the same sample, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub split: Split,
}

impl Record {
    pub fn label_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    #[serde(default = "default_block_prefix")]
    pub prefix: String,
    pub heads: usize,
    pub pooling: Pooling,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_block_prefix() -> String {
    "block/".into()
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_knowledge() -> String {
    "knowledge".into()
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub class_names: Vec<String>,
    #[serde(default = "default_template")]
    pub prompt_template: String,
    #[serde(default)]
    pub multi_label: bool,
    /// mAP cut-off; `None` means the whole gallery.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_k: Option<usize>,
    #[serde(default = "default_knowledge")]
    pub knowledge_tensor: String,
    pub block: BlockConfig,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes();
        if c < 2 {
            return Err(Error::Format(
                "a manifest needs at least two classes".into(),
            ));
        }
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate record id `{}`", r.id)));
            }
            if r.labels.len() != c {
                return Err(Error::Format(format!(
                    "record `{}` has {} label entries for {c} classes",
                    r.id,
                    r.labels.len()
                )));
            }
            if r.labels.iter().any(|&v| v > 1) {
                return Err(Error::Format(format!(
                    "record `{}` labels are not 0/1",
                    r.id
                )));
            }
            let n = r.labels.iter().filter(|&&v| v == 1).count();
            if n == 0 || (!self.multi_label && n != 1) {
                return Err(Error::Format(format!(
                    "record `{}` carries {n} labels in a {} dataset",
                    r.id,
                    if self.multi_label {
                        "multi-label"
                    } else {
                        "single-label"
                    }
                )));
            }
        }
        Ok(())
    }

    /// Every referenced tensor must be present.
    pub fn check_store(&self, store: &FeatureStore) -> Result<()> {
        let referenced = std::iter::once(&self.knowledge_tensor).chain(
            self.records
                .iter()
                .flat_map(|r| std::iter::once(&r.tensor).chain(r.reference.as_ref())),
        );
        for name in referenced {
            if !store.contains(name) {
                return Err(Error::MissingTensor(name.clone()));
            }
        }
        Ok(())
    }

    pub fn record(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Position of each id in `records`, failing on unknown ids.
    pub fn positions(&self, ids: &[String]) -> Result<Vec<usize>> {
        let index: std::collections::HashMap<&str, usize> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Format(format!("unknown record id `{id}`")))
            })
            .collect()
    }

    /// Multi-hot labels of the given records as a C×n matrix (one column per sample).
    pub fn label_matrix(&self, positions: &[usize]) -> Mat {
        let mut y = Mat::zeros(self.classes(), positions.len());
        for (j, &p) in positions.iter().enumerate() {
            for c in self.records[p].label_indices() {
                y.set(c, j, 1.0);
            }
        }
        y
    }

    pub fn labels(&self, ids: &[String]) -> Result<Labels> {
        let sets: Vec<Vec<usize>> = self
            .positions(ids)?
            .into_iter()
            .map(|p| self.records[p].label_indices())
            .collect();
        Labels::from_indices(&sets, self.classes())
    }

    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id.clone())
            .collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
