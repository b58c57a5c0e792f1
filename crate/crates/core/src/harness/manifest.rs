use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::probe::Labels;

use super::container::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultiLabel,
    MultiClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

/// One sound event placed in a synthetic clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub class: usize,
    pub kind: String,
    pub onset: f64,
    pub duration: f64,
    pub freq: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seconds: f64,
    pub events: Vec<EventSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub labels: Vec<String>,
    pub split: SplitName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

/// Where the layered probing task lives and which layer carries its signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayeredInfo {
    pub designated_layer: usize,
    pub layers: usize,
    pub dim: usize,
    pub tokens: usize,
    /// Directory holding `{split}.batl` stack containers, relative to the manifest.
    pub stacks: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub vocabulary: Vec<String>,
    pub task: TaskKind,
    pub records: Vec<Record>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layered: Option<LayeredInfo>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let vocab: HashSet<&str> = self.vocabulary.iter().map(String::as_str).collect();
        if vocab.len() != self.vocabulary.len() {
            return Err(Error::Config("manifest vocabulary has duplicates".into()));
        }
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Config(format!("record id `{}` appears twice", r.id)));
            }
            if let Some(l) = r.labels.iter().find(|l| !vocab.contains(l.as_str())) {
                return Err(Error::Config(format!("record `{}` has label `{l}` outside the vocabulary", r.id)));
            }
            if self.task == TaskKind::MultiClass && r.labels.len() != 1 {
                return Err(Error::Config(format!("multi-class record `{}` needs exactly one label", r.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn split(&self, s: SplitName) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == s).collect()
    }

    pub fn resolve(&self, manifest_dir: &Path, r: &Record) -> PathBuf {
        let p = Path::new(&r.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    }

    /// Ground truth for `records` in the manifest's task form.
    pub fn labels(&self, records: &[&Record]) -> Result<Labels> {
        let index = |name: &str| self.vocabulary.iter().position(|v| v == name).expect("validated label");
        match self.task {
            TaskKind::MultiClass => {
                Labels::multi_class(self.vocabulary.len(), records.iter().map(|r| index(&r.labels[0])).collect())
            }
            TaskKind::MultiLabel => {
                let c = self.vocabulary.len();
                let mut m = Tensor::zeros(&[records.len(), c]);
                for (i, r) in records.iter().enumerate() {
                    for l in &r.labels {
                        m.row_mut(i)[index(l)] = 1.0;
                    }
                }
                Labels::multi_label(m)
            }
        }
    }
}
