use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encoder::{LayerStack, Tap};
use crate::error::{Error, Result};
use crate::probe::{Labels, Split};

use super::container::Container;
use super::manifest::{SplitName, TaskKind};

/// Frozen per-layer embeddings of one split, with ids and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct StackSet {
    pub split: SplitName,
    pub task: TaskKind,
    pub vocabulary: Vec<String>,
    pub tap: Tap,
    pub ids: Vec<String>,
    pub labels: Vec<Vec<String>>,
    pub stacks: Vec<LayerStack>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackMeta {
    kind: String,
    split: SplitName,
    task: TaskKind,
    vocabulary: Vec<String>,
    tap: Tap,
    ids: Vec<String>,
    labels: Vec<Vec<String>>,
}

pub fn stack_path(dir: &Path, split: SplitName) -> PathBuf {
    dir.join(format!("{}.batl", split.as_str()))
}

impl StackSet {
    pub fn to_container(&self) -> Result<Container> {
        let meta = StackMeta {
            kind: "layer_stacks".into(),
            split: self.split,
            task: self.task,
            vocabulary: self.vocabulary.clone(),
            tap: self.tap,
            ids: self.ids.clone(),
            labels: self.labels.clone(),
        };
        let mut c = Container::new(serde_json::to_value(meta)?);
        for (id, s) in self.ids.iter().zip(&self.stacks) {
            c.push(format!("{id}/patch"), s.patch.clone());
            c.push(format!("{id}/cls"), s.cls.clone());
        }
        Ok(c)
    }

    pub fn from_container(mut c: Container, path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Container {
            path: path.to_path_buf(),
            detail,
        };
        let meta: StackMeta = serde_json::from_value(c.meta.clone()).map_err(|e| bad(format!("stack header: {e}")))?;
        if meta.kind != "layer_stacks" || meta.ids.len() != meta.labels.len() {
            return Err(bad("not a layer-stack container".into()));
        }
        let mut stacks = Vec::with_capacity(meta.ids.len());
        for id in &meta.ids {
            let patch = c.take(&format!("{id}/patch")).ok_or_else(|| bad(format!("missing `{id}/patch`")))?;
            let cls = c.take(&format!("{id}/cls")).ok_or_else(|| bad(format!("missing `{id}/cls`")))?;
            stacks.push(LayerStack::new(patch, cls, meta.tap)?);
        }
        Ok(StackSet {
            split: meta.split,
            task: meta.task,
            vocabulary: meta.vocabulary,
            tap: meta.tap,
            ids: meta.ids,
            labels: meta.labels,
            stacks,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = stack_path(dir, self.split);
        self.to_container()?.write(&p)?;
        Ok(p)
    }

    pub fn read(dir: &Path, split: SplitName) -> Result<Self> {
        let p = stack_path(dir, split);
        Self::from_container(Container::read(&p)?, &p)
    }

    pub fn label_set(&self) -> Result<Labels> {
        let index = |name: &str| {
            self.vocabulary
                .iter()
                .position(|v| v == name)
                .ok_or_else(|| Error::Config(format!("label `{name}` outside the vocabulary")))
        };
        match self.task {
            TaskKind::MultiClass => {
                let y = self
                    .labels
                    .iter()
                    .map(|l| match l.as_slice() {
                        [one] => index(one),
                        _ => Err(Error::Config("multi-class sample needs exactly one label".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Labels::multi_class(self.vocabulary.len(), y)
            }
            TaskKind::MultiLabel => {
                let c = self.vocabulary.len();
                let mut m = crate::numerics::Tensor::zeros(&[self.labels.len(), c]);
                for (i, ls) in self.labels.iter().enumerate() {
                    for l in ls {
                        m.row_mut(i)[index(l)?] = 1.0;
                    }
                }
                Labels::multi_label(m)
            }
        }
    }

    pub fn to_split(&self) -> Result<Split> {
        Split::new(self.stacks.clone(), self.label_set()?)
    }

    pub fn describe(&self) -> serde_json::Value {
        let s0 = self.stacks.first();
        json!({
            "split": self.split,
            "samples": self.ids.len(),
            "layers": s0.map(|s| s.layers()),
            "tokens": s0.map(|s| s.tokens()),
            "dim": s0.map(|s| s.dim()),
        })
    }
}

/// Train, optional valid, and test stacks from one directory.
pub fn read_splits(dir: &Path) -> Result<(StackSet, Option<StackSet>, StackSet)> {
    let train = StackSet::read(dir, SplitName::Train)?;
    let valid = if stack_path(dir, SplitName::Valid).exists() {
        Some(StackSet::read(dir, SplitName::Valid)?)
    } else {
        None
    };
    let test = StackSet::read(dir, SplitName::Test)?;
    Ok((train, valid, test))
}
