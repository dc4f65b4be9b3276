//! JSON dataset manifest.
//!
//! ```json
//! {
//!   "task": "detection",
//!   "samples": [
//!     { "id": "img000", "image": "images/img000.png", "label": { "dots": "dots/img000.csv" } }
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Labels are
//! `{"class": "epithelial"}`, `{"mask": "<png>"}` or `{"dots": "<csv>"}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Task;

/// Nucleus categories of the classification task, in class-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassName {
    Epithelial,
    Fibroblast,
    Inflammatory,
    Miscellaneous,
}

impl ClassName {
    pub const ALL: [ClassName; 4] = [
        ClassName::Epithelial,
        ClassName::Fibroblast,
        ClassName::Inflammatory,
        ClassName::Miscellaneous,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Class(ClassName),
    Mask(PathBuf),
    Dots(PathBuf),
}

impl Label {
    fn task(&self) -> Task {
        match self {
            Label::Class(_) => Task::Classification,
            Label::Mask(_) => Task::Segmentation,
            Label::Dots(_) => Task::Detection,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    /// Reads, validates and resolves relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::data(path, format!("invalid manifest: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.samples {
            s.image = base.join(&s.image);
            match &mut s.label {
                Label::Mask(p) | Label::Dots(p) => *p = base.join(&*p),
                Label::Class(_) => {}
            }
        }
        m.validate().map_err(|e| Error::data(path, e))?;
        Ok(m)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.samples.is_empty() {
            return Err("manifest lists no samples".into());
        }
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(format!("duplicate sample id {}", s.id));
            }
            if s.label.task() != self.task {
                return Err(format!("sample {} has a {} label in a {} manifest", s.id, s.label.task(), self.task));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
