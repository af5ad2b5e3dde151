//! Per-utterance embedding sequences keyed by utterance id.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::write_json_atomic;
use crate::wsmf;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingArchive {
    entries: BTreeMap<String, Array2<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveIndex {
    dim: usize,
    utterances: Vec<ArchiveEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveEntry {
    id: String,
    file: String,
    frames: usize,
}

impl EmbeddingArchive {
    pub fn insert(&mut self, id: String, frames: Array2<f64>) {
        self.entries.insert(id, frames);
    }

    pub fn get(&self, id: &str) -> Result<&Array2<f64>> {
        self.entries.get(id).ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    /// Frames `[start, end)` of utterance `id`.
    pub fn span(&self, id: &str, start: usize, end: usize) -> Result<ArrayView2<'_, f64>> {
        let e = self.get(id)?;
        if end > e.nrows() || start >= end {
            return Err(Error::LengthMismatch(end, e.nrows()));
        }
        Ok(e.slice(s![start..end, ..]))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.values().next().map_or(0, |e| e.ncols())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.entries.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.mapv(&f))).collect(),
        }
    }

    /// One WSMF file per utterance plus `index.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut utterances = Vec::new();
        for (i, (id, e)) in self.entries.iter().enumerate() {
            let file = format!("{i:06}.wsmf");
            wsmf::write(&dir.join(&file), e)?;
            utterances.push(ArchiveEntry {
                id: id.clone(),
                file,
                frames: e.nrows(),
            });
        }
        write_json_atomic(
            &dir.join("index.json"),
            &ArchiveIndex {
                dim: self.dim(),
                utterances,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::Io(e),
        })?;
        let index: ArchiveIndex = serde_json::from_str(&text)?;
        let mut archive = Self::default();
        for u in index.utterances {
            let e = wsmf::read(&dir.join(&u.file))?;
            if e.nrows() != u.frames || (e.nrows() > 0 && e.ncols() != index.dim) {
                return Err(Error::DimensionMismatch {
                    context: format!("embedding of {}", u.id),
                    expected: index.dim,
                    got: e.ncols(),
                });
            }
            archive.insert(u.id, e);
        }
        Ok(archive)
    }
}
