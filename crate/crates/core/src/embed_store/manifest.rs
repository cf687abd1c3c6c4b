//! Line-delimited JSON manifests describing embedding files.
//!
//! One entry per line, e.g.
//!
//! ```text
//! {"name":"r8","split":"train","records":5485,"t":128,"h":768,"cls_flag":true,"encoder":"bert-base-uncased","files":["r8.train.dkvb"]}
//! ```
//!
//! Relative file paths resolve against the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::format::{read_header, read_records, RecordSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub split: Split,
    pub records: u64,
    pub t: usize,
    pub h: usize,
    pub cls_flag: bool,
    pub encoder: String,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Manifest {
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                Error::InvalidConfig(format!("manifest line {}: {e}", lineno + 1))
            })?;
            entries.push(entry);
        }
        Ok(Manifest::new(entries, base_dir))
    }

    /// Loads a manifest and checks every referenced file against it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Manifest::parse(&text, base)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, file: &str) -> PathBuf {
        let p = Path::new(file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Every file exists, its header agrees with the entry, all entries
    /// share one `(t, h, cls_flag)` layout and record counts add up.
    pub fn validate(&self) -> Result<()> {
        let mut layout: Option<(usize, usize, bool)> = None;
        for e in &self.entries {
            let this = (e.t, e.h, e.cls_flag);
            match layout {
                None => layout = Some(this),
                Some(l) if l != this => {
                    return Err(Error::InvalidConfig(format!(
                        "manifest entry {}/{} has layout {this:?}, expected {l:?}",
                        e.name, e.split
                    )))
                }
                _ => {}
            }
            let mut total = 0u64;
            for f in &e.files {
                let path = self.resolve(f);
                if !path.exists() {
                    return Err(Error::InvalidConfig(format!(
                        "manifest entry {}/{} references missing file {}",
                        e.name,
                        e.split,
                        path.display()
                    )));
                }
                let header = read_header(&path)?;
                if (header.t, header.h, header.cls_flag) != this {
                    return Err(Error::InvalidConfig(format!(
                        "{} header ({}, {}, {}) disagrees with manifest {this:?}",
                        path.display(),
                        header.t,
                        header.h,
                        header.cls_flag
                    )));
                }
                total += header.count;
            }
            if total != e.records {
                return Err(Error::InvalidConfig(format!(
                    "manifest entry {}/{} declares {} records, files hold {total}",
                    e.name, e.split, e.records
                )));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Option<(usize, usize, bool)> {
        self.entries.first().map(|e| (e.t, e.h, e.cls_flag))
    }

    /// Concatenates all files of one split.
    pub fn load_split(&self, split: Split) -> Result<RecordSet> {
        let (t, h, cls) = self
            .layout()
            .ok_or_else(|| Error::InvalidConfig("empty manifest".into()))?;
        let mut set = RecordSet::new(t, h, cls);
        for e in self.entries.iter().filter(|e| e.split == split) {
            for f in &e.files {
                let part = read_records(self.resolve(f))?;
                set.records.extend(part.records);
            }
        }
        Ok(set)
    }

    /// Absolute paths of all referenced files, for identity comparisons.
    pub fn file_set(&self) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = self
            .entries
            .iter()
            .flat_map(|e| e.files.iter().map(|f| self.resolve(f)))
            .map(|p| fs::canonicalize(&p).unwrap_or(p))
            .collect();
        files.sort();
        files.dedup();
        files
    }
}

/// Train/val/test record sets sharing one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: RecordSet,
    pub val: RecordSet,
    pub test: RecordSet,
}

impl Dataset {
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        Ok(Dataset {
            name: manifest
                .entries
                .first()
                .map(|e| e.name.clone())
                .unwrap_or_default(),
            train: manifest.load_split(Split::Train)?,
            val: manifest.load_split(Split::Val)?,
            test: manifest.load_split(Split::Test)?,
        })
    }

    pub fn layout(&self) -> (usize, usize, bool) {
        (self.train.t, self.train.h, self.train.cls_flag)
    }

    pub fn split(&self, split: Split) -> &RecordSet {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Number of classes, taken as one past the largest label seen.
    pub fn num_classes(&self) -> usize {
        [&self.train, &self.val, &self.test]
            .iter()
            .flat_map(|s| s.records.iter().map(|r| r.label as usize + 1))
            .max()
            .unwrap_or(0)
    }

    /// Writes one file per non-empty split plus a manifest next to them.
    pub fn save(&self, dir: impl AsRef<Path>, encoder: &str) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let set = self.split(split);
            let file = format!("{}.{split}.dkvb", self.name);
            super::format::write_records(dir.join(&file), set)?;
            entries.push(ManifestEntry {
                name: self.name.clone(),
                split,
                records: set.len() as u64,
                t: set.t,
                h: set.h,
                cls_flag: set.cls_flag,
                encoder: encoder.to_string(),
                files: vec![file],
            });
        }
        let manifest = Manifest::new(entries, dir);
        manifest.save(dir.join(format!("{}.manifest.jsonl", self.name)))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_store::format::{write_records, EmbeddingRecord};
    use crate::numkit::Matrix;

    fn record(label: u32) -> EmbeddingRecord {
        EmbeddingRecord {
            id: label as u64,
            z: Matrix::zeros(2, 3),
            label,
            task_id: 0,
            domain_id: 0,
            valid_tokens: 2,
        }
    }

    #[test]
    fn load_validates_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = RecordSet::new(2, 3, false);
        set.records = vec![record(0), record(1)];
        write_records(dir.path().join("a.dkvb"), &set).unwrap();
        let entry = ManifestEntry {
            name: "toy".into(),
            split: Split::Train,
            records: 2,
            t: 2,
            h: 3,
            cls_flag: false,
            encoder: "toy".into(),
            files: vec!["a.dkvb".into()],
        };
        let path = dir.path().join("m.jsonl");
        Manifest::new(vec![entry.clone()], dir.path()).save(&path).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.load_split(Split::Train).unwrap().len(), 2);
        assert_eq!(m.load_split(Split::Test).unwrap().len(), 0);

        let mut wrong = entry.clone();
        wrong.records = 3;
        Manifest::new(vec![wrong], dir.path()).save(&path).unwrap();
        assert!(Manifest::load(&path).is_err());

        let mut wrong = entry.clone();
        wrong.h = 4;
        Manifest::new(vec![wrong], dir.path()).save(&path).unwrap();
        assert!(Manifest::load(&path).is_err());

        let mut missing = entry;
        missing.files = vec!["nope.dkvb".into()];
        Manifest::new(vec![missing], dir.path()).save(&path).unwrap();
        assert!(Manifest::load(&path).is_err());
    }

    #[test]
    fn parse_skips_blank_and_comment_lines() {
        let text = "# header\n\n{\"name\":\"x\",\"split\":\"val\",\"records\":0,\"t\":1,\"h\":1,\"cls_flag\":false,\"encoder\":\"e\",\"files\":[]}\n";
        let m = Manifest::parse(text, ".").unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].split, Split::Val);
        assert!(Manifest::parse("{not json", ".").is_err());
    }
}
