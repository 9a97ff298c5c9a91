use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::pgm::decode_pgm;
use crate::error::{Error, IndexError, PgmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    /// Resolved against the index file's directory.
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
    /// 1-based line in the index file.
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<SampleRecord>,
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Parses index text and checks id uniqueness and split disjointness.
/// Referenced files are not touched; see [`load_index`].
pub fn parse_index(text: &str, base_dir: &Path) -> Result<DatasetIndex> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, (usize, Split)> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.strip_suffix('\r').unwrap_or(raw);
        if content.trim().is_empty() || content.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = content.split('\t').collect();
        let malformed = |reason: String| Error::from(IndexError::Malformed { line, reason });
        let [id, image, mask, split] = fields[..] else {
            return Err(malformed(format!(
                "expected 4 tab-separated fields, found {}",
                fields.len()
            )));
        };
        if id.is_empty() || image.is_empty() || mask.is_empty() {
            return Err(malformed("empty field".into()));
        }
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(malformed(format!(
                    "split must be train or test, got `{other}`"
                )))
            }
        };
        if let Some(&(first_line, first_split)) = seen.get(id) {
            let id = id.to_string();
            return Err(if first_split != split {
                IndexError::SplitLeak {
                    line,
                    id,
                    first_line,
                }
            } else {
                IndexError::DuplicateId {
                    line,
                    id,
                    first_line,
                }
            }
            .into());
        }
        seen.insert(id.to_string(), (line, split));
        records.push(SampleRecord {
            id: id.to_string(),
            image_path: base_dir.join(image),
            mask_path: base_dir.join(mask),
            split,
            line,
        });
    }
    let mut warnings = Vec::new();
    if !records.iter().any(|r| r.split == Split::Test) {
        warnings.push("test split is empty; only training is possible".to_string());
    }
    if !records.iter().any(|r| r.split == Split::Train) {
        warnings.push("train split is empty".to_string());
    }
    Ok(DatasetIndex { records, warnings })
}

/// Reads a dimension pair from a PGM header without keeping the payload.
fn pgm_dims(path: &Path, line: usize) -> Result<(usize, usize)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::from(IndexError::MissingFile {
                line,
                path: path.to_path_buf(),
            })
        } else {
            Error::io(path, e)
        }
    })?;
    let img =
        decode_pgm(&bytes).map_err(|source: PgmError| IndexError::Unreadable { line, source })?;
    Ok((img.width, img.height))
}

/// Loads an index file and verifies every referenced image/mask pair.
pub fn load_index(path: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let index = parse_index(&text, base)?;
    for r in &index.records {
        let image = pgm_dims(&r.image_path, r.line)?;
        let mask = pgm_dims(&r.mask_path, r.line)?;
        if image != mask {
            return Err(IndexError::DimensionMismatch {
                line: r.line,
                image,
                mask,
            }
            .into());
        }
    }
    for w in &index.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(index)
}
