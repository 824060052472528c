use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("manifest line {line}: `{path}` is listed twice")]
    Duplicate { line: usize, path: String },
    #[error("manifest has no training images")]
    EmptyTrain,
}

/// Whether manifest images are clean sources (simulation) or already noisy
/// observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataRole {
    Clean,
    Observed,
}

impl FromStr for DataRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(Self::Clean),
            "observed" => Ok(Self::Observed),
            other => Err(format!("unknown role `{other}` (expected clean or observed)")),
        }
    }
}

impl fmt::Display for DataRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Clean => "clean",
            Self::Observed => "observed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
}

/// Image list, one path per line:
///
/// ```text
/// # comments and blank lines are ignored
/// role = clean          # or `observed`; default clean
/// [train]               # default section
/// images/a.pgm
/// [val]
/// images/b.pgm
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub role: DataRole,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self, ManifestError> {
        let mut role = DataRole::Clean;
        let mut split = Split::Train;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(section) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                split = match section.trim() {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    other => {
                        return Err(ManifestError::Syntax {
                            line,
                            message: format!("unknown section `[{other}]`"),
                        })
                    }
                };
                continue;
            }
            if let Some(value) = content.strip_prefix("role").and_then(|r| r.trim_start().strip_prefix('=')) {
                role = value
                    .trim()
                    .parse()
                    .map_err(|message| ManifestError::Syntax { line, message })?;
                continue;
            }
            let path = base.join(content);
            if !seen.insert(path.clone()) {
                return Err(ManifestError::Duplicate {
                    line,
                    path: content.to_string(),
                });
            }
            entries.push(ManifestEntry { path, split });
        }
        let manifest = Self { role, entries };
        if manifest.train().next().is_none() {
            return Err(ManifestError::EmptyTrain);
        }
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn train(&self) -> impl Iterator<Item = &Path> {
        self.split(Split::Train)
    }

    pub fn val(&self) -> impl Iterator<Item = &Path> {
        self.split(Split::Val)
    }

    fn split(&self, split: Split) -> impl Iterator<Item = &Path> {
        self.entries
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| e.path.as_path())
    }
}
