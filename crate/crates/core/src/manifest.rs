//! Dataset index: a UTF-8, tab-separated file with one utterance per line,
//!
//! ```text
//! # id  path  split  label  category
//! u001  wav/train/u001.wav  train  GENUINE  -
//! u002  wav/train/u002.wav  train  RE       RE-PH2-PH3
//! ```
//!
//! Paths are relative to the directory holding the manifest. Lines starting
//! with `#` and blank lines are ignored.

use std::collections::HashSet;
use std::path::{Component, Path, PathBuf};

use crate::data::{Label, Split, Utterance};
use crate::error::{Error, Result};
use crate::wav;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
    pub label: Label,
    /// Empty for genuine speech (written as `-`).
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Parses manifest text without touching the filesystem. `source` only
    /// labels error messages.
    pub fn parse(text: &str, root: impl Into<PathBuf>, source: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                msg,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(err(format!("expected 5 tab-separated columns, got {}", cols.len())));
            }
            let id = cols[0].to_string();
            if id.is_empty() {
                return Err(err("empty id".into()));
            }
            let path = PathBuf::from(cols[1]);
            if path.as_os_str().is_empty()
                || path
                    .components()
                    .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
            {
                return Err(err(format!(
                    "path '{}' must be relative and stay under the manifest directory",
                    cols[1]
                )));
            }
            let split: Split = cols[2].parse().map_err(err)?;
            let label: Label = cols[3].parse().map_err(err)?;
            let category = if cols[4] == "-" { String::new() } else { cols[4].to_string() };
            if label.is_genuine() != category.is_empty() {
                return Err(err(format!(
                    "label {label} with category '{}': genuine rows use '-', attacks need a category",
                    cols[4]
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(err(format!("duplicate id '{id}'")));
            }
            records.push(ManifestRecord {
                id,
                path,
                split,
                label,
                category,
            });
        }
        Ok(Self {
            root: root.into(),
            records,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# id\tpath\tsplit\tlabel\tcategory\n");
        for r in &self.records {
            let cat = if r.category.is_empty() { "-" } else { &r.category };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.path.display(),
                r.split,
                r.label,
                cat
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.split(split).next().is_some()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn load_utterance(&self, record: &ManifestRecord) -> Result<Utterance> {
        let audio = wav::read_wav(&self.resolve(record))?;
        let utt = Utterance {
            id: record.id.clone(),
            samples: audio.samples,
            sample_rate: audio.sample_rate,
            label: record.label,
            category: record.category.clone(),
            split: record.split,
        };
        utt.validate()?;
        Ok(utt)
    }
}

/// Reads a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = Manifest::parse(&text, root, path)?;
    for r in &manifest.records {
        let p = manifest.resolve(r);
        if !p.is_file() {
            return Err(Error::Data(format!(
                "{}: audio file for '{}' not found at {}",
                path.display(),
                r.id,
                p.display()
            )));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        Manifest::parse(text, ".", Path::new("m.tsv"))
    }

    #[test]
    fn parses_rows_and_comments() {
        let m = parse(
            "# header\n\na\tw/a.wav\ttrain\tGENUINE\t-\nb\tw/b.wav\teval\tRE\tRE-PH2-PH3\n",
        )
        .unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].label, Label::Re);
        assert_eq!(m.records[1].category, "RE-PH2-PH3");
        assert!(m.records[0].category.is_empty());
        assert_eq!(parse(&m.to_tsv()).unwrap(), m);
    }

    #[test]
    fn unknown_label_names_line() {
        let err = parse("# c\na\tw/a.wav\ttrain\tXX\t-\n").unwrap_err().to_string();
        assert!(err.contains("m.tsv:2") && err.contains("XX"), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_escapes() {
        assert!(parse("a\tx.wav\ttrain\tGENUINE\t-\na\ty.wav\ttrain\tGENUINE\t-\n")
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
        assert!(parse("a\t../x.wav\ttrain\tGENUINE\t-\n").is_err());
        assert!(parse("a\t/abs/x.wav\ttrain\tGENUINE\t-\n").is_err());
        assert!(parse("a\tx.wav\ttrain\tSS\t-\n").is_err());
        assert!(parse("a\tx.wav\ttrain\tGENUINE\tSS-X\n").is_err());
        assert!(parse("a\tx.wav\ttrain\tGENUINE\n").is_err());
        assert!(parse("a\tx.wav\ttest\tGENUINE\t-\n").is_err());
    }

    #[test]
    fn load_reports_missing_audio() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "a\tnope.wav\ttrain\tGENUINE\t-\n").unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("not found"), "{err}");
    }
}
