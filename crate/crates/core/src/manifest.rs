//! Dataset manifests.
//!
//! A manifest is a CSV file with header `path,labels,split`. `labels` is
//! pipe-separated (empty for unlabeled pretraining data, multiple entries
//! for multi-label tasks). `split` holds either a TVT split name
//! (`train` / `valid` / `test`) or a fold index (`0`..`k-1`). Relative
//! clip paths are resolved against the manifest's directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub labels: Vec<String>,
    pub split: String,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Split one CSV record, honoring double-quoted fields with `""` escapes.
fn split_record(line: &str) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        if quoted {
            match c {
                '"' => {
                    if chars.peek() == Some(&'"') {
                        chars.next();
                        cur.push('"');
                    } else {
                        quoted = false;
                    }
                }
                _ => cur.push(c),
            }
        } else {
            match c {
                ',' => fields.push(std::mem::take(&mut cur)),
                '"' => {
                    if cur.is_empty() {
                        quoted = true;
                    } else {
                        return Err(Error::Manifest(format!(
                            "stray quote in unquoted field: {line:?}"
                        )));
                    }
                }
                _ => cur.push(c),
            }
        }
    }
    if quoted {
        return Err(Error::Manifest(format!("unterminated quote: {line:?}")));
    }
    fields.push(cur);
    Ok(fields)
}

impl Manifest {
    /// Parse manifest text. `base` is prepended to relative clip paths.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((_, l)) => break l,
                None => return Err(Error::Manifest("empty manifest".into())),
            }
        };
        let header_fields = split_record(header.trim_end_matches('\r'))?;
        let expected = ["path", "labels", "split"];
        if header_fields.len() != 3
            || header_fields
                .iter()
                .zip(expected)
                .any(|(a, b)| a.trim() != b)
        {
            return Err(Error::Manifest(format!(
                "header must be `path,labels,split`, got {header:?}"
            )));
        }

        let mut entries = Vec::new();
        for (lineno, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields = split_record(line)?;
            if fields.len() != 3 {
                return Err(Error::Manifest(format!(
                    "line {}: expected 3 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            if fields[0].is_empty() {
                return Err(Error::Manifest(format!("line {}: empty path", lineno + 1)));
            }
            let raw = PathBuf::from(&fields[0]);
            let path = match base {
                Some(b) if raw.is_relative() => b.join(raw),
                _ => raw,
            };
            let labels = if fields[1].is_empty() {
                Vec::new()
            } else {
                fields[1].split('|').map(|s| s.to_string()).collect()
            };
            entries.push(ManifestEntry {
                path,
                labels,
                split: fields[2].clone(),
            });
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("path,labels,split\n");
        for e in &self.entries {
            let p = e.path.to_string_lossy();
            let quote = p.contains(',') || p.contains('"');
            if quote {
                out.push('"');
                out.push_str(&p.replace('"', "\"\""));
                out.push('"');
            } else {
                out.push_str(&p);
            }
            out.push(',');
            out.push_str(&e.labels.join("|"));
            out.push(',');
            out.push_str(&e.split);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Entries whose split column equals `split`.
    pub fn subset(&self, split: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Distinct fold labels, parsed as indices, sorted.
    pub fn folds(&self) -> Result<Vec<String>> {
        let mut folds: Vec<String> = Vec::new();
        for e in &self.entries {
            if !folds.contains(&e.split) {
                folds.push(e.split.clone());
            }
        }
        for f in &folds {
            if f.parse::<usize>().is_err() {
                return Err(Error::Manifest(format!(
                    "split column holds `{f}`, not a fold index"
                )));
            }
        }
        folds.sort_by_key(|f| f.parse::<usize>().unwrap());
        Ok(folds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_basic() {
        let m = Manifest::parse(
            "path,labels,split\na.wav,dog,train\nb.wav,cat|dog,test\n",
            None,
        )
        .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].labels, vec!["dog"]);
        assert_eq!(m.entries[1].labels, vec!["cat", "dog"]);
        assert_eq!(m.entries[1].split, "test");
    }

    #[test]
    fn resolves_relative_paths() {
        let m = Manifest::parse(
            "path,labels,split\nwavs/a.wav,,train\n",
            Some(Path::new("/data/set1")),
        )
        .unwrap();
        assert_eq!(m.entries[0].path, PathBuf::from("/data/set1/wavs/a.wav"));
    }

    #[test]
    fn quoted_fields() {
        let m = Manifest::parse(
            "path,labels,split\n\"dir,with,commas/a.wav\",x,train\n",
            None,
        )
        .unwrap();
        assert_eq!(m.entries[0].path, PathBuf::from("dir,with,commas/a.wav"));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Manifest::parse("", None).is_err());
        assert!(Manifest::parse("nope,nope,nope\n", None).is_err());
        assert!(Manifest::parse("path,labels,split\nonly_one_field\n", None).is_err());
        assert!(Manifest::parse("path,labels,split\n,x,train\n", None).is_err());
        assert!(Manifest::parse("path,labels,split\n\"unterminated,x,train\n", None).is_err());
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = Manifest {
            entries: vec![ManifestEntry {
                path: PathBuf::from("clips/a.wav"),
                labels: vec!["a".into(), "b".into()],
                split: "0".into(),
            }],
        };
        m.write(&p).unwrap();
        let loaded = Manifest::load(&p).unwrap();
        assert_eq!(loaded.entries[0].path, dir.path().join("clips/a.wav"));
        assert_eq!(loaded.entries[0].labels, m.entries[0].labels);
        assert_eq!(loaded.folds().unwrap(), vec!["0"]);
    }
}
