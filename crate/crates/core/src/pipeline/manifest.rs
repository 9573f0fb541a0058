//! `id|transcript|wav_path` manifests and the preprocessing index.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub text: String,
    pub wav: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        && !id.starts_with('.')
}

/// Parses manifest text. Relative WAV paths resolve against `base`. Blank
/// lines and lines starting with `#` are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        let err = |m: String| Error::Invalid(format!("manifest line {}: {m}", n + 1));
        if fields.len() != 3 {
            return Err(err(format!(
                "expected id|transcript|wav_path, got {} fields",
                fields.len()
            )));
        }
        let id = fields[0].trim();
        if !valid_id(id) {
            return Err(err(format!(
                "invalid id `{id}` (letters, digits, '-', '_' and '.')"
            )));
        }
        if !seen.insert(id.to_string()) {
            return Err(err(format!("duplicate id `{id}`")));
        }
        if fields[1].trim().is_empty() {
            return Err(err(format!("empty transcript for `{id}`")));
        }
        let wav = PathBuf::from(fields[2].trim());
        out.push(ManifestEntry {
            id: id.to_string(),
            text: fields[1].to_string(),
            wav: if wav.is_absolute() {
                wav
            } else {
                base.join(wav)
            },
        });
    }
    if out.is_empty() {
        return Err(Error::Invalid("manifest has no entries".into()));
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// One preprocessed utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub text: String,
    pub ids: Vec<usize>,
    pub frames: usize,
    pub wav: PathBuf,
}

pub const INDEX_FILE: &str = "index.txt";

pub fn format_index(entries: &[IndexEntry]) -> String {
    let mut s = String::from("# id|normalized text|char ids|frames|wav\n");
    for e in entries {
        let ids: Vec<String> = e.ids.iter().map(|i| i.to_string()).collect();
        s.push_str(&format!(
            "{}|{}|{}|{}|{}\n",
            e.id,
            e.text,
            ids.join(" "),
            e.frames,
            e.wav.display()
        ));
    }
    s
}

pub fn parse_index(text: &str) -> Result<Vec<IndexEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: &str| Error::Format(format!("index line {}: {m}", n + 1));
        let f: Vec<&str> = line.split('|').collect();
        if f.len() != 5 {
            return Err(err("expected 5 fields"));
        }
        let ids = f[2]
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|_| err("bad char id")))
            .collect::<Result<Vec<_>>>()?;
        out.push(IndexEntry {
            id: f[0].to_string(),
            text: f[1].to_string(),
            ids,
            frames: f[3].parse().map_err(|_| err("bad frame count"))?,
            wav: PathBuf::from(f[4]),
        });
    }
    Ok(out)
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<Vec<IndexEntry>> {
    let path = dir.as_ref().join(INDEX_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let entries = parse_index(&text)?;
    if entries.is_empty() {
        return Err(Error::Invalid(format!(
            "{} lists no utterances",
            path.display()
        )));
    }
    Ok(entries)
}
