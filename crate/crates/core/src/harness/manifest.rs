//! Sample lists: `id<TAB>path<TAB>truth`, one per line.
//!
//! Blank lines and lines starting with `#` are skipped. The truth column may
//! be omitted (or `-`) for unlabelled inputs. Relative paths resolve against
//! the manifest's directory when loaded from disk.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{parse_err, Result};
use crate::sentinel::ThreatClass;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub truth: Option<ThreatClass>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(parse_err(
                line_no,
                format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let id = fields[0].trim();
        let path = fields[1].trim();
        if id.is_empty() || path.is_empty() {
            return Err(parse_err(line_no, "empty id or path"));
        }
        if !ids.insert(id.to_string()) {
            return Err(parse_err(line_no, format!("duplicate id {id:?}")));
        }
        let truth = match fields.get(2).map(|s| s.trim()) {
            None | Some("") | Some("-") => None,
            Some(t) => Some(
                t.parse()
                    .map_err(|e: crate::Error| parse_err(line_no, e.to_string()))?,
            ),
        };
        out.push(ManifestEntry {
            id: id.to_string(),
            path: PathBuf::from(path),
            truth,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = parse_manifest(&std::fs::read_to_string(path)?)?;
    for e in &mut entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(entries)
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# id\tpath\ttruth\n");
    for e in entries {
        let truth = e.truth.map_or("-", |t| t.as_str());
        s.push_str(&format!("{}\t{}\t{}\n", e.id, e.path.display(), truth));
    }
    s
}
