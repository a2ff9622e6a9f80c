//! Tab-separated clip manifest and drop log.
//!
//! Manifest lines: `clip_path  mask_path  caption_id  fps  provenance`.
//! Drop-log lines: `clip_path  stage  reason`. No header rows.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clip_path: String,
    pub mask_path: String,
    pub caption_id: usize,
    pub fps: f32,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropRecord {
    pub clip_path: String,
    pub stage: String,
    pub reason: String,
}

fn clean(field: &str) -> Result<&str> {
    if field.contains(['\t', '\n', '\r']) {
        return Err(Error::Data(format!("manifest field contains a tab or newline: {field:?}")));
    }
    Ok(field)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> Result<String> {
    let mut s = String::new();
    for e in entries {
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            clean(&e.clip_path)?,
            clean(&e.mask_path)?,
            e.caption_id,
            e.fps,
            clean(&e.provenance)?
        )
        .expect("string write");
    }
    Ok(s)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Data(format!("manifest line {}: expected 5 fields, found {}", i + 1, f.len())));
            }
            let caption_id = f[2]
                .parse()
                .map_err(|_| Error::Data(format!("manifest line {}: bad caption id {:?}", i + 1, f[2])))?;
            let fps: f32 = f[3]
                .parse()
                .map_err(|_| Error::Data(format!("manifest line {}: bad fps {:?}", i + 1, f[3])))?;
            if !(fps > 0.0) {
                return Err(Error::Data(format!("manifest line {}: fps must be positive", i + 1)));
            }
            Ok(ManifestEntry {
                clip_path: f[0].to_string(),
                mask_path: f[1].to_string(),
                caption_id,
                fps,
                provenance: f[4].to_string(),
            })
        })
        .collect()
}

pub fn format_drops(drops: &[DropRecord]) -> Result<String> {
    let mut s = String::new();
    for d in drops {
        writeln!(s, "{}\t{}\t{}", clean(&d.clip_path)?, clean(&d.stage)?, clean(&d.reason)?).expect("string write");
    }
    Ok(s)
}

pub fn parse_drops(text: &str) -> Result<Vec<DropRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.splitn(3, '\t').collect();
            if f.len() != 3 {
                return Err(Error::Data(format!("bad drop-log line {line:?}")));
            }
            Ok(DropRecord {
                clip_path: f[0].into(),
                stage: f[1].into(),
                reason: f[2].into(),
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, format_manifest(entries)?).map_err(|e| Error::io(path, e))
}

/// Resolves a manifest path relative to the manifest's directory.
pub fn resolve(manifest: &Path, entry_path: &str) -> PathBuf {
    let p = Path::new(entry_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: usize) -> ManifestEntry {
        ManifestEntry {
            clip_path: format!("c{i}.vpcl"),
            mask_path: format!("c{i}.mask.vpcl"),
            caption_id: i,
            fps: 8.0,
            provenance: format!("synth;seed=1;index={i}"),
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let es: Vec<_> = (0..3).map(entry).collect();
        let text = format_manifest(&es).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(parse_manifest(&text).unwrap(), es);
        assert!(parse_manifest("").unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_are_data_errors() {
        assert!(matches!(parse_manifest("a\tb\tc"), Err(Error::Data(_))));
        assert!(parse_manifest("a\tb\tx\t8\tp").is_err());
        assert!(parse_manifest("a\tb\t1\t0\tp").is_err());
        let mut e = entry(0);
        e.provenance = "bad\ttab".into();
        assert!(format_manifest(&[e]).is_err());
    }

    #[test]
    fn drops_roundtrip() {
        let d = vec![DropRecord { clip_path: "x".into(), stage: "coverage".into(), reason: "coverage 0.2 outside".into() }];
        assert_eq!(parse_drops(&format_drops(&d).unwrap()).unwrap(), d);
    }

    #[test]
    fn paths_resolve_against_manifest_dir() {
        assert_eq!(resolve(Path::new("/data/m.tsv"), "a.vpcl"), PathBuf::from("/data/a.vpcl"));
        assert_eq!(resolve(Path::new("/data/m.tsv"), "/abs/a.vpcl"), PathBuf::from("/abs/a.vpcl"));
        assert_eq!(resolve(Path::new("m.tsv"), "a.vpcl"), PathBuf::from("a.vpcl"));
    }
}
