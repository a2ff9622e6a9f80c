//! The curation pipeline: mask filters, scene-cut split, interval split,
//! selection. Annotation and captioning are pass-through at this scale.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::filters::{
    coverage_filter, detect_scene_transitions, mask_variation_filter, segments_from_cuts, selection_scores,
    split_clips, MaskStats, SelectionThresholds,
};
use super::manifest::{resolve, DropRecord, ManifestEntry};
use crate::container;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub max_mask_variation: f64,
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub scene_threshold: f64,
    pub interval_seconds: f64,
    pub min_seconds: f64,
    pub selection: SelectionThresholds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_mask_variation: 0.2,
            coverage_min: 0.3,
            coverage_max: 0.7,
            scene_threshold: 0.3,
            interval_seconds: 10.0,
            min_seconds: 6.0,
            selection: SelectionThresholds::default(),
        }
    }
}

pub mod stage {
    pub const READ: &str = "read";
    pub const MASK_VARIATION: &str = "mask_variation";
    pub const COVERAGE: &str = "coverage";
    pub const SPLIT: &str = "split";
    pub const SELECTION: &str = "selection";
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurateOutput {
    pub entries: Vec<ManifestEntry>,
    pub drops: Vec<DropRecord>,
}

fn drop_rec(e: &ManifestEntry, stage: &str, reason: impl Into<String>) -> DropRecord {
    DropRecord {
        clip_path: e.clip_path.clone(),
        stage: stage.into(),
        reason: reason.into(),
    }
}

fn file_stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into())
}

/// Runs the pipeline over `entries` (paths relative to `manifest_path`) and
/// writes kept segments into `out_dir`. Entries are processed in input order,
/// and each unreadable or rejected unit is logged once with its stage.
pub fn curate(
    entries: &[ManifestEntry],
    manifest_path: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<CurateOutput> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = CurateOutput::default();
    for (idx, e) in entries.iter().enumerate() {
        let loaded = container::read_video(&resolve(manifest_path, &e.clip_path)).and_then(|v| {
            let m = container::read_mask(&resolve(manifest_path, &e.mask_path))?;
            m.check_aligned(&v)?;
            Ok((v, m))
        });
        let (video, mask) = match loaded {
            Ok(x) => x,
            Err(err) => {
                out.drops.push(drop_rec(e, stage::READ, err.to_string()));
                continue;
            }
        };
        let stats = MaskStats::of(&mask);
        let var = mask_variation_filter(&stats, cfg.max_mask_variation);
        if !var.pass {
            out.drops.push(drop_rec(e, stage::MASK_VARIATION, format!("delta {:.4} >= {}", var.value, cfg.max_mask_variation)));
            continue;
        }
        let cov = coverage_filter(&stats, cfg.coverage_min, cfg.coverage_max);
        if !cov.pass {
            out.drops.push(drop_rec(
                e,
                stage::COVERAGE,
                format!("coverage {:.4} outside [{}, {}]", cov.value, cfg.coverage_min, cfg.coverage_max),
            ));
            continue;
        }
        let scenes = segments_from_cuts(video.frames(), &detect_scene_transitions(&video, cfg.scene_threshold));
        let ranges = split_clips(&scenes, e.fps, cfg.interval_seconds, cfg.min_seconds);
        if ranges.is_empty() {
            out.drops.push(drop_rec(
                e,
                stage::SPLIT,
                format!("no segment of at least {} s among {} scene(s)", cfg.min_seconds, scenes.len()),
            ));
            continue;
        }
        let stem = file_stem(&e.clip_path);
        for (seg, &(a, b)) in ranges.iter().enumerate() {
            let v = video.slice(a, b)?;
            let scores = selection_scores(&v);
            if let Some(reason) = cfg.selection.reject_reason(&scores) {
                out.drops.push(drop_rec(e, stage::SELECTION, format!("frames {a}-{b}: {reason}")));
                continue;
            }
            let m = mask.slice(a, b)?;
            let clip_name = format!("{idx:05}_{stem}_s{seg}.vpcl");
            let mask_name = format!("{idx:05}_{stem}_s{seg}.mask.vpcl");
            container::write_video(&out_dir.join(&clip_name), &v)?;
            container::write_mask(&out_dir.join(&mask_name), &m, e.fps)?;
            out.entries.push(ManifestEntry {
                clip_path: clip_name,
                mask_path: mask_name,
                caption_id: e.caption_id,
                fps: e.fps,
                provenance: format!("src={};frames={a}-{b};from={}", e.clip_path, e.provenance),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::format_manifest;
    use crate::video::{MaskClip, VideoClip};

    /// Writes a clip whose mask covers the top `rows[t]` rows of frame `t`.
    fn put(dir: &Path, name: &str, rows: &[usize], fps: f32) -> ManifestEntry {
        let n = rows.len();
        let v = VideoClip::filled(n, 10, 10, fps, 0.5);
        let m = MaskClip::from_fn(n, 10, 10, |t, y, _| y < rows[t]);
        container::write_video(&dir.join(format!("{name}.vpcl")), &v).unwrap();
        container::write_mask(&dir.join(format!("{name}.mask.vpcl")), &m, fps).unwrap();
        ManifestEntry {
            clip_path: format!("{name}.vpcl"),
            mask_path: format!("{name}.mask.vpcl"),
            caption_id: 1,
            fps,
            provenance: "test".into(),
        }
    }

    #[test]
    fn every_entry_is_kept_or_logged_once() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        std::fs::create_dir_all(&src).unwrap();
        let entries = vec![
            put(&src, "good", &[5; 25], 1.0),
            put(&src, "shrinks", &[5, 3, 3, 3, 3, 3, 3], 1.0),
            put(&src, "thin", &[2; 8], 1.0),
            put(&src, "short", &[5; 4], 1.0),
            ManifestEntry { clip_path: "missing.vpcl".into(), ..put(&src, "x", &[5; 8], 1.0) },
        ];
        let manifest = src.join("manifest.tsv");
        let out = curate(&entries, &manifest, &dir.path().join("out"), &PipelineConfig::default()).unwrap();
        let stages: Vec<_> = out.drops.iter().map(|d| (d.clip_path.as_str(), d.stage.as_str())).collect();
        assert_eq!(
            stages,
            vec![
                ("shrinks.vpcl", stage::MASK_VARIATION),
                ("thin.vpcl", stage::COVERAGE),
                ("short.vpcl", stage::SPLIT),
                ("missing.vpcl", stage::READ),
            ]
        );
        assert_eq!(out.entries.len(), 2);
        assert_eq!(out.entries[0].provenance, "src=good.vpcl;frames=0-10;from=test");
        assert_eq!(out.entries[1].provenance, "src=good.vpcl;frames=10-20;from=test");
        assert!(dir.path().join("out").join(&out.entries[1].mask_path).exists());
    }

    #[test]
    fn empty_manifest_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        let out = curate(&[], &m, &dir.path().join("o"), &PipelineConfig::default()).unwrap();
        assert_eq!(out, CurateOutput::default());

        let entries = vec![put(dir.path(), "a", &[4; 12], 1.0), put(dir.path(), "b", &[6; 7], 1.0)];
        let run = |o: &str| {
            let r = curate(&entries, &m, &dir.path().join(o), &PipelineConfig::default()).unwrap();
            format_manifest(&r.entries).unwrap()
        };
        assert_eq!(run("o1"), run("o2"));
    }

    #[test]
    fn selection_rejections_are_logged() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![put(dir.path(), "still", &[5; 8], 1.0)];
        let cfg = PipelineConfig {
            selection: SelectionThresholds { min_motion: 0.01, ..Default::default() },
            ..PipelineConfig::default()
        };
        let out = curate(&entries, &dir.path().join("m.tsv"), &dir.path().join("o"), &cfg).unwrap();
        assert!(out.entries.is_empty());
        assert_eq!(out.drops[0].stage, stage::SELECTION);
    }
}
