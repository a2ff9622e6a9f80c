//! Generates a synthetic corpus on disk, then runs the curation pipeline
//! (mask-variation filter, coverage filter, scene splitting, fixed-length
//! clipping, selection scores) and prints the drop log.
//!
//! ```text
//! cargo run -p dualpaint --example data_pipeline -- [out_dir]
//! ```

use std::path::PathBuf;

use dualpaint::config::SynthConfig;
use dualpaint::data::curate::{curate, PipelineConfig};
use dualpaint::data::manifest::read_manifest;
use dualpaint::experiment::generate_corpus;

fn main() -> anyhow::Result<()> {
    let tmp;
    let out: PathBuf = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let synth = SynthConfig { frames: 96, height: 32, width: 32, scene_cut_prob: 0.5, ..Default::default() };
    let raw = generate_corpus(&out.join("raw"), 11, 8, &synth)?;
    println!("generated {} clips of {} frames at {} fps", raw.len(), synth.frames, synth.fps);

    let manifest = out.join("raw/manifest.tsv");
    let cfg = PipelineConfig::default();
    let result = curate(&read_manifest(&manifest)?, &manifest, &out.join("curated"), &cfg)?;
    println!("kept {} clips:", result.entries.len());
    for e in &result.entries {
        println!("  {}  caption {}  [{}]", e.clip_path, e.caption_id, e.provenance);
    }
    println!("dropped {} units:", result.drops.len());
    for d in &result.drops {
        println!("  {:<22} {:<15} {}", d.clip_path, d.stage, d.reason);
    }
    Ok(())
}
