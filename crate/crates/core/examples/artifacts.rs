//! On-disk formats: the binary clip container, checkpoints and the TOML
//! run configuration.
//!
//! Writes each artifact to a temporary directory, reads it back, and shows
//! that the roundtrip is exact and that corruption is detected.

use dualpaint::checkpoint;
use dualpaint::config::RunConfig;
use dualpaint::container::{self, video_container, Container};
use dualpaint::data::synth::{synthetic_corpus, SceneRanges};
use dualpaint::model::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let clip = synthetic_corpus(5, 1, 6, 16, 16, 8.0, &SceneRanges::default())?.remove(0);

    let bytes = video_container(&clip.video).to_bytes()?;
    println!("video container: {} bytes, header {:02x?}", bytes.len(), &bytes[..12]);
    let path = dir.path().join("clip.vpcl");
    container::write_video(&path, &clip.video)?;
    println!("video roundtrip exact: {}", container::read_video(&path)? == clip.video);
    let mut bad = bytes.clone();
    bad[40] ^= 1;
    println!("flipped payload bit: {}", Container::from_bytes(&bad).unwrap_err());

    let (model, store) = Model::new::<f32>(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let ck = dir.path().join("model.ckpt");
    checkpoint::save(&ck, &model, &store, 1)?;
    let (_, loaded, stage) = checkpoint::load(&ck)?;
    println!(
        "checkpoint: {} bytes, stage {stage}, parameters identical: {}",
        std::fs::metadata(&ck)?.len(),
        loaded == store
    );

    let cfg = RunConfig::from_toml("[sample]\nsteps = 25\n\n[long]\noverlap = 2\n")?;
    cfg.validate()?;
    let resolved = cfg.to_toml()?;
    println!("resolved config ({} lines) reparses identically: {}", resolved.lines().count(), RunConfig::from_toml(&resolved)? == cfg);
    println!("unknown key: {}", RunConfig::from_toml("[train]\nlearning_rate = 1\n").unwrap_err());
    Ok(())
}
