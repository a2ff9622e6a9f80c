//! Any-length inpainting: a 4-window video of a constant-color object is
//! inpainted clip by clip, with and without identity resampling, and the
//! color drift of the filled region between windows is compared.
//!
//! ```text
//! cargo run --release -p dualpaint --example long_video -- [train_steps]
//! ```

use dualpaint::codec::{make_masked_video, Codec};
use dualpaint::data::synth::{generate_synthetic, random_spec, synthetic_corpus, SceneRanges};
use dualpaint::diffusion::{NoiseSchedule, Sampler};
use dualpaint::longvideo::{plan_clips, run_long_inpaint, LongConfig, MeanColorFill};
use dualpaint::metrics::id_drift;
use dualpaint::model::{Model, ModelConfig};
use dualpaint::train::{Example, Stage, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(40);
    let codec = Codec::default();
    let examples: Vec<Example> = synthetic_corpus(5, 12, 4, 16, 16, 8.0, &SceneRanges::default())?
        .into_iter()
        .map(|c| Example::new(&codec, c.video, c.mask, c.caption.0))
        .collect::<Result<_, _>>()?;
    let (model, mut store) = Model::new::<f32>(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(2))?;
    let tc = TrainConfig { pretrain_steps: steps, stage1_steps: steps, stage2_steps: steps / 2, eval_every: 0, ..Default::default() };
    let trainer = Trainer::new(&model, &codec, tc)?;
    for stage in [Stage::Pretrain, Stage::Context, Stage::Identity] {
        trainer.run_stage(&mut store, &examples, stage, 1, |_| {})?;
    }

    let schedule = NoiseSchedule::cosine(100)?;
    let sampler = Sampler { model: &model, store: &store, codec: &codec, schedule: &schedule };
    let (frames, clip_len, overlap) = (13, 4, 1);
    let plan = plan_clips(frames, clip_len, overlap)?;
    println!("windows: {:?}", plan.windows);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = random_spec(&mut rng, frames, 16, 16, &SceneRanges::default())?;
    let (video, mask, caption) = generate_synthetic(&spec, frames, 16, 16, 8.0)?;
    let masked = make_masked_video(&video, &mask)?;
    for resample in [false, true] {
        let cfg = LongConfig { clip_len, overlap: Some(overlap), resample, steps: 10, ..Default::default() };
        let (out, trace) = run_long_inpaint(&sampler, &masked, &mask, caption.0, &MeanColorFill, &cfg, 4)?;
        let used: Vec<usize> = trace.clips.iter().map(|c| c.cache_tokens_used).collect();
        println!(
            "resample={resample:<5}  id_drift {:.4}  identity tokens per clip {:?}",
            id_drift(&out, &mask, &plan)?,
            used
        );
    }
    Ok(())
}
