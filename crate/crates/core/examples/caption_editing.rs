//! Inpainting and caption-driven editing of one clip.
//!
//! The same masked clip is filled under different target captions; the
//! masked-region mean color shows how the caption steers the fill.
//!
//! ```text
//! cargo run --release -p dualpaint --example caption_editing -- [train_steps] [ppm_dir]
//! ```

use dualpaint::codec::{make_masked_video, Codec};
use dualpaint::container::export_ppm;
use dualpaint::data::synth::{color_index, synthetic_corpus, CaptionId, SceneRanges};
use dualpaint::diffusion::{NoiseSchedule, SampleOptions, Sampler};
use dualpaint::longvideo::{inpaint_clip, MeanColorFill};
use dualpaint::metrics::masked_mean_color;
use dualpaint::model::{Model, ModelConfig};
use dualpaint::train::{Example, Stage, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(40);
    let ppm_dir = args.next();
    let codec = Codec::default();
    let clips = synthetic_corpus(21, 16, 4, 16, 16, 8.0, &SceneRanges::default())?;
    let examples: Vec<Example> = clips
        .iter()
        .map(|c| Example::new(&codec, c.video.clone(), c.mask.clone(), c.caption.0))
        .collect::<Result<_, _>>()?;
    let (model, mut store) = Model::new::<f32>(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(3))?;
    let tc = TrainConfig { pretrain_steps: steps, stage1_steps: steps, eval_every: 0, ..Default::default() };
    let trainer = Trainer::new(&model, &codec, tc)?;
    trainer.run_stage(&mut store, &examples, Stage::Pretrain, 1, |_| {})?;
    trainer.run_stage(&mut store, &examples, Stage::Context, 1, |_| {})?;

    let schedule = NoiseSchedule::cosine(100)?;
    let sampler = Sampler { model: &model, store: &store, codec: &codec, schedule: &schedule };
    let clip = &clips[0];
    let masked = make_masked_video(&clip.video, &clip.mask)?;
    println!("source caption: {}", clip.caption.text()?);
    for name in ["red", "blue", "green"] {
        let Some(color) = color_index(name) else { continue };
        let target: CaptionId = clip.caption.with_color(color)?;
        let opts = SampleOptions { steps: 20, seed: 5, ..Default::default() };
        let out = inpaint_clip(&sampler, &masked, &clip.mask, target.0, &MeanColorFill, &opts)?;
        let mean = masked_mean_color(&out.video, &clip.mask, 0, out.video.frames())?;
        println!("  -> {:<24} masked mean rgb [{:.3}, {:.3}, {:.3}]", target.text()?, mean[0], mean[1], mean[2]);
        if let Some(dir) = &ppm_dir {
            export_ppm(std::path::Path::new(dir), name, &out.video)?;
        }
    }
    Ok(())
}
