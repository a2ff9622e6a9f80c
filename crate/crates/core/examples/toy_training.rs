//! Three-stage training on synthetic clips: backbone pretraining, the context
//! encoder (backbone frozen), then the identity adapter (everything else
//! frozen). Prints probe losses and writes one checkpoint per stage.
//!
//! ```text
//! cargo run --release -p dualpaint --example toy_training -- [steps] [out_dir]
//! ```
//! `steps` applies to stages 0 and 1; stage 2 runs a tenth of it.

use std::path::PathBuf;

use dualpaint::checkpoint;
use dualpaint::codec::Codec;
use dualpaint::data::synth::{synthetic_corpus, SceneRanges};
use dualpaint::model::{Model, ModelConfig};
use dualpaint::train::{Example, Stage, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(60);
    let tmp;
    let out: PathBuf = match args.next() {
        Some(p) => p.into(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    std::fs::create_dir_all(&out)?;

    let codec = Codec::default();
    let examples: Vec<Example> = synthetic_corpus(7, 16, 4, 16, 16, 8.0, &SceneRanges::default())?
        .into_iter()
        .map(|c| Example::new(&codec, c.video, c.mask, c.caption.0))
        .collect::<Result<_, _>>()?;
    let (model, mut store) = Model::new::<f32>(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("context encoder share of backbone parameters: {:.1}%", 100.0 * model.encoder_param_ratio(&store));

    let cfg = TrainConfig {
        pretrain_steps: steps,
        stage1_steps: steps,
        stage2_steps: (steps / 10).max(1),
        eval_every: (steps / 4).max(1),
        ..Default::default()
    };
    let trainer = Trainer::new(&model, &codec, cfg)?;
    for stage in [Stage::Pretrain, Stage::Context, Stage::Identity] {
        let r = trainer.run_stage(&mut store, &examples, stage, 3, |_| {})?;
        let probes: Vec<String> = r.probes.iter().map(|p| format!("{}:{:.4}", p.step, p.loss)).collect();
        println!(
            "stage {} ({:?}): probe {:.4} -> {:.4}  [{}]",
            stage.number(),
            stage,
            r.initial_probe,
            r.final_probe,
            probes.join(" ")
        );
        let path = out.join(format!("stage{}.ckpt", stage.number()));
        checkpoint::save(&path, &model, &store, stage.number())?;
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}
