//! Runs an ablation suite (`quick`, `encoder` or `full`) on a small
//! synthetic corpus and prints masked-region metrics per variant.
//!
//! ```text
//! cargo run --release -p dualpaint --example ablation_grid -- [suite] [steps]
//! ```

use dualpaint::backbone::BackboneConfig;
use dualpaint::codec::Codec;
use dualpaint::config::RunConfig;
use dualpaint::data::synth::{synthetic_corpus, SceneRanges};
use dualpaint::experiment::{ablation_suite, run_ablation};
use dualpaint::metrics::{write_csv, Region};
use dualpaint::model::ModelConfig;
use dualpaint::train::Example;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let suite = args.next().unwrap_or_else(|| "quick".into());
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);

    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        backbone: BackboneConfig { n_layers: 4, d_model: 16, n_heads: 2, mlp_ratio: 2, ..Default::default() },
        ..Default::default()
    };
    cfg.train.pretrain_steps = steps;
    cfg.train.stage1_steps = steps;
    cfg.train.stage2_steps = steps / 2;
    cfg.train.eval_every = 0;
    cfg.long.clip_len = 4;
    cfg.long.overlap = Some(1);
    cfg.long.steps = 5;

    let codec = Codec::default();
    let load = |seed, n, frames| -> anyhow::Result<Vec<Example>> {
        Ok(synthetic_corpus(seed, n, frames, 32, 32, 8.0, &SceneRanges::default())?
            .into_iter()
            .map(|c| Example::new(&codec, c.video, c.mask, c.caption.0))
            .collect::<Result<_, _>>()?)
    };
    let train = load(1, 8, 4)?;
    let eval = load(2, 2, 10)?;

    let variants = ablation_suite(&suite, &cfg.model)?;
    println!("suite {suite}: {:?}", variants.iter().map(|v| v.name.as_str()).collect::<Vec<_>>());
    let rows = run_ablation(&variants, &cfg, &train, &eval, Region::Masked, 4)?;
    write_csv(&mut std::io::stdout(), &rows)?;
    Ok(())
}
