use dualpaint::backbone::BackboneConfig;
use dualpaint::checkpoint;
use dualpaint::codec::Codec;
use dualpaint::data::synth::{synthetic_corpus, SceneRanges};
use dualpaint::model::{Model, ModelConfig};
use dualpaint::params::ParamStore;
use dualpaint::train::{Example, Stage, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            n_layers: 4,
            d_model: 24,
            n_heads: 2,
            mlp_ratio: 2,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn examples(codec: &Codec, count: usize, seed: u64) -> Vec<Example> {
    synthetic_corpus(seed, count, 4, 16, 16, 8.0, &SceneRanges::default())
        .unwrap()
        .into_iter()
        .map(|c| Example::new(codec, c.video, c.mask, c.caption.0).unwrap())
        .collect()
}

fn pretrained(cfg: &ModelConfig, ex: &[Example], steps: usize) -> (Model, ParamStore<f32>) {
    let codec = Codec::default();
    let (model, mut store) = Model::new::<f32>(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let tc = TrainConfig { pretrain_steps: steps, eval_every: 0, ..Default::default() };
    Trainer::new(&model, &codec, tc).unwrap().run_stage(&mut store, ex, Stage::Pretrain, 2, |_| {}).unwrap();
    (model, store)
}

#[test]
fn checkpoint_reload_reproduces_probe_loss() {
    let codec = Codec::default();
    let ex = examples(&codec, 3, 4);
    let (model, mut store) = pretrained(&small_model(), &ex, 30);
    let tc = TrainConfig { stage1_steps: 10, eval_every: 0, eval_items: 4, ..Default::default() };
    let trainer = Trainer::new(&model, &codec, tc.clone()).unwrap();
    trainer.run_stage(&mut store, &ex, Stage::Context, 3, |_| {}).unwrap();
    let before = trainer.probe_loss(&store, &ex, Stage::Context, 77).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage1.ckpt");
    checkpoint::save(&path, &model, &store, 1).unwrap();
    let (m2, s2, stage) = checkpoint::load(&path).unwrap();
    assert_eq!(stage, 1);
    let after = Trainer::new(&m2, &codec, tc).unwrap().probe_loss(&s2, &ex, Stage::Context, 77).unwrap();
    assert!((before - after).abs() < 1e-6, "{before} vs {after}");
}

#[test]
fn context_and_identity_stages_reduce_loss_on_a_fixed_batch() {
    let codec = Codec::default();
    let ex = examples(&codec, 2, 5);
    let (model, mut store) = pretrained(&small_model(), &ex, 200);
    let tc = TrainConfig {
        stage1_steps: 200,
        stage2_steps: 200,
        eval_every: 0,
        eval_items: 16,
        ..Default::default()
    };
    let trainer = Trainer::new(&model, &codec, tc).unwrap();
    for stage in [Stage::Context, Stage::Identity] {
        let r = trainer.run_stage(&mut store, &ex, stage, 6, |_| {}).unwrap();
        assert!(r.final_probe < r.initial_probe, "{stage:?}: {} -> {}", r.initial_probe, r.final_probe);
    }
}

#[test]
fn stage_one_overfits_four_examples() {
    let codec = Codec::default();
    let ex = examples(&codec, 4, 8);
    let (model, mut store) = pretrained(&small_model(), &examples(&codec, 32, 9), 300);
    let tc = TrainConfig { stage1_steps: 2000, eval_every: 100, eval_items: 16, early_stop_ratio: None, ..Default::default() };
    let r = Trainer::new(&model, &codec, tc).unwrap().run_stage(&mut store, &ex, Stage::Context, 10, |_| {}).unwrap();
    let best = r.probes.iter().map(|p| p.loss).fold(r.initial_probe, f64::min);
    assert!(best < 0.9 * r.initial_probe, "probe {} -> best {best} after {} steps", r.initial_probe, r.steps_run);
}
