//! Glue shared by the command-line tool and the examples: corpus generation,
//! dataset loading, multi-stage training and the ablation grid.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Mode;
use crate::codec::{make_masked_video, Codec};
use crate::config::{RunConfig, SynthConfig};
use crate::container;
use crate::data::manifest::{read_manifest, resolve, ManifestEntry};
use crate::data::synth::{generate_synthetic, random_spec, SyntheticClip};
use crate::diffusion::{NoiseSchedule, Sampler};
use crate::error::{Error, Result};
use crate::longvideo::{run_long_inpaint, LongConfig, MeanColorFill};
use crate::metrics::{region_report, Region, RegionMetricReport};
use crate::model::{Model, ModelConfig};
use crate::params::{Group, ParamStore};
use crate::train::{Example, LossRecord, Stage, StageReport, Trainer};
use crate::video::{MaskClip, VideoClip};

/// Clip `i` of a seeded synthetic corpus; some clips join two scenes.
pub fn synth_clip(seed: u64, i: usize, cfg: &SynthConfig) -> Result<SyntheticClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let spec = random_spec(&mut rng, cfg.frames, cfg.height, cfg.width, &cfg.ranges)?;
    let (mut video, mut mask, caption) = generate_synthetic(&spec, cfg.frames, cfg.height, cfg.width, cfg.fps)?;
    if cfg.frames >= 2 && rng.random_bool(cfg.scene_cut_prob.clamp(0.0, 1.0)) {
        let cut = rng.random_range(1..cfg.frames);
        let other = random_spec(&mut rng, cfg.frames - cut, cfg.height, cfg.width, &cfg.ranges)?;
        let (v2, m2, _) = generate_synthetic(&other, cfg.frames - cut, cfg.height, cfg.width, cfg.fps)?;
        video = VideoClip::concat(&[video.slice(0, cut)?, v2])?;
        mask = MaskClip::concat(&[mask.slice(0, cut)?, m2])?;
    }
    Ok(SyntheticClip {
        spec,
        video,
        mask,
        caption,
    })
}

/// Writes `count` clips plus `manifest.tsv` into `out`.
pub fn generate_corpus(out: &Path, seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let c = synth_clip(seed, i, cfg)?;
        let clip = format!("clip_{i:05}.vpcl");
        let mask = format!("clip_{i:05}.mask.vpcl");
        container::write_video(&out.join(&clip), &c.video)?;
        container::write_mask(&out.join(&mask), &c.mask, cfg.fps)?;
        entries.push(ManifestEntry {
            clip_path: clip,
            mask_path: mask,
            caption_id: c.caption.0,
            fps: cfg.fps,
            provenance: format!("synthetic:seed={seed}:index={i}"),
        });
    }
    crate::data::manifest::write_manifest(&out.join("manifest.tsv"), &entries)?;
    Ok(entries)
}

/// Loads a manifest and cuts every clip into consecutive `frames`-frame
/// training windows (shorter remainders are skipped).
pub fn load_examples(manifest: &Path, codec: &Codec, frames: usize) -> Result<Vec<Example>> {
    let entries = read_manifest(manifest)?;
    let mut out = Vec::new();
    for e in &entries {
        let v = container::read_video(&resolve(manifest, &e.clip_path))?;
        let m = container::read_mask(&resolve(manifest, &e.mask_path))?;
        m.check_aligned(&v)?;
        let mut s = 0;
        while s + frames <= v.frames() {
            out.push(Example::new(codec, v.slice(s, s + frames)?, m.slice(s, s + frames)?, e.caption_id)?);
            s += frames;
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} yields no {frames}-frame training windows",
            manifest.display()
        )));
    }
    Ok(out)
}

/// Copies every parameter of `group` from `src` to the same-named parameter of `dst`.
pub fn transfer_group(src: &ParamStore<f32>, dst: &mut ParamStore<f32>, group: Group) -> Result<()> {
    for (_, p) in src.iter().filter(|(_, p)| p.group == group) {
        let id = dst
            .find(&p.name)
            .ok_or_else(|| Error::Invalid(format!("parameter {} missing in target model", p.name)))?;
        if dst.value(id).shape() != p.value.shape() {
            return Err(Error::Extent {
                what: "transferred parameter",
                lhs: dst.value(id).shape().to_vec(),
                rhs: p.value.shape().to_vec(),
            });
        }
        *dst.value_mut(id) = p.value.clone();
    }
    Ok(())
}

/// Runs `stages` in order, reporting every loss record to `on_record`.
pub fn train_stages(
    model: &Model,
    store: &mut ParamStore<f32>,
    examples: &[Example],
    cfg: &RunConfig,
    stages: &[Stage],
    seed: u64,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<Vec<StageReport>> {
    let codec = Codec::new(model.cfg.codec_factor, model.cfg.backbone.latent_channels)?;
    let trainer = Trainer::new(model, &codec, cfg.train.clone())?;
    stages
        .iter()
        .map(|&s| trainer.run_stage(store, examples, s, seed, &mut on_record))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub encoder_layers: usize,
    pub select_background: bool,
    pub resample: bool,
    pub mode: Mode,
}

/// Variants of a named suite: `full`, `encoder`, or `quick`.
pub fn ablation_suite(name: &str, base: &ModelConfig) -> Result<Vec<Variant>> {
    let v = |name: &str, k: usize, sel: bool, res: bool, mode: Mode| Variant {
        name: name.into(),
        encoder_layers: k,
        select_background: sel,
        resample: res,
        mode,
    };
    let m = base.backbone.mode;
    let other = if m == Mode::T2V { Mode::I2V } else { Mode::T2V };
    let depth = |k: usize| v(&format!("encoder_{k}"), k, true, true, m);
    Ok(match name {
        "full" => vec![
            v("base", 2, true, true, m),
            depth(1),
            depth(4),
            v("no_select", 2, false, true, m),
            v("no_resample", 2, true, false, m),
            v(&format!("{other:?}").to_lowercase(), 2, true, true, other),
        ],
        "encoder" => vec![depth(1), depth(2), depth(4)],
        "quick" => vec![v("base", 2, true, true, m), v("no_select", 2, false, true, m), v("no_resample", 2, true, false, m)],
        _ => return Err(Error::Invalid(format!("unknown ablation suite {name:?}"))),
    })
}

/// Trains each variant on `train` and scores long-video inpainting of
/// `eval` clips against ground truth. One row per variant.
pub fn run_ablation(
    variants: &[Variant],
    cfg: &RunConfig,
    train: &[Example],
    eval: &[Example],
    region: Region,
    seed: u64,
) -> Result<Vec<(String, RegionMetricReport)>> {
    let mut pretrained: Vec<(Mode, ParamStore<f32>)> = Vec::new();
    let mut trained: Vec<(String, Model, ParamStore<f32>)> = Vec::new();
    let mut rows = Vec::new();
    for var in variants {
        let mut mc = cfg.model.clone();
        mc.encoder.layers = var.encoder_layers;
        mc.select_background = var.select_background;
        mc.backbone.mode = var.mode;
        // Variants that differ only in inference settings share weights.
        let key = format!("{}:{}:{:?}", var.encoder_layers, var.select_background, var.mode);
        let (model, store) = if let Some((_, m, s)) = trained.iter().find(|(k, _, _)| *k == key) {
            (m.clone(), s.clone())
        } else {
            let (model, mut store) = Model::new::<f32>(&mc, &mut ChaCha8Rng::seed_from_u64(seed))?;
            match pretrained.iter().find(|(m, _)| *m == var.mode) {
                Some((_, s)) => transfer_group(s, &mut store, Group::Backbone)?,
                None => {
                    train_stages(&model, &mut store, train, cfg, &[Stage::Pretrain], seed, |_| {})?;
                    pretrained.push((var.mode, store.clone()));
                }
            }
            train_stages(&model, &mut store, train, cfg, &[Stage::Context, Stage::Identity], seed, |_| {})?;
            trained.push((key, model.clone(), store.clone()));
            (model, store)
        };
        let codec = Codec::new(mc.codec_factor, mc.backbone.latent_channels)?;
        let schedule = NoiseSchedule::cosine(cfg.train.diffusion_steps)?;
        let sampler = Sampler {
            model: &model,
            store: &store,
            codec: &codec,
            schedule: &schedule,
        };
        let long = LongConfig {
            resample: var.resample,
            ..cfg.long.clone()
        };
        let mut gens = Vec::new();
        let mut refs = Vec::new();
        let mut masks = Vec::new();
        for (i, ex) in eval.iter().enumerate() {
            let masked = make_masked_video(&ex.video, &ex.mask)?;
            let (out, _) = run_long_inpaint(&sampler, &masked, &ex.mask, ex.caption_id, &MeanColorFill, &long, seed + i as u64)?;
            gens.push(out);
            refs.push(ex.video.clone());
            masks.push(ex.mask.clone());
        }
        let report = region_report(
            &VideoClip::concat(&gens)?,
            &VideoClip::concat(&refs)?,
            &MaskClip::concat(&masks)?,
            region,
        )?;
        rows.push((var.name.clone(), report));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rng, tiny_examples, tiny_model};

    fn small_synth() -> SynthConfig {
        SynthConfig { frames: 6, height: 16, width: 16, ..Default::default() }
    }

    fn small_run() -> RunConfig {
        let mut cfg = RunConfig { model: tiny_model(), ..Default::default() };
        cfg.train.pretrain_steps = 2;
        cfg.train.stage1_steps = 2;
        cfg.train.stage2_steps = 1;
        cfg.train.eval_every = 0;
        cfg.train.eval_items = 2;
        cfg.long = LongConfig { clip_len: 4, overlap: Some(1), steps: 2, ..Default::default() };
        cfg
    }

    #[test]
    fn synth_clips_are_seeded_per_index() {
        let cfg = small_synth();
        assert_eq!(synth_clip(1, 3, &cfg).unwrap().video, synth_clip(1, 3, &cfg).unwrap().video);
        assert_ne!(synth_clip(1, 3, &cfg).unwrap().video, synth_clip(1, 4, &cfg).unwrap().video);
        let c = synth_clip(2, 0, &SynthConfig { scene_cut_prob: 1.0, ..cfg }).unwrap();
        assert_eq!(c.video.frames(), 6);
    }

    #[test]
    fn corpus_loads_back_as_windows() {
        let dir = tempfile::tempdir().unwrap();
        let entries = generate_corpus(dir.path(), 5, 3, &small_synth()).unwrap();
        assert_eq!(entries.len(), 3);
        let codec = Codec::default();
        let m = dir.path().join("manifest.tsv");
        assert_eq!(load_examples(&m, &codec, 3).unwrap().len(), 6);
        assert_eq!(load_examples(&m, &codec, 4).unwrap().len(), 3);
        assert!(load_examples(&m, &codec, 7).is_err());
    }

    #[test]
    fn transfer_copies_only_the_group() {
        let (_, a) = Model::new::<f32>(&tiny_model(), &mut rng(1)).unwrap();
        let (_, mut b) = Model::new::<f32>(&tiny_model(), &mut rng(2)).unwrap();
        let before = b.clone();
        transfer_group(&a, &mut b, Group::Backbone).unwrap();
        for ((_, pa), ((_, pb), (_, p0))) in a.iter().zip(b.iter().zip(before.iter())) {
            if pa.group == Group::Backbone {
                assert_eq!(pa.value, pb.value);
            } else {
                assert_eq!(pb.value, p0.value);
            }
        }
        let mut other = tiny_model();
        other.backbone.d_model = 8;
        other.backbone.n_heads = 2;
        let (_, mut c) = Model::new::<f32>(&other, &mut rng(2)).unwrap();
        assert!(transfer_group(&a, &mut c, Group::Backbone).is_err());
    }

    #[test]
    fn suites() {
        let base = ModelConfig::default();
        assert_eq!(ablation_suite("quick", &base).unwrap().len(), 3);
        assert_eq!(ablation_suite("encoder", &base).unwrap().iter().map(|v| v.encoder_layers).collect::<Vec<_>>(), vec![1, 2, 4]);
        let full = ablation_suite("full", &base).unwrap();
        assert_eq!(full.len(), 6);
        assert!(full.iter().any(|v| v.mode != base.backbone.mode));
        assert!(ablation_suite("huge", &base).is_err());
    }

    #[test]
    fn tiny_ablation_produces_one_row_per_variant() {
        let cfg = small_run();
        let codec = Codec::default();
        let train = tiny_examples(&codec, 2, 1);
        let eval = tiny_examples(&codec, 1, 2);
        let variants = ablation_suite("quick", &cfg.model).unwrap();
        let rows = run_ablation(&variants, &cfg, &train, &eval, Region::Masked, 3).unwrap();
        assert_eq!(rows.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(), vec!["base", "no_select", "no_resample"]);
        assert!(rows.iter().all(|(_, r)| r.mse.is_finite() && r.pixel_count > 0));
    }

    #[test]
    fn stages_run_in_order() {
        let cfg = small_run();
        let codec = Codec::default();
        let ex = tiny_examples(&codec, 2, 1);
        let (model, mut store) = Model::new::<f32>(&cfg.model, &mut rng(0)).unwrap();
        let mut seen = Vec::new();
        let reports = train_stages(&model, &mut store, &ex, &cfg, &[Stage::Pretrain, Stage::Context], 0, |r| seen.push(r.stage)).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(seen, vec![Stage::Pretrain, Stage::Pretrain, Stage::Context, Stage::Context]);
    }
}
