//! Command-line interface. Every command returns a [`Result`]; [`exit_code`]
//! maps failures onto the stable codes 2 (usage), 3 (data) and 4 (missing
//! artifact).

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::codec::{make_masked_video, Codec};
use crate::config::{echo_run, RunConfig};
use crate::container;
use crate::data::curate::curate;
use crate::data::manifest::{format_drops, read_manifest, write_manifest};
use crate::diffusion::{NoiseSchedule, SampleOptions, Sampler};
use crate::error::{Error, Result};
use crate::experiment::{ablation_suite, generate_corpus, load_examples, run_ablation, train_stages};
use crate::longvideo::{inpaint_clip, run_long_inpaint, BlendSpace, LongConfig, MeanColorFill};
use crate::metrics::{region_report, write_csv, Region};
use crate::model::Model;
use crate::params::ParamStore;
use crate::train::{write_loss_csv, Stage};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dualpaint", version, about = "Toy dual-branch video inpainting")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "VP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and its manifest.
    GenerateData {
        /// Seed for scene layouts (objects, motion, backgrounds).
        #[arg(long, default_value_t = 0)]
        spec_seed: u64,
        /// Number of clips.
        #[arg(long)]
        count: usize,
        /// Output directory; receives clips, masks and `manifest.tsv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter and split a manifest into curated clips.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; receives kept clips, `manifest.tsv` and `drops.tsv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one or more stages; checkpoints go to `--out`.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Checkpoint directory; also receives `loss.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Inpaint a single clip.
    Inpaint(InpaintArgs),
    /// Inpaint a video of any length clip by clip.
    LongInpaint {
        #[command(flatten)]
        io: InpaintArgs,
        /// Frames per clip window.
        #[arg(long)]
        clip_len: Option<usize>,
        /// Frames shared by consecutive windows.
        #[arg(long)]
        overlap: Option<usize>,
        /// Do not attend to the previous clip's identity tokens.
        #[arg(long)]
        no_resample: bool,
        /// Cross-fade overlaps on decoded frames or on latents.
        #[arg(long, value_enum)]
        blend_space: Option<BlendSpaceArg>,
        /// Write per-clip results, caches and a trace here.
        #[arg(long)]
        debug_dir: Option<PathBuf>,
    },
    /// Inpaint with a substituted caption.
    Edit {
        #[command(flatten)]
        io: InpaintArgs,
        /// Caption the masked region is regenerated under.
        #[arg(long)]
        target_caption_id: usize,
    },
    /// Score a generated clip against a reference.
    Eval {
        /// Generated clip.
        #[arg(long)]
        gen: PathBuf,
        /// Ground-truth clip.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
        /// Pixels the metrics are computed over.
        #[arg(long, value_enum, default_value_t = RegionArg::Unmasked)]
        region: RegionArg,
    },
    /// Train and score the ablation grid.
    Ablate {
        /// Variant set: `quick`, `encoder` or `full`.
        #[arg(long, default_value = "quick")]
        suite: String,
        /// Training clips.
        #[arg(long)]
        manifest: PathBuf,
        /// Clips each variant is scored on.
        #[arg(long)]
        eval_manifest: PathBuf,
        /// Output directory; receives `ablation.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = RegionArg::Masked)]
        region: RegionArg,
    },
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    /// Input clip container.
    #[arg(long)]
    pub video: PathBuf,
    /// Mask container; nonzero pixels are regenerated.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub caption_id: usize,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sampling steps (defaults to `sample.steps`).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Re-impose the known region after every sampling step.
    #[arg(long)]
    pub blend: bool,
    /// Output clip container.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "0")]
    Pretrain,
    #[value(name = "1")]
    Context,
    #[value(name = "2")]
    Identity,
    /// Stages 1 and 2.
    Both,
    /// Stages 0, 1 and 2.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegionArg {
    Unmasked,
    Masked,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BlendSpaceArg {
    Pixel,
    Latent,
}

impl From<BlendSpaceArg> for BlendSpace {
    fn from(b: BlendSpaceArg) -> Self {
        match b {
            BlendSpaceArg::Pixel => BlendSpace::Pixel,
            BlendSpaceArg::Latent => BlendSpace::Latent,
        }
    }
}

impl From<RegionArg> for Region {
    fn from(r: RegionArg) -> Self {
        match r {
            RegionArg::Unmasked => Region::Unmasked,
            RegionArg::Masked => Region::Masked,
            RegionArg::Full => Region::Full,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) => EXIT_USAGE,
        Error::Missing(_) => EXIT_MISSING,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        _ => EXIT_DATA,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        None => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    let seed = cli.seed;
    match cli.command {
        Command::GenerateData { spec_seed, count, out } => {
            generate_corpus(&out, spec_seed, count, &cfg.pipeline.synth)?;
            echo_run(&out, &cfg, seed)
        }
        Command::Curate { manifest, out } => {
            let entries = read_manifest(&manifest)?;
            let result = curate(&entries, &manifest, &out, &cfg.pipeline.curate)?;
            write_manifest(&out.join("manifest.tsv"), &result.entries)?;
            write_text(&out.join("drops.tsv"), &format_drops(&result.drops)?)?;
            echo_run(&out, &cfg, seed)
        }
        Command::Train { manifest, stage, out } => cmd_train(&cfg, &manifest, stage, &out, seed),
        Command::Inpaint(a) => cmd_inpaint(&cfg, &a, a.caption_id, seed),
        Command::Edit { io, target_caption_id } => cmd_inpaint(&cfg, &io, target_caption_id, seed),
        Command::LongInpaint {
            io,
            clip_len,
            overlap,
            no_resample,
            blend_space,
            debug_dir,
        } => {
            let long = LongConfig {
                clip_len: clip_len.unwrap_or(cfg.long.clip_len),
                overlap: overlap.or(cfg.long.overlap),
                resample: cfg.long.resample && !no_resample,
                steps: io.steps.unwrap_or(cfg.long.steps),
                blend_known_region: io.blend || cfg.long.blend_known_region,
                blend_space: blend_space.map_or(cfg.long.blend_space, Into::into),
            };
            cmd_long(&cfg, &io, &long, debug_dir.as_deref(), seed)
        }
        Command::Eval {
            gen,
            reference,
            mask,
            out,
            region,
        } => {
            let g = container::read_video(&gen)?;
            let r = container::read_video(&reference)?;
            let m = container::read_mask(&mask)?;
            let report = region_report(&g, &r, &m, region.into())?;
            let name = gen.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            create_parent(&out)?;
            let mut w = BufWriter::new(File::create(&out).map_err(|e| Error::io(&out, e))?);
            write_csv(&mut w, &[(name, report)]).map_err(|e| Error::io(&out, e))
        }
        Command::Ablate {
            suite,
            manifest,
            eval_manifest,
            out,
            region,
        } => {
            let variants = ablation_suite(&suite, &cfg.model)?;
            let codec = Codec::new(cfg.model.codec_factor, cfg.model.backbone.latent_channels)?;
            let frames = cfg.pipeline.train_clip_frames.unwrap_or(cfg.long.clip_len);
            let train = load_examples(&manifest, &codec, frames)?;
            let eval = load_examples(&eval_manifest, &codec, frames)?;
            let rows = run_ablation(&variants, &cfg, &train, &eval, region.into(), seed)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join("ablation.csv");
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            write_csv(&mut w, &rows).map_err(|e| Error::io(&path, e))?;
            drop(w);
            echo_run(&out, &cfg, seed)
        }
    }
}

fn cmd_train(cfg: &RunConfig, manifest: &Path, stage: StageArg, out: &Path, seed: u64) -> Result<()> {
    let stages: &[Stage] = match stage {
        StageArg::Pretrain => &[Stage::Pretrain],
        StageArg::Context => &[Stage::Context],
        StageArg::Identity => &[Stage::Identity],
        StageArg::Both => &[Stage::Context, Stage::Identity],
        StageArg::All => &[Stage::Pretrain, Stage::Context, Stage::Identity],
    };
    let (model, mut store) = if stages[0] == Stage::Pretrain {
        Model::new::<f32>(&cfg.model, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed))?
    } else {
        let prev = stages[0].number() - 1;
        let path = out.join(format!("stage{prev}.ckpt"));
        let (m, s, saved) = checkpoint::load(&path).map_err(|e| match e {
            Error::Missing(_) => Error::Missing(format!(
                "stage {} needs the stage-{prev} checkpoint {}; run that stage first",
                stages[0].number(),
                path.display()
            )),
            other => other,
        })?;
        if saved != prev {
            return Err(Error::Data(format!("{} holds stage {saved}, expected {prev}", path.display())));
        }
        (m, s)
    };
    eprintln!(
        "context encoder: {:.1}% of backbone parameters",
        100.0 * model.encoder_param_ratio(&store)
    );
    let codec = Codec::new(model.cfg.codec_factor, model.cfg.backbone.latent_channels)?;
    let frames = cfg.pipeline.train_clip_frames.unwrap_or(cfg.long.clip_len);
    let examples = load_examples(manifest, &codec, frames)?;
    echo_run(out, cfg, seed)?;
    let mut records = Vec::new();
    for &s in stages {
        let reports = train_stages(&model, &mut store, &examples, cfg, &[s], seed, |r| records.push(*r))?;
        let r = &reports[0];
        eprintln!(
            "stage {}: {} steps, probe loss {:.5} -> {:.5}",
            s.number(),
            r.steps_run,
            r.initial_probe,
            r.final_probe
        );
        checkpoint::save(&out.join(format!("stage{}.ckpt", s.number())), &model, &store, s.number())?;
    }
    let path = out.join("loss.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    write_loss_csv(&mut w, &records).map_err(|e| Error::io(&path, e))
}

struct Loaded {
    model: Model,
    store: ParamStore<f32>,
    codec: Codec,
    schedule: NoiseSchedule,
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Loaded> {
    let (model, store, _) = checkpoint::load(path)?;
    let codec = Codec::new(model.cfg.codec_factor, model.cfg.backbone.latent_channels)?;
    Ok(Loaded {
        model,
        store,
        codec,
        schedule: NoiseSchedule::cosine(cfg.train.diffusion_steps)?,
    })
}

fn read_inputs(a: &InpaintArgs) -> Result<(crate::video::VideoClip, crate::video::MaskClip)> {
    let v = container::read_video(&a.video)?;
    let m = container::read_mask(&a.mask)?;
    m.check_aligned(&v)?;
    Ok((make_masked_video(&v, &m)?, m))
}

fn cmd_inpaint(cfg: &RunConfig, a: &InpaintArgs, caption_id: usize, seed: u64) -> Result<()> {
    let (video, mask) = read_inputs(a)?;
    let l = load_model(cfg, &a.checkpoint)?;
    let sampler = Sampler {
        model: &l.model,
        store: &l.store,
        codec: &l.codec,
        schedule: &l.schedule,
    };
    let opts = SampleOptions {
        steps: a.steps.unwrap_or(cfg.sample.steps),
        blend_known_region: a.blend || cfg.sample.blend_known_region,
        id_cache: None,
        seed,
    };
    let out = inpaint_clip(&sampler, &video, &mask, caption_id, &MeanColorFill, &opts)?;
    create_parent(&a.out)?;
    container::write_video(&a.out, &out.video)
}

fn cmd_long(cfg: &RunConfig, a: &InpaintArgs, long: &LongConfig, debug: Option<&Path>, seed: u64) -> Result<()> {
    let (video, mask) = read_inputs(a)?;
    let l = load_model(cfg, &a.checkpoint)?;
    let sampler = Sampler {
        model: &l.model,
        store: &l.store,
        codec: &l.codec,
        schedule: &l.schedule,
    };
    let (out, trace) = run_long_inpaint(&sampler, &video, &mask, a.caption_id, &MeanColorFill, long, seed)?;
    create_parent(&a.out)?;
    container::write_video(&a.out, &out)?;
    if let Some(dir) = debug {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = String::from("clip\tstart\tend\tseed\tcache_tokens_used\tcache_tokens_extracted\n");
        for (k, c) in trace.clips.iter().enumerate() {
            text += &format!(
                "{k}\t{}\t{}\t{}\t{}\t{}\n",
                c.window.0, c.window.1, c.seed, c.cache_tokens_used, c.cache_tokens_extracted
            );
            container::write_video(&dir.join(format!("clip_{k:03}.vpcl")), &trace.clip_results[k])?;
        }
        for c in &trace.caches {
            container::write(&dir.join(format!("idcache_{:03}.vpcl", c.clip_id)), &container::idcache_container(c))?;
        }
        write_text(&dir.join("trace.tsv"), &text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Invalid("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Missing("x".into())), EXIT_MISSING);
        assert_eq!(exit_code(&Error::io("a", std::io::Error::from(std::io::ErrorKind::NotFound))), EXIT_MISSING);
        assert_eq!(exit_code(&Error::io("a", std::io::Error::from(std::io::ErrorKind::PermissionDenied))), EXIT_DATA);
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_DATA);
    }

    #[test]
    fn parses_global_flags_after_the_subcommand() {
        let cli = Cli::try_parse_from(["dualpaint", "train", "--manifest", "m.tsv", "--stage", "both", "--out", "o", "--seed", "9"]).unwrap();
        assert_eq!(cli.seed, 9);
        match cli.command {
            Command::Train { stage, .. } => assert_eq!(stage, StageArg::Both),
            other => panic!("parsed {other:?}"),
        }
        let cli = Cli::try_parse_from(["dualpaint", "eval", "--gen", "g", "--ref", "r", "--mask", "m", "--out", "o"]).unwrap();
        assert!(matches!(cli.command, Command::Eval { region: RegionArg::Unmasked, .. }));
        assert!(Cli::try_parse_from(["dualpaint", "train", "--stage", "3"]).is_err());
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[long]\nclip_len = 4\noverlap = 4\n").unwrap();
        let cli = Cli::try_parse_from(["dualpaint", "--config", p.to_str().unwrap(), "curate", "--manifest", "m", "--out", "o"]).unwrap();
        assert_eq!(exit_code(&run(cli).unwrap_err()), EXIT_USAGE);
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        crate::container::write_video(&d.join("v.vpcl"), &crate::testutil::video(4, 8, 8, 1)).unwrap();
        crate::container::write_mask(&d.join("m.vpcl"), &crate::testutil::mask(4, 8, 8, 0.3, 1), 8.0).unwrap();
        let args = ["dualpaint", "inpaint", "--video", "v.vpcl", "--mask", "m.vpcl", "--checkpoint", "none.ckpt", "--out", "o.vpcl"];
        let args: Vec<String> = args.iter().map(|a| if a.contains('.') { d.join(a).display().to_string() } else { a.to_string() }).collect();
        let err = run(Cli::try_parse_from(args).unwrap()).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_MISSING);
    }
}
