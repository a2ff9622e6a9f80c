//! Staged training: backbone pretraining, context encoder, identity adapters.

use std::io::Write;

use dualpaint_autograd::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{patch_rows, Conditioning, Mode};
use crate::codec::{make_masked_video, Codec};
use crate::diffusion::{augment_mask, gaussian_latent, latent_mask, scaled_kernel_range, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{ForwardInputs, IdSource, Model};
use crate::optim::{self, clip_grad_norm, OptimizerKind};
use crate::params::{Binder, Group, ParamStore};
use crate::video::{LatentClip, MaskClip, VideoClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Backbone learns the clip distribution (stands in for a pretrained model).
    Pretrain,
    /// Context encoder with the backbone frozen.
    Context,
    /// Identity adapters with everything else frozen.
    Identity,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Context => 1,
            Stage::Identity => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            0 => Ok(Stage::Pretrain),
            1 => Ok(Stage::Context),
            2 => Ok(Stage::Identity),
            _ => Err(Error::Invalid(format!("unknown stage {n}"))),
        }
    }

    pub fn trainable(self) -> Group {
        match self {
            Stage::Pretrain => Group::Backbone,
            Stage::Context => Group::Encoder,
            Stage::Identity => Group::Adapter,
        }
    }
}

/// Where stage-2 identity tokens come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdTokenSource {
    /// Masked-region keys/values of a timestep-0 pass on the clean latent.
    Clean,
    /// Masked-region keys/values of the same noisy forward pass.
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub pretrain_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Morphology kernel edges at 480-pixel height; scaled to the clip height.
    pub kernel_range: (usize, usize),
    pub grad_clip: f64,
    pub diffusion_steps: usize,
    pub id_tokens: IdTokenSource,
    /// Evaluate the fixed probe loss every this many steps (0 disables).
    pub eval_every: usize,
    pub eval_items: usize,
    /// Stop a stage early once the probe loss falls below this fraction of its initial value.
    pub early_stop_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: OptimizerKind::AdamW,
            pretrain_steps: 2000,
            stage1_steps: 2000,
            stage2_steps: 200,
            kernel_range: (8, 32),
            grad_clip: 1.0,
            diffusion_steps: 100,
            id_tokens: IdTokenSource::Clean,
            eval_every: 100,
            eval_items: 8,
            early_stop_ratio: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr and grad_clip must be positive".into()));
        }
        if self.kernel_range.0 == 0 || self.kernel_range.0 > self.kernel_range.1 {
            return Err(Error::Config(format!("kernel range {:?} is empty", self.kernel_range)));
        }
        Ok(())
    }

    pub fn steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pretrain => self.pretrain_steps,
            Stage::Context => self.stage1_steps,
            Stage::Identity => self.stage2_steps,
        }
    }
}

/// One training clip with its clean latent precomputed.
#[derive(Debug, Clone)]
pub struct Example {
    pub video: VideoClip,
    pub mask: MaskClip,
    pub caption_id: usize,
    pub latent: LatentClip,
}

impl Example {
    pub fn new(codec: &Codec, video: VideoClip, mask: MaskClip, caption_id: usize) -> Result<Self> {
        mask.check_aligned(&video)?;
        let latent = codec.encode(&video)?;
        Ok(Self {
            video,
            mask,
            caption_id,
            latent,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub steps_run: usize,
    /// Probe loss before the first update.
    pub initial_probe: f64,
    pub final_probe: f64,
    pub curve: Vec<LossRecord>,
    pub probes: Vec<LossRecord>,
}

/// Fully specified draw for one loss evaluation.
struct Draw<'a> {
    ex: &'a Example,
    mask: MaskClip,
    t: usize,
    eps: LatentClip,
}

pub struct Trainer<'a> {
    pub model: &'a Model,
    pub codec: &'a Codec,
    pub schedule: NoiseSchedule,
    pub cfg: TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, codec: &'a Codec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            codec,
            schedule: NoiseSchedule::cosine(cfg.diffusion_steps)?,
            cfg,
        })
    }

    fn draw<'e>(&self, examples: &'e [Example], rng: &mut impl Rng, augment: bool) -> Draw<'e> {
        let ex = &examples[rng.random_range(0..examples.len())];
        let t = rng.random_range(1..=self.schedule.steps());
        let eps = gaussian_latent(ex.latent.dims(), rng);
        let mask = if augment {
            augment_mask(&ex.mask, scaled_kernel_range(self.cfg.kernel_range, ex.mask.height()), rng)
        } else {
            ex.mask.clone()
        };
        Draw { ex, mask, t, eps }
    }

    /// ε-prediction MSE of one draw, recorded on `b`'s tape.
    fn loss<'t>(&self, b: &Binder<'t, f32>, stage: Stage, d: &Draw<'_>) -> Result<Var<'t, f32>> {
        let model = self.model;
        let z_t = self.schedule.add_noise(&d.ex.latent, d.t, &d.eps)?;
        let first = d.ex.latent.slice(0, 1);
        let cond = Conditioning {
            timestep: d.t,
            caption_id: d.ex.caption_id,
            first_frame: (model.backbone.cfg.mode == Mode::I2V).then_some(&first),
        };
        let (target, _) = patch_rows::<f32>(&d.eps, model.backbone.cfg.patch)?;
        let target = b.tape().constant_owned(target);
        let pred = if stage == Stage::Pretrain {
            model.backbone.predict(b, &z_t, &cond)?
        } else {
            let mut mask = d.mask.clone();
            if model.backbone.cfg.mode == Mode::I2V {
                mask.clear_frame(0);
            }
            let z0_masked = self.codec.encode(&make_masked_video(&d.ex.video, &mask)?)?;
            let m_res = latent_mask(self.codec, &mask)?;
            let cache;
            let id = match (stage, self.cfg.id_tokens) {
                (Stage::Identity, IdTokenSource::Noisy) => IdSource::Current,
                (Stage::Identity, IdTokenSource::Clean) => {
                    cache = model.cache_from_clip(
                        b.store(),
                        &d.ex.latent,
                        &z0_masked,
                        &m_res,
                        d.ex.caption_id,
                        cond.first_frame,
                        0,
                    )?;
                    IdSource::Cache(&cache)
                }
                _ => IdSource::None,
            };
            let inputs = ForwardInputs {
                z_t: &z_t,
                z0_masked: &z0_masked,
                m_resized: &m_res,
                cond,
                id,
            };
            model.injected_forward(b, &inputs, None)?
        };
        Ok(pred.mse(target)?)
    }

    /// Mean loss over a fixed, seed-determined probe set (no augmentation).
    pub fn probe_loss(&self, store: &ParamStore<f32>, examples: &[Example], stage: Stage, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.cfg.eval_items.max(1);
        let mut total = 0.0;
        for _ in 0..n {
            let d = self.draw(examples, &mut rng, false);
            let tape = Tape::new();
            let b = Binder::frozen(&tape, store);
            total += self.loss(&b, stage, &d)?.item() as f64;
        }
        Ok(total / n as f64)
    }

    /// One optimizer update; returns the loss before the update.
    fn step(
        &self,
        store: &mut ParamStore<f32>,
        opt: &mut dyn optim::Optimizer,
        stage: Stage,
        d: &Draw<'_>,
    ) -> Result<f64> {
        let trainable = stage.trainable();
        let (loss, mut grads) = {
            let tape = Tape::new();
            let b = Binder::new(&tape, store, &[trainable]);
            let loss = self.loss(&b, stage, d)?;
            tape.backward(loss)?;
            let grads = b.gradients();
            if let Some((id, _)) = grads.iter().find(|(id, _)| store.get(*id).group != trainable) {
                return Err(Error::Unfrozen(store.get(*id).name.clone()));
            }
            (loss.item() as f64, grads)
        };
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        opt.step(store, &grads);
        Ok(loss)
    }

    /// Trains one stage. Parameters outside the stage's group are verified
    /// bit-identical afterwards. Stage 1 first seeds the encoder blocks with
    /// the current backbone blocks.
    pub fn run_stage(
        &self,
        store: &mut ParamStore<f32>,
        examples: &[Example],
        stage: Stage,
        seed: u64,
        mut on_record: impl FnMut(&LossRecord),
    ) -> Result<StageReport> {
        if examples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if stage == Stage::Context {
            self.model.encoder.copy_backbone_blocks(store, &self.model.backbone);
        }
        let frozen: Vec<_> = [Group::Backbone, Group::Encoder, Group::Adapter]
            .into_iter()
            .filter(|g| *g != stage.trainable())
            .map(|g| (g, store.snapshot(g)))
            .collect();
        let probe_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
        let mut report = StageReport {
            initial_probe: self.probe_loss(store, examples, stage, probe_seed)?,
            ..Default::default()
        };
        report.final_probe = report.initial_probe;
        let mut opt = optim::build(self.cfg.optimizer, self.cfg.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stage.number() as u64);
        let steps = self.cfg.steps(stage);
        for step in 1..=steps {
            let d = self.draw(examples, &mut rng, stage != Stage::Pretrain);
            let loss = self.step(store, opt.as_mut(), stage, &d)?;
            let rec = LossRecord { step, stage, loss };
            on_record(&rec);
            report.curve.push(rec);
            report.steps_run = step;
            if self.cfg.eval_every > 0 && (step % self.cfg.eval_every == 0 || step == steps) {
                report.final_probe = self.probe_loss(store, examples, stage, probe_seed)?;
                report.probes.push(LossRecord {
                    step,
                    stage,
                    loss: report.final_probe,
                });
                if let Some(r) = self.cfg.early_stop_ratio {
                    if report.final_probe < r * report.initial_probe {
                        break;
                    }
                }
            }
        }
        if self.cfg.eval_every == 0 {
            report.final_probe = self.probe_loss(store, examples, stage, probe_seed)?;
        }
        for (g, before) in frozen {
            if store.snapshot(g) != before {
                return Err(Error::Unfrozen(format!("{g:?} group changed during {stage:?}")));
            }
        }
        Ok(report)
    }
}

/// Writes `step,stage,loss` rows.
pub fn write_loss_csv(w: &mut impl Write, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "step,stage,loss")?;
    for r in records {
        writeln!(w, "{},{},{:.8}", r.step, r.stage.number(), r.loss)?;
    }
    Ok(())
}
