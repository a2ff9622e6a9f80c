//! The assembled inpainting model: frozen backbone, context encoder with
//! group-wise selective injection, and identity-resampling adapters.

use dualpaint_autograd::{Scalar, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{rows_to_latent, Backbone, BackboneConfig, Conditioning, ForwardTrace, Hooks};
use crate::encoder::{group_for_layer_of, select_background, ContextEncoder, EncoderConfig, SelectionMask};
use crate::error::{Error, Result};
use crate::nn::KvExtra;
use crate::params::{Binder, Group, ParamStore};
use crate::resample::{AdapterConfig, IdAdapter, IdCache};
use crate::video::{LatentClip, SoftMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    /// Inject only pure-background tokens; off reproduces the "w/o Select" ablation.
    pub select_background: bool,
    /// Pixel-to-latent downsampling factor of the codec.
    pub codec_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            select_background: true,
            codec_factor: 2,
        }
    }
}

/// Where a forward pass takes its identity key/value tokens from.
#[derive(Debug, Clone, Copy)]
pub enum IdSource<'a> {
    None,
    /// Foreground tokens of the same forward pass (training).
    Current,
    /// Tokens recorded from a previous clip (inference).
    Cache(&'a IdCache),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardInputs<'a> {
    pub z_t: &'a LatentClip,
    pub z0_masked: &'a LatentClip,
    /// Mask at latent resolution.
    pub m_resized: &'a SoftMask,
    pub cond: Conditioning<'a>,
    pub id: IdSource<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub encoder: ContextEncoder,
    pub adapter: IdAdapter,
}

impl Model {
    /// Builds every sub-model. Parameters are created in a fixed order, so the
    /// same config always yields the same store layout.
    pub fn new<T: Scalar>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore<T>)> {
        if cfg.codec_factor == 0 {
            return Err(Error::Config("codec_factor must be positive".into()));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &cfg.backbone, rng)?;
        let encoder = ContextEncoder::new(&mut store, &backbone, &cfg.encoder, rng)?;
        let adapter = IdAdapter::new(&mut store, &backbone, &cfg.adapter, rng)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                encoder,
                adapter,
            },
            store,
        ))
    }

    /// Context-encoder parameters as a fraction of backbone parameters.
    pub fn encoder_param_ratio<T: Scalar>(&self, store: &ParamStore<T>) -> f64 {
        store.count(Group::Encoder) as f64 / store.count(Group::Backbone) as f64
    }

    pub fn n_layers(&self) -> usize {
        self.backbone.cfg.n_layers
    }

    /// Encoder group feeding backbone layer `i` (1-based).
    pub fn group_for_layer(&self, i: usize) -> Result<usize> {
        group_for_layer_of(i, self.n_layers(), self.encoder.blocks.len())
    }

    pub fn selection(&self, m_resized: &SoftMask) -> Result<SelectionMask> {
        SelectionMask::from_mask(m_resized, self.backbone.cfg.patch)
    }

    /// Zero-gated context features, one per encoder block.
    pub fn context_features<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        inputs: &ForwardInputs<'_>,
    ) -> Result<Vec<Var<'t, T>>> {
        let seq = self
            .encoder
            .build_context_input(b, inputs.z_t, inputs.z0_masked, inputs.m_resized)?;
        self.encoder
            .context_forward(b, &self.backbone, &seq, inputs.cond.timestep, inputs.cond.caption_id)
    }

    /// Per-layer injection tensors built from context features.
    pub fn assemble_injections<'t, T: Scalar>(
        &self,
        gs: &[Var<'t, T>],
        sel: &SelectionMask,
    ) -> Result<Vec<Option<Var<'t, T>>>> {
        if gs.len() != self.encoder.blocks.len() {
            return Err(Error::Invalid(format!(
                "expected {} context feature groups, got {}",
                self.encoder.blocks.len(),
                gs.len()
            )));
        }
        (1..=self.n_layers())
            .map(|i| {
                let g = gs[self.group_for_layer(i)? - 1];
                if self.cfg.select_background {
                    select_background(g, sel).map(Some)
                } else {
                    Ok(Some(g))
                }
            })
            .collect()
    }

    /// Noise prediction rows `[L, C'·p·p]` given precomputed context features.
    pub fn forward_with_context<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        inputs: &ForwardInputs<'_>,
        gs: &[Var<'t, T>],
        trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Var<'t, T>> {
        self.forward_inner(b, inputs, gs, true, trace)
    }

    /// The injected forward with unadapted Q/K/V projections. Identity tokens
    /// named by `inputs.id` are still attended to.
    pub fn forward_without_adapter<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        inputs: &ForwardInputs<'_>,
        trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Var<'t, T>> {
        let gs = self.context_features(b, inputs)?;
        self.forward_inner(b, inputs, &gs, false, trace)
    }

    fn forward_inner<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        inputs: &ForwardInputs<'_>,
        gs: &[Var<'t, T>],
        adapted: bool,
        mut trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Var<'t, T>> {
        let seq = self.backbone.patchify(b, inputs.z_t)?;
        let sel = self.selection(inputs.m_resized)?;
        if sel.len() != seq.grid.len() {
            return Err(Error::Extent {
                what: "mask grid",
                lhs: vec![sel.len()],
                rhs: vec![seq.grid.len()],
            });
        }
        let n = self.n_layers();
        let tape = b.tape();
        let extra_kv = match inputs.id {
            IdSource::None => vec![KvExtra::None; n],
            IdSource::Current => vec![KvExtra::CurrentRows(sel.foreground()); n],
            IdSource::Cache(c) if c.is_empty() => vec![KvExtra::None; n],
            IdSource::Cache(c) => {
                if c.n_layers() != n || c.d_model() != self.backbone.cfg.d_model {
                    return Err(Error::Extent {
                        what: "id cache",
                        lhs: vec![c.n_layers(), c.d_model()],
                        rhs: vec![n, self.backbone.cfg.d_model],
                    });
                }
                c.layers
                    .iter()
                    .map(|(k, v)| KvExtra::Given(tape.constant_owned(k.cast()), tape.constant_owned(v.cast())))
                    .collect()
            }
        };
        let hooks = Hooks {
            injections: self.assemble_injections(gs, &sel)?,
            extra_kv,
        };
        if let Some(tr) = trace.as_deref_mut() {
            tr.injected_group = (1..=n).map(|i| self.group_for_layer(i).ok()).collect();
        }
        let h = self.backbone.forward(
            b,
            &seq,
            &inputs.cond,
            &hooks,
            adapted.then_some(&self.adapter.layers[..]),
            trace,
        )?;
        self.backbone.unpatchify_rows(b, h)
    }

    /// Context encoder plus injected backbone, as one differentiable graph.
    pub fn injected_forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        inputs: &ForwardInputs<'_>,
        trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Var<'t, T>> {
        let gs = self.context_features(b, inputs)?;
        self.forward_with_context(b, inputs, &gs, trace)
    }

    /// Plain backbone noise prediction (no encoder, no identity tokens).
    pub fn backbone_forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        inputs: &ForwardInputs<'_>,
    ) -> Result<Var<'t, T>> {
        self.backbone.predict(b, inputs.z_t, &inputs.cond)
    }

    /// Predicted noise as a latent clip, on a throwaway frozen tape.
    pub fn predict_noise(&self, store: &ParamStore<f32>, inputs: &ForwardInputs<'_>) -> Result<LatentClip> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, store);
        let rows = self.injected_forward(&b, inputs, None)?;
        let grid = self.backbone.patchify(&b, inputs.z_t)?.grid;
        rows_to_latent(&rows.to_tensor(), grid, self.backbone.cfg.latent_channels, self.backbone.cfg.patch)
    }

    /// Records per-layer keys and values of the masked region of a finished
    /// clip, from one forward pass at timestep 0 on its clean latent.
    pub fn cache_from_clip(
        &self,
        store: &ParamStore<f32>,
        z0: &LatentClip,
        z0_masked: &LatentClip,
        m_resized: &SoftMask,
        caption_id: usize,
        first_frame: Option<&LatentClip>,
        clip_id: u32,
    ) -> Result<IdCache> {
        let fg = self.selection(m_resized)?.foreground();
        if fg.is_empty() {
            return Ok(IdCache::empty(clip_id));
        }
        let tape = Tape::new();
        let b = Binder::frozen(&tape, store);
        let inputs = ForwardInputs {
            z_t: z0,
            z0_masked,
            m_resized,
            cond: Conditioning {
                timestep: 0,
                caption_id,
                first_frame,
            },
            id: IdSource::Current,
        };
        let mut trace = ForwardTrace::capturing(fg);
        self.injected_forward(&b, &inputs, Some(&mut trace))?;
        IdCache::new(clip_id, trace.captured_kv)
    }
}
