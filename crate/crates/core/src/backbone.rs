//! Toy video diffusion transformer that predicts noise from latent tokens.
//!
//! Tokens are `p×p` latent patches of single frames, ordered `(t, y, x)`.
//! Timestep and caption enter through adaptive layer norm. In image-to-video
//! mode the clean first-frame latent is tokenized with the same projection,
//! tagged with a learned vector, and prepended to the sequence so every video
//! token can attend to it; those rows are dropped at the output.

use dualpaint_autograd::{Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{modulate, sinusoid, Block, KvExtra, Linear, QkvAdapter};
use crate::params::{Binder, Group, ParamId, ParamStore};
use crate::video::LatentClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Text (caption) to video.
    T2V,
    /// Caption plus a clean first-frame condition.
    I2V,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Spatial patch edge in latent cells (temporal patch is 1).
    pub patch: usize,
    pub caption_vocab: usize,
    pub mode: Mode,
    pub mlp_ratio: usize,
    pub latent_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            patch: 2,
            caption_vocab: crate::data::synth::CAPTION_VOCAB,
            mode: Mode::T2V,
            mlp_ratio: 4,
            latent_channels: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_layers % 2 != 0 {
            return Err(Error::Config(format!(
                "n_layers must be even and positive for the two-group split, got {}",
                self.n_layers
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 6 || self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even and >= 6".into()));
        }
        if self.patch == 0 || self.caption_vocab == 0 || self.mlp_ratio == 0 || self.latent_channels == 0 {
            return Err(Error::Config("patch, caption_vocab, mlp_ratio, latent_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }
}

/// Token index ↔ `(t, y, x)` map for a patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.rows + y) * self.cols + x
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.cols;
        let y = (i / self.cols) % self.rows;
        (i / (self.cols * self.rows), y, x)
    }

    pub fn per_frame(&self) -> usize {
        self.rows * self.cols
    }
}

/// Token matrix recorded on a tape together with its grid and foreground flags.
#[derive(Debug, Clone)]
pub struct TokenSeq<'t, T: Scalar = f32> {
    pub tokens: Var<'t, T>,
    pub grid: TokenGrid,
    pub fg: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub timestep: usize,
    pub caption_id: usize,
    /// Clean latent of the first frame (one frame); required in I2V mode.
    pub first_frame: Option<&'a LatentClip>,
}

/// Per-layer hooks; index `i` addresses layer `i + 1`.
pub struct Hooks<'t, T: Scalar = f32> {
    /// Added to the video-token hidden states after the layer.
    pub injections: Vec<Option<Var<'t, T>>>,
    pub extra_kv: Vec<KvExtra<'t, T>>,
}

impl<T: Scalar> Hooks<'_, T> {
    pub fn none(n_layers: usize) -> Self {
        Self {
            injections: vec![None; n_layers],
            extra_kv: vec![KvExtra::None; n_layers],
        }
    }
}

/// Per-layer record of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace<T: Scalar = f32> {
    /// Video-token hidden states after each layer (after injection).
    pub hidden: Vec<Tensor<T>>,
    /// Encoder group whose features were injected at each layer.
    pub injected_group: Vec<Option<usize>>,
    /// Number of extra key/value rows each layer attended to.
    pub extra_kv_rows: Vec<usize>,
    /// Attention input (post adaptive norm) of each layer, all rows.
    pub attn_inputs: Vec<Tensor<T>>,
    /// Video-token rows whose per-layer keys and values should be recorded.
    pub capture_rows: Option<Vec<usize>>,
    /// Recorded `(K, V)` of `capture_rows`, one pair per layer.
    pub captured_kv: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Trace that also records the keys and values of `rows`.
    pub fn capturing(rows: Vec<usize>) -> Self {
        Self {
            hidden: Vec::new(),
            injected_group: Vec::new(),
            extra_kv_rows: Vec::new(),
            attn_inputs: Vec::new(),
            capture_rows: Some(rows),
            captured_kv: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_in: Linear,
    pub time_in: Linear,
    pub time_out: Linear,
    pub caption_table: ParamId,
    pub cond_tag: ParamId,
    pub blocks: Vec<Block>,
    pub final_modulation: Linear,
    pub out: Linear,
}

/// Rearranges a latent clip into `[L, C·p·p]` patch rows ordered `(t,y,x)`,
/// each row laid out `(c, py, px)`.
pub fn patch_rows<T: Scalar>(z: &LatentClip, p: usize) -> Result<(Tensor<T>, TokenGrid)> {
    if z.height % p != 0 || z.width % p != 0 {
        return Err(Error::Invalid(format!(
            "latent {}x{} not divisible by patch {p}",
            z.height, z.width
        )));
    }
    let grid = TokenGrid {
        frames: z.frames,
        rows: z.height / p,
        cols: z.width / p,
    };
    let pd = z.channels * p * p;
    let mut data = Vec::with_capacity(grid.len() * pd);
    for t in 0..grid.frames {
        for gy in 0..grid.rows {
            for gx in 0..grid.cols {
                for c in 0..z.channels {
                    for py in 0..p {
                        for px in 0..p {
                            data.push(T::from_f64(z.get(t, c, gy * p + py, gx * p + px) as f64));
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(data, &[grid.len(), pd])?, grid))
}

/// Inverse of [`patch_rows`].
pub fn rows_to_latent<T: Scalar>(rows: &Tensor<T>, grid: TokenGrid, channels: usize, p: usize) -> Result<LatentClip> {
    let (l, pd) = rows.dims2("rows_to_latent")?;
    if l != grid.len() || pd != channels * p * p {
        return Err(Error::Extent {
            what: "token grid",
            lhs: rows.shape().to_vec(),
            rhs: vec![grid.len(), channels * p * p],
        });
    }
    let mut z = LatentClip::zeros(grid.frames, channels, grid.rows * p, grid.cols * p);
    let src = rows.data();
    for i in 0..l {
        let (t, gy, gx) = grid.coords(i);
        for c in 0..channels {
            for py in 0..p {
                for px in 0..p {
                    let o = z.index(t, c, gy * p + py, gx * p + px);
                    z.data[o] = src[i * pd + (c * p + py) * p + px].to_f64() as f32;
                }
            }
        }
    }
    Ok(z)
}

/// Sinusoidal `(t, y, x)` position code, `[L, d]`. The width is split into a
/// y part and an x part of `2·⌊d/6⌋` each, with the remainder for t.
pub fn positional_encoding<T: Scalar>(grid: TokenGrid, d: usize) -> Tensor<T> {
    let part = (d / 3) / 2 * 2;
    let tpart = d - 2 * part;
    let mut data = Vec::with_capacity(grid.len() * d);
    for i in 0..grid.len() {
        let (t, y, x) = grid.coords(i);
        data.extend(sinusoid(t as f64, tpart).into_iter().map(T::from_f64));
        data.extend(sinusoid(y as f64, part).into_iter().map(T::from_f64));
        data.extend(sinusoid(x as f64, part).into_iter().map(T::from_f64));
    }
    Tensor::from_vec(data, &[grid.len(), d]).expect("positional shape")
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let g = Group::Backbone;
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(store, &format!("backbone.block{}", i + 1), g, d, cfg.n_heads, cfg.mlp_ratio, rng))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            patch_in: Linear::new(store, "backbone.patch_in", g, cfg.patch_dim(), d, rng),
            time_in: Linear::new(store, "backbone.time_in", g, d, d, rng),
            time_out: Linear::new(store, "backbone.time_out", g, d, d, rng),
            caption_table: store.normal("backbone.caption_table", g, &[cfg.caption_vocab, d], 1.0, rng),
            cond_tag: store.normal("backbone.cond_tag", g, &[d], 0.02, rng),
            blocks,
            final_modulation: Linear::zeros(store, "backbone.final_modulation", g, d, 2 * d),
            out: Linear::zeros(store, "backbone.out", g, d, cfg.patch_dim()),
        })
    }

    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        let _ = self;
        store.count(Group::Backbone)
    }

    /// Linear patch embedding plus positional code.
    pub fn patchify<'t, T: Scalar>(&self, b: &Binder<'t, T>, z: &LatentClip) -> Result<TokenSeq<'t, T>> {
        if z.channels != self.cfg.latent_channels {
            return Err(Error::Extent {
                what: "latent channels",
                lhs: vec![z.channels],
                rhs: vec![self.cfg.latent_channels],
            });
        }
        let (rows, grid) = patch_rows::<T>(z, self.cfg.patch)?;
        let tape = b.tape();
        let x = self.patch_in.forward(b, tape.constant_owned(rows))?;
        let pe = tape.constant_owned(positional_encoding(grid, self.cfg.d_model));
        Ok(TokenSeq {
            tokens: x.add(pe)?,
            grid,
            fg: vec![false; grid.len()],
        })
    }

    /// Learned projection back to `[L, C'·p·p]` patch rows.
    pub fn unpatchify_rows<'t, T: Scalar>(&self, b: &Binder<'t, T>, hidden: Var<'t, T>) -> Result<Var<'t, T>> {
        self.out.forward(b, hidden)
    }

    pub fn unpatchify<'t, T: Scalar>(&self, b: &Binder<'t, T>, seq: &TokenSeq<'t, T>) -> Result<LatentClip> {
        if seq.tokens.shape() != [seq.grid.len(), self.cfg.d_model] {
            return Err(Error::Extent {
                what: "token grid",
                lhs: seq.tokens.shape(),
                rhs: vec![seq.grid.len(), self.cfg.d_model],
            });
        }
        let rows = self.unpatchify_rows(b, seq.tokens)?;
        rows_to_latent(&rows.to_tensor(), seq.grid, self.cfg.latent_channels, self.cfg.patch)
    }

    pub fn embed_timestep<'t, T: Scalar>(&self, b: &Binder<'t, T>, t: usize) -> Result<Var<'t, T>> {
        let d = self.cfg.d_model;
        let base: Vec<T> = sinusoid(t as f64, d).into_iter().map(T::from_f64).collect();
        let x = b.tape().constant_owned(Tensor::from_vec(base, &[1, d])?);
        self.time_out.forward(b, self.time_in.forward(b, x)?.silu()?)
    }

    pub fn embed_caption<'t, T: Scalar>(&self, b: &Binder<'t, T>, caption_id: usize) -> Result<Var<'t, T>> {
        if caption_id >= self.cfg.caption_vocab {
            return Err(Error::Invalid(format!(
                "caption id {caption_id} outside vocabulary of {}",
                self.cfg.caption_vocab
            )));
        }
        Ok(b.p(self.caption_table).gather_rows(&[caption_id])?)
    }

    /// Clean first-frame condition tokens (I2V), or `None` in T2V mode.
    fn condition_tokens<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        cond: &Conditioning<'_>,
    ) -> Result<Option<Var<'t, T>>> {
        match (self.cfg.mode, cond.first_frame) {
            (Mode::T2V, None) => Ok(None),
            (Mode::I2V, Some(f)) => {
                if f.frames != 1 {
                    return Err(Error::Invalid("first-frame condition must be one frame".into()));
                }
                let seq = self.patchify(b, f)?;
                Ok(Some(seq.tokens.add_row(b.p(self.cond_tag))?))
            }
            (Mode::T2V, Some(_)) => Err(Error::Invalid("first-frame condition given in T2V mode".into())),
            (Mode::I2V, None) => Err(Error::Invalid("I2V mode requires a first-frame condition".into())),
        }
    }

    /// Runs every block and the final adaptive norm, returning the video-token
    /// hidden states `[L, d]`. Map them to noise with [`Self::unpatchify_rows`].
    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        seq: &TokenSeq<'t, T>,
        cond: &Conditioning<'_>,
        hooks: &Hooks<'t, T>,
        adapters: Option<&[QkvAdapter]>,
        mut trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Var<'t, T>> {
        let n = self.cfg.n_layers;
        let d = self.cfg.d_model;
        let l = seq.grid.len();
        if hooks.injections.len() != n || hooks.extra_kv.len() != n {
            return Err(Error::Invalid(format!("hooks must cover all {n} layers")));
        }
        if let Some(a) = adapters {
            if a.len() != n {
                return Err(Error::Invalid("one adapter per layer required".into()));
            }
        }
        let c = self
            .embed_timestep(b, cond.timestep)?
            .add(self.embed_caption(b, cond.caption_id)?)?;
        let prefix = self.condition_tokens(b, cond)?;
        let lc = prefix.map(|p| p.shape()[0]).unwrap_or(0);
        let mut x = match prefix {
            Some(p) => Var::concat_rows(&[p, seq.tokens])?,
            None => seq.tokens,
        };
        let tape = b.tape();
        let extra: Vec<KvExtra<'t, T>> = hooks
            .extra_kv
            .iter()
            .map(|e| match e {
                KvExtra::CurrentRows(r) if lc > 0 => KvExtra::CurrentRows(r.iter().map(|i| i + lc).collect()),
                other => other.clone(),
            })
            .collect();
        for (i, block) in self.blocks.iter().enumerate() {
            let extra_i = &extra[i];
            if let Some(tr) = trace.as_deref_mut() {
                let m = block.modulation(b, c)?;
                let h = block.attn_input(b, x, &m)?;
                tr.attn_inputs.push(h.to_tensor());
                if let Some(rows) = &tr.capture_rows {
                    let rows: Vec<usize> = rows.iter().map(|r| r + lc).collect();
                    let (k, v) = block.region_kv(b, h, &rows, adapters.map(|a| &a[i]))?;
                    tr.captured_kv.push((k.to_tensor(), v.to_tensor()));
                }
                tr.extra_kv_rows.push(match extra_i {
                    KvExtra::None => 0,
                    KvExtra::Given(k, _) => k.shape()[0],
                    KvExtra::CurrentRows(r) => r.len(),
                });
            }
            x = block.forward(b, x, c, adapters.map(|a| &a[i]), extra_i)?;
            if let Some(inj) = hooks.injections[i] {
                if inj.shape() != [l, d] {
                    return Err(Error::Extent {
                        what: "injection",
                        lhs: inj.shape(),
                        rhs: vec![l, d],
                    });
                }
                let inj = if lc > 0 {
                    Var::concat_rows(&[tape.constant_owned(Tensor::zeros(&[lc, d])), inj])?
                } else {
                    inj
                };
                x = x.add(inj)?;
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.hidden.push(x.slice_rows(lc, l)?.to_tensor());
            }
        }
        let video = if lc > 0 { x.slice_rows(lc, l)? } else { x };
        let m = self.final_modulation.forward(b, c.silu()?)?;
        let shift = m.slice_cols(0, d)?;
        let scale = m.slice_cols(d, d)?;
        modulate(b, video, shift, scale)
    }

    /// Full noise prediction `[L, C'·p·p]` without hooks.
    pub fn predict<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        z_t: &LatentClip,
        cond: &Conditioning<'_>,
    ) -> Result<Var<'t, T>> {
        let seq = self.patchify(b, z_t)?;
        let h = self.forward(b, &seq, cond, &Hooks::none(self.cfg.n_layers), None, None)?;
        self.unpatchify_rows(b, h)
    }
}
