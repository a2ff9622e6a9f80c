//! Context encoder: a shallow clone of the backbone's first blocks that reads
//! the noisy latent, the masked-video latent and the downsampled mask, and
//! feeds zero-gated features back into the backbone, background tokens only.

use dualpaint_autograd::{Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{patch_rows, Backbone, TokenGrid, TokenSeq};
use crate::error::{Error, Result};
use crate::nn::{Block, KvExtra, Linear};
use crate::params::{Binder, Group, ParamStore};
use crate::video::{LatentClip, SoftMask};

/// A token is background iff every latent cell it covers has mask value at
/// or below this.
pub const SELECT_THRESHOLD: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of cloned backbone blocks (and injection groups).
    pub layers: usize,
    /// Add the caption embedding to the encoder's conditioning vector.
    pub caption_conditioning: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            caption_conditioning: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoder {
    pub cfg: EncoderConfig,
    pub input: Linear,
    pub blocks: Vec<Block>,
    /// Zero-initialized output maps, one per block.
    pub zero: Vec<Linear>,
    patch: usize,
    latent_channels: usize,
}

/// Per-token keep flags; `true` marks a pure-background token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    pub keep: Vec<bool>,
}

impl SelectionMask {
    pub fn all(len: usize, keep: bool) -> Self {
        Self { keep: vec![keep; len] }
    }

    /// Keep flags from a latent-resolution mask; a token is kept iff its whole
    /// `p×p` footprint is at most [`SELECT_THRESHOLD`].
    pub fn from_mask(m: &SoftMask, p: usize) -> Result<Self> {
        if p == 0 || m.height % p != 0 || m.width % p != 0 {
            return Err(Error::Invalid(format!(
                "mask {}x{} not divisible by patch {p}",
                m.height, m.width
            )));
        }
        let grid = TokenGrid {
            frames: m.frames,
            rows: m.height / p,
            cols: m.width / p,
        };
        let keep = (0..grid.len())
            .map(|i| {
                let (t, gy, gx) = grid.coords(i);
                (0..p).all(|py| (0..p).all(|px| m.get(t, gy * p + py, gx * p + px) <= SELECT_THRESHOLD))
            })
            .collect();
        Ok(Self { keep })
    }

    pub fn foreground(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, k)| (!k).then_some(i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

/// Backbone layer `i` (1-based) of `n` feeds from encoder group `⌈i·k/n⌉`.
///
/// With `k = 2` this is the half split: layers `1..=n/2` use group 1 and the
/// rest use group 2.
pub fn group_for_layer_of(i: usize, n: usize, k: usize) -> Result<usize> {
    if k == 0 || n == 0 || n % k != 0 {
        return Err(Error::Config(format!("{n} layers cannot be split into {k} groups")));
    }
    if i == 0 || i > n {
        return Err(Error::Invalid(format!("layer {i} outside 1..={n}")));
    }
    Ok((i * k).div_ceil(n))
}

/// Two-group mapping; `n` must be even.
pub fn group_for_layer(i: usize, n: usize) -> Result<usize> {
    group_for_layer_of(i, n, 2)
}

/// Stacks `[z_t, z0_masked, m]` along channels.
pub fn stack_context_channels(z_t: &LatentClip, z0_masked: &LatentClip, m: &SoftMask) -> Result<LatentClip> {
    let (t, c, h, w) = (z_t.frames, z_t.channels, z_t.height, z_t.width);
    if z0_masked.dims() != z_t.dims() || [m.frames, m.height, m.width] != [t, h, w] {
        return Err(Error::Extent {
            what: "context input",
            lhs: z_t.dims().to_vec(),
            rhs: vec![z0_masked.frames, z0_masked.channels, m.frames, m.height, m.width],
        });
    }
    let mut out = LatentClip::zeros(t, 2 * c + 1, h, w);
    let plane = h * w;
    for f in 0..t {
        let dst = f * out.frame_len();
        out.data[dst..dst + c * plane].copy_from_slice(&z_t.data[f * z_t.frame_len()..(f + 1) * z_t.frame_len()]);
        out.data[dst + c * plane..dst + 2 * c * plane]
            .copy_from_slice(&z0_masked.data[f * z0_masked.frame_len()..(f + 1) * z0_masked.frame_len()]);
        out.data[dst + 2 * c * plane..dst + (2 * c + 1) * plane].copy_from_slice(&m.data[f * plane..(f + 1) * plane]);
    }
    Ok(out)
}

impl ContextEncoder {
    /// Clones the first `cfg.layers` backbone blocks into the encoder group.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        backbone: &Backbone,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = backbone.cfg.n_layers;
        group_for_layer_of(1, n, cfg.layers)?;
        let d = backbone.cfg.d_model;
        let p = backbone.cfg.patch;
        let c = backbone.cfg.latent_channels;
        let g = Group::Encoder;
        let input = Linear::new(store, "encoder.input", g, (2 * c + 1) * p * p, d, rng);
        let blocks = backbone.blocks[..cfg.layers]
            .iter()
            .enumerate()
            .map(|(j, b)| b.duplicate(store, &format!("encoder.block{}", j + 1), g))
            .collect();
        let zero = (0..cfg.layers)
            .map(|j| Linear::zeros(store, &format!("encoder.zero{}", j + 1), g, d, d))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            input,
            blocks,
            zero,
            patch: p,
            latent_channels: c,
        })
    }

    /// Re-copies the current backbone blocks into the encoder, so a freshly
    /// pretrained backbone seeds the encoder before it is trained.
    pub fn copy_backbone_blocks<T: Scalar>(&self, store: &mut ParamStore<T>, backbone: &Backbone) {
        for (dst, src) in self.blocks.iter().zip(&backbone.blocks) {
            dst.copy_values_from(store, src);
        }
    }

    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        let _ = self;
        store.count(Group::Encoder)
    }

    /// Channel-stacked input through the input adapter, on the backbone's grid.
    pub fn build_context_input<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        z_t: &LatentClip,
        z0_masked: &LatentClip,
        m_resized: &SoftMask,
    ) -> Result<TokenSeq<'t, T>> {
        if z_t.channels != self.latent_channels {
            return Err(Error::Extent {
                what: "latent channels",
                lhs: vec![z_t.channels],
                rhs: vec![self.latent_channels],
            });
        }
        let stacked = stack_context_channels(z_t, z0_masked, m_resized)?;
        let (rows, grid) = patch_rows::<T>(&stacked, self.patch)?;
        let tokens = self.input.forward(b, b.tape().constant_owned(rows))?;
        let fg = SelectionMask::from_mask(m_resized, self.patch)?.keep.iter().map(|k| !k).collect();
        Ok(TokenSeq { tokens, grid, fg })
    }

    /// Zero-gated outputs `g_j = Z_j(block_j(...block_1(input)))`.
    pub fn context_forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        backbone: &Backbone,
        input: &TokenSeq<'t, T>,
        timestep: usize,
        caption_id: usize,
    ) -> Result<Vec<Var<'t, T>>> {
        let mut c = backbone.embed_timestep(b, timestep)?;
        if self.cfg.caption_conditioning {
            c = c.add(backbone.embed_caption(b, caption_id)?)?;
        }
        let mut x = input.tokens;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (block, z) in self.blocks.iter().zip(&self.zero) {
            x = block.forward(b, x, c, None, &KvExtra::None)?;
            out.push(z.forward(b, x)?);
        }
        Ok(out)
    }
}

/// Zeroes rows of `g` that are not kept.
pub fn select_background<'t, T: Scalar>(g: Var<'t, T>, sel: &SelectionMask) -> Result<Var<'t, T>> {
    if g.shape()[0] != sel.len() {
        return Err(Error::Extent {
            what: "selection mask",
            lhs: g.shape(),
            rhs: vec![sel.len()],
        });
    }
    Ok(g.mask_rows(&sel.keep)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{latent, rng, tiny_backbone};
    use dualpaint_autograd::{Tape, Tensor};

    fn soft(frames: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> SoftMask {
        let mut data = Vec::new();
        for t in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(t, y, x));
                }
            }
        }
        SoftMask { frames, height: h, width: w, data }
    }

    #[test]
    fn group_enumeration() {
        let g = |n| (1..=n).map(|i| group_for_layer(i, n).unwrap()).collect::<Vec<_>>();
        assert_eq!(g(2), vec![1, 2]);
        assert_eq!(g(4), vec![1, 1, 2, 2]);
        assert_eq!(g(8), vec![1, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(group_for_layer(5, 8).unwrap(), 2);
        assert_eq!(
            (1..=6).map(|i| group_for_layer_of(i, 6, 3).unwrap()).collect::<Vec<_>>(),
            vec![1, 1, 2, 2, 3, 3]
        );
        assert!(group_for_layer(1, 3).is_err());
        assert!(group_for_layer(0, 4).is_err());
        assert!(group_for_layer(5, 4).is_err());
    }

    #[test]
    fn selection_requires_whole_footprint_clear() {
        let m = soft(1, 4, 4, |_, y, x| if y == 0 && x == 3 { 1e-3 } else if y == 3 && x == 0 { 1e-7 } else { 0.0 });
        let sel = SelectionMask::from_mask(&m, 2).unwrap();
        assert_eq!(sel.keep, vec![true, false, true, true]);
        assert_eq!(sel.foreground(), vec![1]);
        assert!(SelectionMask::from_mask(&m, 3).is_err());
    }

    #[test]
    fn select_background_extremes() {
        let tape = Tape::<f32>::new();
        let g = tape.constant_owned(Tensor::from_vec((0..12).map(|i| i as f32 + 1.0).collect(), &[4, 3]).unwrap());
        let keep = select_background(g, &SelectionMask::all(4, true)).unwrap().to_tensor();
        assert_eq!(keep, g.to_tensor());
        let drop = select_background(g, &SelectionMask::all(4, false)).unwrap().to_tensor();
        assert!(drop.data().iter().all(|&v| v == 0.0));
        assert!(select_background(g, &SelectionMask::all(3, true)).is_err());
    }

    #[test]
    fn channel_stacking_layout() {
        let z = latent([2, 4, 2, 2], 1);
        let zm = latent([2, 4, 2, 2], 2);
        let m = soft(2, 2, 2, |t, y, x| (t * 4 + y * 2 + x) as f32 / 8.0);
        let s = stack_context_channels(&z, &zm, &m).unwrap();
        assert_eq!(s.dims(), [2, 9, 2, 2]);
        for t in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    for c in 0..4 {
                        assert_eq!(s.get(t, c, y, x), z.get(t, c, y, x));
                        assert_eq!(s.get(t, 4 + c, y, x), zm.get(t, c, y, x));
                    }
                    assert_eq!(s.get(t, 8, y, x), m.get(t, y, x));
                }
            }
        }
        assert!(stack_context_channels(&z, &latent([1, 4, 2, 2], 3), &m).is_err());
    }

    #[test]
    fn fresh_encoder_emits_zero_features_and_clones_blocks() {
        let cfg = tiny_backbone();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, &cfg, &mut rng(0)).unwrap();
        let enc = ContextEncoder::new(&mut store, &bb, &EncoderConfig::default(), &mut rng(1)).unwrap();
        for (eb, bbk) in enc.blocks.iter().zip(&bb.blocks) {
            assert_eq!(store.value(eb.q.w), store.value(bbk.q.w));
            assert_eq!(store.get(eb.mlp_out.w).group, Group::Encoder);
        }
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &store);
        let m = soft(2, 4, 4, |_, y, _| (y < 2) as u8 as f32);
        let seq = enc
            .build_context_input(&b, &latent([2, 4, 4, 4], 5), &latent([2, 4, 4, 4], 6), &m)
            .unwrap();
        assert_eq!(seq.fg, vec![true, true, false, false, true, true, false, false]);
        let gs = enc.context_forward(&b, &bb, &seq, 17, 0).unwrap();
        assert_eq!(gs.len(), 2);
        for g in gs {
            assert!(g.to_tensor().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_inputs_give_bias_tokens() {
        let cfg = tiny_backbone();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, &cfg, &mut rng(0)).unwrap();
        let enc = ContextEncoder::new(&mut store, &bb, &EncoderConfig::default(), &mut rng(1)).unwrap();
        let bias: Vec<f32> = (0..cfg.d_model).map(|i| i as f32 - 3.0).collect();
        store.value_mut(enc.input.b).data_mut().copy_from_slice(&bias);
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &store);
        let z = LatentClip::zeros(1, 4, 4, 4);
        let seq = enc.build_context_input(&b, &z, &z, &soft(1, 4, 4, |_, _, _| 0.0)).unwrap();
        let t = seq.tokens.to_tensor();
        for row in t.data().chunks(cfg.d_model) {
            assert_eq!(row, &bias[..]);
        }
    }

    #[test]
    fn layer_count_must_divide_backbone() {
        let cfg = tiny_backbone();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, &cfg, &mut rng(0)).unwrap();
        let bad = EncoderConfig { layers: 3, ..EncoderConfig::default() };
        assert!(ContextEncoder::new(&mut store, &bb, &bad, &mut rng(1)).is_err());
    }
}
