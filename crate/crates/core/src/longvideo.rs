//! Any-length inpainting by overlapping clip windows.
//!
//! Clips are generated in order. Each clip after the first takes the last
//! pre-overlap frame of its predecessor as its first frame (image condition in
//! I2V mode, known frame of the masked video in both modes), optionally
//! attends to the predecessor's identity cache, and is cross-faded into the
//! output over the overlap.

use serde::{Deserialize, Serialize};

use crate::backbone::Mode;
use crate::diffusion::{composite, SampleOptions, SampleOutput, Sampler};
use crate::error::{Error, Result};
use crate::resample::IdCache;
use crate::video::{LatentClip, MaskClip, VideoClip};

/// Windowing of `T` frames into clips of at most `clip_len` frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPlan {
    pub clip_len: usize,
    pub overlap: usize,
    /// Half-open `[start, end)` frame ranges.
    pub windows: Vec<(usize, usize)>,
}

/// Windows start every `clip_len − overlap` frames; the last one ends at `total`.
pub fn plan_clips(total: usize, clip_len: usize, overlap: usize) -> Result<ClipPlan> {
    if total == 0 || clip_len == 0 {
        return Err(Error::Invalid("plan needs at least one frame and a positive clip length".into()));
    }
    if overlap >= clip_len {
        return Err(Error::Invalid(format!("overlap {overlap} must be below clip length {clip_len}")));
    }
    let stride = clip_len - overlap;
    let mut windows = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + clip_len).min(total);
        windows.push((start, end));
        if end == total {
            break;
        }
        start += stride;
    }
    Ok(ClipPlan {
        clip_len,
        overlap,
        windows,
    })
}

impl ClipPlan {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Global index of the frame handed from clip `k − 1` to clip `k`.
    pub fn handoff_index(&self, k: usize) -> Result<usize> {
        if k == 0 || k >= self.windows.len() {
            return Err(Error::Invalid(format!("clip {k} has no predecessor in a {}-clip plan", self.len())));
        }
        Ok(self.windows[k].0 - 1)
    }
}

/// Incoming-clip weights `w_j = (j+1)/(o+1)`.
pub fn blend_weights(overlap: usize) -> Vec<f64> {
    (0..overlap).map(|j| (j + 1) as f64 / (overlap + 1) as f64).collect()
}

/// `(1−w_j)·prev_j + w_j·cur_j` over frames of `frame_len` values.
fn mix(prev: &[f32], cur: &[f32], frame_len: usize, w: &[f64]) -> Vec<f32> {
    prev.iter()
        .zip(cur)
        .enumerate()
        .map(|(i, (&a, &b))| {
            let wj = w[i / frame_len];
            if a == b {
                a
            } else {
                ((1.0 - wj) * a as f64 + wj * b as f64) as f32
            }
        })
        .collect()
}

/// `(1−w_j)·prev_j + w_j·cur_j`, frame by frame.
pub fn blend_overlap(prev: &VideoClip, cur: &VideoClip, w: &[f64]) -> Result<VideoClip> {
    if prev.dims() != cur.dims() || prev.frames() != w.len() {
        return Err(Error::Extent {
            what: "overlap blend",
            lhs: prev.dims().to_vec(),
            rhs: [cur.dims().as_slice(), &[w.len()]].concat(),
        });
    }
    let data = mix(prev.data(), cur.data(), prev.frame_len(), w);
    VideoClip::new(prev.frames(), prev.height(), prev.width(), prev.fps, data)
}

/// The same cross-fade applied to latents.
pub fn blend_latent_overlap(prev: &LatentClip, cur: &LatentClip, w: &[f64]) -> Result<LatentClip> {
    if prev.dims() != cur.dims() || prev.frames != w.len() {
        return Err(Error::Extent {
            what: "latent overlap blend",
            lhs: prev.dims().to_vec(),
            rhs: [cur.dims().as_slice(), &[w.len()]].concat(),
        });
    }
    LatentClip::from_data(prev.dims(), mix(&prev.data, &cur.data, prev.frame_len(), w))
}

/// First frame for clip `k`: the frame of clip `k − 1`'s result at global
/// index `windows[k].start − 1`.
pub fn handoff_condition(prev_result: &VideoClip, plan: &ClipPlan, k: usize) -> Result<VideoClip> {
    let g = plan.handoff_index(k)?;
    let (ps, pe) = plan.windows[k - 1];
    if prev_result.frames() != pe - ps {
        return Err(Error::Extent {
            what: "previous clip",
            lhs: vec![prev_result.frames()],
            rhs: vec![pe - ps],
        });
    }
    prev_result.slice(g - ps, g - ps + 1)
}

/// Produces an inpainted first frame for the opening clip.
pub trait FirstFrameFiller {
    /// `frame` is a one-frame source clip and `mask` its one-frame mask.
    fn fill(&self, frame: &VideoClip, mask: &MaskClip) -> Result<VideoClip>;
}

/// Fills masked pixels with the per-channel mean of the unmasked pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanColorFill;

impl FirstFrameFiller for MeanColorFill {
    fn fill(&self, frame: &VideoClip, mask: &MaskClip) -> Result<VideoClip> {
        mask.check_aligned(frame)?;
        let (h, w) = (frame.height(), frame.width());
        let mut mean = [0f64; 3];
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if !mask.get(0, y, x) {
                    n += 1;
                    for (c, m) in mean.iter_mut().enumerate() {
                        *m += frame.get(0, c, y, x) as f64;
                    }
                }
            }
        }
        let fill = mean.map(|m| if n > 0 { (m / n as f64) as f32 } else { 0.5 });
        let mut out = frame.clone();
        for y in 0..h {
            for x in 0..w {
                if mask.get(0, y, x) {
                    for (c, &v) in fill.iter().enumerate() {
                        out.set(0, c, y, x, v);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Returns a fixed frame, typically the ground truth (for testing).
#[derive(Debug, Clone)]
pub struct GivenFrame(pub VideoClip);

impl FirstFrameFiller for GivenFrame {
    fn fill(&self, frame: &VideoClip, _mask: &MaskClip) -> Result<VideoClip> {
        if self.0.dims() != frame.dims() {
            return Err(Error::Extent {
                what: "given first frame",
                lhs: self.0.dims().to_vec(),
                rhs: frame.dims().to_vec(),
            });
        }
        Ok(self.0.clone())
    }
}

/// Inpaints one clip; in I2V mode the first frame comes from `filler`.
pub fn inpaint_clip(
    sampler: &Sampler<'_>,
    video: &VideoClip,
    mask: &MaskClip,
    caption_id: usize,
    filler: &dyn FirstFrameFiller,
    opts: &SampleOptions<'_>,
) -> Result<SampleOutput> {
    let first = match sampler.model.backbone.cfg.mode {
        Mode::I2V => Some(filler.fill(&video.slice(0, 1)?, &mask.slice(0, 1)?)?),
        Mode::T2V => None,
    };
    sampler.sample(video, mask, caption_id, first.as_ref(), opts)
}

/// Where overlapping clips are cross-faded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendSpace {
    /// Decoded frames.
    #[default]
    Pixel,
    /// Clean latents, decoded after blending.
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongConfig {
    pub clip_len: usize,
    /// Defaults to a quarter of the clip length.
    pub overlap: Option<usize>,
    pub resample: bool,
    pub steps: usize,
    pub blend_known_region: bool,
    pub blend_space: BlendSpace,
}

impl Default for LongConfig {
    fn default() -> Self {
        Self {
            clip_len: 8,
            overlap: None,
            resample: true,
            steps: 20,
            blend_known_region: false,
            blend_space: BlendSpace::Pixel,
        }
    }
}

impl LongConfig {
    pub fn overlap(&self) -> usize {
        self.overlap.unwrap_or(self.clip_len / 4)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipTrace {
    pub window: (usize, usize),
    pub seed: u64,
    /// Identity tokens per layer attended to while sampling this clip.
    pub cache_tokens_used: usize,
    /// Identity tokens per layer recorded from this clip's result.
    pub cache_tokens_extracted: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LongTrace {
    pub clips: Vec<ClipTrace>,
    /// Raw per-clip results before blending.
    pub clip_results: Vec<VideoClip>,
    pub caches: Vec<IdCache>,
}

/// Inpaints a video of any length. Clip `k` samples with seed `seed + k`.
pub fn run_long_inpaint(
    sampler: &Sampler<'_>,
    video: &VideoClip,
    mask: &MaskClip,
    caption_id: usize,
    filler: &dyn FirstFrameFiller,
    cfg: &LongConfig,
    seed: u64,
) -> Result<(VideoClip, LongTrace)> {
    mask.check_aligned(video)?;
    let plan = plan_clips(video.frames(), cfg.clip_len, cfg.overlap())?;
    let codec = sampler.codec;
    let mut out: Option<(VideoClip, LatentClip)> = None;
    let mut trace = LongTrace::default();
    let mut cache: Option<IdCache> = None;
    let mut prev: Option<VideoClip> = None;
    for (k, &(s, e)) in plan.windows.iter().enumerate() {
        let clip_video = video.slice(s, e)?;
        let clip_mask = mask.slice(s, e)?;
        let opts = SampleOptions {
            steps: cfg.steps,
            blend_known_region: cfg.blend_known_region,
            id_cache: if cfg.resample { cache.as_ref() } else { None },
            seed: seed.wrapping_add(k as u64),
        };
        let (result, first) = match &prev {
            None => {
                let r = inpaint_clip(sampler, &clip_video, &clip_mask, caption_id, filler, &opts)?;
                let first = (sampler.model.backbone.cfg.mode == Mode::I2V).then(|| r.video.slice(0, 1)).transpose()?;
                (r, first)
            }
            Some(p) => {
                let first = handoff_condition(p, &plan, k)?;
                let r = sampler.sample(&clip_video, &clip_mask, caption_id, Some(&first), &opts)?;
                (r, Some(first))
            }
        };
        let used = opts.id_cache.map(IdCache::token_count).unwrap_or(0);
        let clip_seed = opts.seed;
        let extracted = if cfg.resample {
            let cond = match (sampler.model.backbone.cfg.mode, &first) {
                (Mode::I2V, Some(f)) => Some(codec.encode(f)?),
                _ => None,
            };
            let c = sampler.model.cache_from_clip(
                sampler.store,
                &result.latent,
                &result.masked_latent,
                &result.mask,
                caption_id,
                cond.as_ref(),
                k as u32,
            )?;
            let n = c.token_count();
            trace.caches.push(c.clone());
            cache = Some(c);
            n
        } else {
            0
        };
        trace.clips.push(ClipTrace {
            window: (s, e),
            seed: clip_seed,
            cache_tokens_used: used,
            cache_tokens_extracted: extracted,
        });
        out = Some(match out {
            None => (result.video.clone(), result.latent.clone()),
            Some((acc, acc_z)) => {
                let o = plan.windows[k - 1].1 - s;
                let w = blend_weights(o);
                let z = blend_latent_overlap(&acc_z.slice(s, s + o), &result.latent.slice(0, o), &w)?;
                let pixels = match cfg.blend_space {
                    BlendSpace::Pixel => blend_overlap(&acc.slice(s, s + o)?, &result.video.slice(0, o)?, &w)?,
                    BlendSpace::Latent => codec.decode(&z, video.fps)?,
                };
                let video = VideoClip::concat(&[acc.slice(0, s)?, pixels, result.video.slice(o, e - s)?])?;
                let mut data = acc_z.slice(0, s).data;
                data.extend_from_slice(&z.data);
                data.extend_from_slice(&result.latent.slice(o, e - s).data);
                let dims = [e, z.channels, z.height, z.width];
                (video, LatentClip::from_data(dims, data)?)
            }
        });
        trace.clip_results.push(result.video.clone());
        prev = Some(result.video);
    }
    let (out, _) = out.expect("plan has at least one window");
    let source = crate::codec::make_masked_video(video, mask)?;
    Ok((composite(&out, &source, mask)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Codec;
    use crate::diffusion::NoiseSchedule;
    use crate::model::Model;
    use crate::params::Group;
    use crate::testutil::{mask, rng, tiny_model, video};

    /// Independent window oracle: every start `k·(F−o)` whose predecessor
    /// window did not already reach the end.
    fn brute_windows(t: usize, f: usize, o: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for k in 0.. {
            let s = k * (f - o);
            if out.last().is_some_and(|w| w.1 >= t) {
                break;
            }
            out.push((s, (s + f).min(t)));
        }
        out
    }

    #[test]
    fn plan_matches_brute_force() {
        for t in 1..=30 {
            for f in 1..=8 {
                for o in 0..f {
                    assert_eq!(plan_clips(t, f, o).unwrap().windows, brute_windows(t, f, o), "T={t} F={f} o={o}");
                }
            }
        }
    }

    #[test]
    fn plan_examples() {
        assert_eq!(plan_clips(10, 4, 2).unwrap().windows, vec![(0, 4), (2, 6), (4, 8), (6, 10)]);
        assert_eq!(plan_clips(3, 8, 2).unwrap().windows, vec![(0, 3)]);
        assert_eq!(plan_clips(9, 3, 0).unwrap().windows, vec![(0, 3), (3, 6), (6, 9)]);
        assert!(plan_clips(10, 4, 4).is_err());
        assert!(plan_clips(0, 4, 1).is_err());
    }

    #[test]
    fn handoff_indices() {
        let p = plan_clips(10, 4, 2).unwrap();
        assert_eq!(p.handoff_index(1).unwrap(), 1);
        assert_eq!(p.handoff_index(3).unwrap(), 5);
        assert!(p.handoff_index(0).is_err());
        let q = plan_clips(8, 4, 0).unwrap();
        assert_eq!(q.handoff_index(1).unwrap(), 3);
        let prev = video(4, 4, 4, 1);
        assert_eq!(handoff_condition(&prev, &p, 1).unwrap(), prev.slice(1, 2).unwrap());
        assert_eq!(handoff_condition(&prev, &q, 1).unwrap(), prev.slice(3, 4).unwrap());
    }

    #[test]
    fn blend_weight_properties() {
        assert_eq!(blend_weights(1), vec![0.5]);
        for o in 1..10 {
            let w = blend_weights(o);
            for (j, wj) in w.iter().enumerate() {
                let mirror = w[o - 1 - j];
                assert!((wj + mirror - 1.0).abs() < 1e-12);
                assert!(*wj > 0.0 && *wj < 1.0);
            }
        }
        let a = VideoClip::filled(1, 2, 2, 8.0, 0.2);
        let b = VideoClip::filled(1, 2, 2, 8.0, 0.6);
        let m = blend_overlap(&a, &b, &[0.5]).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
        let v = video(3, 4, 4, 2);
        assert_eq!(blend_overlap(&v, &v, &blend_weights(3)).unwrap(), v);
        assert!(blend_overlap(&v, &v, &blend_weights(2)).is_err());
    }

    #[test]
    fn latent_blend_matches_scalar_formula() {
        let a = LatentClip::from_data([2, 1, 1, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = LatentClip::from_data([2, 1, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let z = blend_latent_overlap(&a, &b, &blend_weights(2)).unwrap();
        let want = [1.0 / 3.0, 1.0, 2.0 / 3.0, 1.0];
        assert!(z.data.iter().zip(want).all(|(x, y)| (x - y).abs() < 1e-6));
        assert!(blend_latent_overlap(&a, &b, &[0.5]).is_err());
    }

    #[test]
    fn latent_blending_only_touches_overlaps() {
        let (model, store, codec, schedule) = setup();
        let s = Sampler { model: &model, store: &store, codec: &codec, schedule: &schedule };
        let v = video(7, 8, 8, 3);
        let m = MaskClip::from_fn(7, 8, 8, |_, y, _| y < 4);
        let pixel = LongConfig { clip_len: 4, overlap: Some(1), steps: 2, ..Default::default() };
        let latent = LongConfig { blend_space: BlendSpace::Latent, ..pixel.clone() };
        let (a, _) = run_long_inpaint(&s, &v, &m, 0, &MeanColorFill, &pixel, 4).unwrap();
        let (b, _) = run_long_inpaint(&s, &v, &m, 0, &MeanColorFill, &latent, 4).unwrap();
        for t in [0, 1, 2, 4, 5] {
            assert_eq!(a.slice(t, t + 1).unwrap(), b.slice(t, t + 1).unwrap(), "frame {t}");
        }
        for t in [3, 6] {
            for y in 4..8 {
                assert_eq!(a.get(t, 0, y, 0), b.get(t, 0, y, 0));
            }
        }
    }

    #[test]
    fn mean_fill_uses_unmasked_mean() {
        let mut f = VideoClip::filled(1, 2, 2, 8.0, 0.0);
        f.set(0, 0, 0, 0, 0.9);
        f.set(0, 0, 0, 1, 0.3);
        let m = MaskClip::from_fn(1, 2, 2, |_, y, _| y == 1);
        let out = MeanColorFill.fill(&f, &m).unwrap();
        assert!((out.get(0, 0, 1, 0) - 0.6).abs() < 1e-6);
        assert_eq!(out.get(0, 0, 0, 0), 0.9);
        let all = MeanColorFill.fill(&f, &MaskClip::filled(1, 2, 2, 1)).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.5));
    }

    fn setup() -> (Model, crate::params::ParamStore<f32>, Codec, NoiseSchedule) {
        let (model, mut store) = Model::new::<f32>(&tiny_model(), &mut rng(0)).unwrap();
        store.perturb(Group::Backbone, 0.05, &mut rng(1));
        store.perturb(Group::Encoder, 0.05, &mut rng(2));
        store.perturb(Group::Adapter, 0.05, &mut rng(3));
        (model, store, Codec::default(), NoiseSchedule::cosine(50).unwrap())
    }

    #[test]
    fn single_window_equals_single_inpaint() {
        let (model, store, codec, schedule) = setup();
        let s = Sampler { model: &model, store: &store, codec: &codec, schedule: &schedule };
        let v = video(4, 8, 8, 1);
        let m = mask(4, 8, 8, 0.4, 2);
        let cfg = LongConfig { clip_len: 8, steps: 4, ..Default::default() };
        let (long, trace) = run_long_inpaint(&s, &v, &m, 0, &MeanColorFill, &cfg, 11).unwrap();
        let opts = SampleOptions { steps: 4, seed: 11, ..Default::default() };
        let single = inpaint_clip(&s, &v, &m, 0, &MeanColorFill, &opts).unwrap();
        assert_eq!(long, single.video);
        assert_eq!(trace.clips.len(), 1);
    }

    #[test]
    fn long_run_traces_cache_usage() {
        let (model, store, codec, schedule) = setup();
        let s = Sampler { model: &model, store: &store, codec: &codec, schedule: &schedule };
        let v = video(10, 8, 8, 1);
        let m = MaskClip::from_fn(10, 8, 8, |_, y, x| (2..6).contains(&y) && (2..6).contains(&x));
        let cfg = LongConfig { clip_len: 4, overlap: Some(1), steps: 3, ..Default::default() };
        let (out, trace) = run_long_inpaint(&s, &v, &m, 0, &MeanColorFill, &cfg, 5).unwrap();
        assert_eq!(out.frames(), 10);
        let windows: Vec<_> = trace.clips.iter().map(|c| c.window).collect();
        assert_eq!(windows, vec![(0, 4), (3, 7), (6, 10)]);
        assert_eq!(trace.clips.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![5, 6, 7]);
        assert_eq!(trace.clips[0].cache_tokens_used, 0);
        assert!(trace.clips[1..].iter().all(|c| c.cache_tokens_used > 0));
        let off = LongConfig { resample: false, ..cfg.clone() };
        let (_, t2) = run_long_inpaint(&s, &v, &m, 0, &MeanColorFill, &off, 5).unwrap();
        assert!(t2.clips.iter().all(|c| c.cache_tokens_used == 0 && c.cache_tokens_extracted == 0));
        assert!(t2.caches.is_empty());
        for t in 0..10 {
            for y in 0..8 {
                for x in 0..8 {
                    if !m.get(t, y, x) {
                        assert_eq!(out.get(t, 1, y, x), v.get(t, 1, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn empty_masks_make_resampling_inert() {
        let (model, store, codec, schedule) = setup();
        let s = Sampler { model: &model, store: &store, codec: &codec, schedule: &schedule };
        let v = video(7, 8, 8, 1);
        let m = MaskClip::filled(7, 8, 8, 0);
        let on = LongConfig { clip_len: 4, overlap: Some(1), steps: 3, ..Default::default() };
        let off = LongConfig { resample: false, ..on.clone() };
        let (a, _) = run_long_inpaint(&s, &v, &m, 0, &MeanColorFill, &on, 1).unwrap();
        let (b, _) = run_long_inpaint(&s, &v, &m, 0, &MeanColorFill, &off, 1).unwrap();
        assert_eq!(a, b);
    }
}
