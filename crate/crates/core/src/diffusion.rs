//! Cosine noise schedule, forward noising, mask augmentation, and the
//! deterministic DDIM sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{Conditioning, Mode};
use crate::codec::{downsample_mask, make_masked_video, Codec};
use crate::encoder::SELECT_THRESHOLD;
use crate::error::{Error, Result};
use crate::model::{ForwardInputs, IdSource, Model};
use crate::params::ParamStore;
use crate::resample::IdCache;
use crate::video::{LatentClip, MaskClip, SoftMask, VideoClip};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal coefficients `ᾱ_0..=ᾱ_S` of a cosine schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Invalid(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// Descending timesteps visited by a `n`-step sampler, ending above 0.
    pub fn sampling_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let s = self.steps();
        if n == 0 || n > s {
            return Err(Error::Invalid(format!("sampling steps must be in 1..={s}, got {n}")));
        }
        let mut ts: Vec<usize> = (1..=n).rev().map(|k| ((k * s) as f64 / n as f64).round() as usize).collect();
        ts.dedup();
        Ok(ts)
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
    pub fn add_noise(&self, z0: &LatentClip, t: usize, eps: &LatentClip) -> Result<LatentClip> {
        self.check(t)?;
        if z0.dims() != eps.dims() {
            return Err(Error::Extent {
                what: "noise",
                lhs: z0.dims().to_vec(),
                rhs: eps.dims().to_vec(),
            });
        }
        let a = self.alpha_bar(t);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        let data = z0
            .data
            .iter()
            .zip(&eps.data)
            .map(|(&x, &e)| (sa * x as f64 + sb * e as f64) as f32)
            .collect();
        LatentClip::from_data(z0.dims(), data)
    }
}

/// Unit-normal latent noise.
pub fn gaussian_latent(dims: [usize; 4], rng: &mut impl Rng) -> LatentClip {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    LatentClip::from_data(dims, data).expect("sized")
}

/// Square structuring element offsets for edge `k` (contains the origin).
fn element(k: usize) -> std::ops::RangeInclusive<isize> {
    let lo = -(((k - 1) / 2) as isize);
    lo..=lo + k as isize - 1
}

/// Binary dilation of every frame by a `k×k` square; outside the frame counts as 0.
pub fn dilate(m: &MaskClip, k: usize) -> MaskClip {
    let (h, w) = (m.height() as isize, m.width() as isize);
    MaskClip::from_fn(m.frames(), m.height(), m.width(), |t, y, x| {
        element(k).any(|dy| {
            element(k).any(|dx| {
                let (sy, sx) = (y as isize - dy, x as isize - dx);
                sy >= 0 && sy < h && sx >= 0 && sx < w && m.get(t, sy as usize, sx as usize)
            })
        })
    })
}

/// Binary erosion of every frame by a `k×k` square; outside the frame counts as 1.
pub fn erode(m: &MaskClip, k: usize) -> MaskClip {
    let (h, w) = (m.height() as isize, m.width() as isize);
    MaskClip::from_fn(m.frames(), m.height(), m.width(), |t, y, x| {
        element(k).all(|dy| {
            element(k).all(|dx| {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                sy < 0 || sy >= h || sx < 0 || sx >= w || m.get(t, sy as usize, sx as usize)
            })
        })
    })
}

/// Morphology kernel edges for a frame of height `h`, scaled from edges
/// given at height 480 and clamped to at least 1.
pub fn scaled_kernel_range(range: (usize, usize), h: usize) -> (usize, usize) {
    let s = |k: usize| ((k as f64 * h as f64 / 480.0).round() as usize).max(1);
    (s(range.0), s(range.1))
}

/// Random dilation or erosion with one square kernel for the whole clip.
/// An empty result is re-rolled once and then accepted.
pub fn augment_mask(m: &MaskClip, kernel: (usize, usize), rng: &mut impl Rng) -> MaskClip {
    let (lo, hi) = (kernel.0.max(1), kernel.1.max(kernel.0).max(1));
    let roll = |rng: &mut dyn rand::RngCore| {
        let k = rng.random_range(lo..=hi);
        if rng.random_bool(0.5) {
            dilate(m, k)
        } else {
            erode(m, k)
        }
    };
    let out = roll(rng);
    if out.count() == 0 && m.count() > 0 {
        roll(rng)
    } else {
        out
    }
}

/// Latent-resolution mask of a pixel mask for a given codec.
pub fn latent_mask(codec: &Codec, m: &MaskClip) -> Result<SoftMask> {
    downsample_mask(m, codec.latent_extent(m.height(), m.width())?)
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions<'a> {
    pub steps: usize,
    /// Overwrite the known latent region with the noised original after every step.
    pub blend_known_region: bool,
    pub id_cache: Option<&'a IdCache>,
    pub seed: u64,
}

impl Default for SampleOptions<'_> {
    fn default() -> Self {
        Self {
            steps: 20,
            blend_known_region: false,
            id_cache: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Decoded and background-composited clip.
    pub video: VideoClip,
    /// Final clean latent.
    pub latent: LatentClip,
    /// Masked-video latent the model was conditioned on.
    pub masked_latent: LatentClip,
    /// Latent-resolution mask actually used.
    pub mask: SoftMask,
}

/// Everything the sampler needs besides the model.
pub struct Sampler<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore<f32>,
    pub codec: &'a Codec,
    pub schedule: &'a NoiseSchedule,
}

impl Sampler<'_> {
    /// DDIM (η = 0) reverse process from seeded noise.
    ///
    /// `masked_video` carries the source pixels outside `mask`. A given
    /// `first_frame` replaces frame 0 of the masked video (its mask is cleared)
    /// and, in I2V mode, is also the image condition.
    pub fn sample(
        &self,
        masked_video: &VideoClip,
        mask: &MaskClip,
        caption_id: usize,
        first_frame: Option<&VideoClip>,
        opts: &SampleOptions<'_>,
    ) -> Result<SampleOutput> {
        mask.check_aligned(masked_video)?;
        let mut source = make_masked_video(masked_video, mask)?;
        let mut mask = mask.clone();
        if let Some(f) = first_frame {
            if f.frames() != 1 || f.height() != source.height() || f.width() != source.width() {
                return Err(Error::Extent {
                    what: "first frame",
                    lhs: f.dims().to_vec(),
                    rhs: vec![1, 3, source.height(), source.width()],
                });
            }
            source.set_frame(0, f.frame(0));
            mask.clear_frame(0);
        }
        let cond_latent = match (self.model.backbone.cfg.mode, first_frame) {
            (Mode::I2V, Some(f)) => Some(self.codec.encode(f)?),
            (Mode::I2V, None) => {
                return Err(Error::Invalid("I2V sampling needs a first frame".into()));
            }
            (Mode::T2V, _) => None,
        };
        let z_known = self.codec.encode(&source)?;
        let m_res = latent_mask(self.codec, &mask)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut z = gaussian_latent(z_known.dims(), &mut rng);
        let bound = self.codec.latent_bound();
        let ts = self.schedule.sampling_timesteps(opts.steps)?;
        let id = match opts.id_cache {
            Some(c) => IdSource::Cache(c),
            None => IdSource::None,
        };
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            let inputs = ForwardInputs {
                z_t: &z,
                z0_masked: &z_known,
                m_resized: &m_res,
                cond: Conditioning {
                    timestep: t,
                    caption_id,
                    first_frame: cond_latent.as_ref(),
                },
                id,
            };
            let eps = self.model.predict_noise(self.store, &inputs)?;
            z = ddim_step(self.schedule, &z, &eps, t, t_prev, bound)?;
            if opts.blend_known_region {
                let noise = gaussian_latent(z.dims(), &mut rng);
                let known = self.schedule.add_noise(&z_known, t_prev, &noise)?;
                overwrite_known(&mut z, &known, &m_res);
            }
        }
        let decoded = self.codec.decode(&z, source.fps)?;
        let video = composite(&decoded, &source, &mask)?;
        Ok(SampleOutput {
            video,
            latent: z,
            masked_latent: z_known,
            mask: m_res,
        })
    }
}

/// One deterministic DDIM update from `t` to `t_prev` with `x0` clamped to `±bound`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z: &LatentClip,
    eps: &LatentClip,
    t: usize,
    t_prev: usize,
    bound: f32,
) -> Result<LatentClip> {
    schedule.check(t)?;
    schedule.check(t_prev)?;
    let (a, ap) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let data = z
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&x, &e)| {
            let (x, e) = (x as f64, e as f64);
            let x0 = ((x - (1.0 - a).sqrt() * e) / a.sqrt()).clamp(-bound as f64, bound as f64);
            (ap.sqrt() * x0 + (1.0 - ap).sqrt() * e) as f32
        })
        .collect();
    LatentClip::from_data(z.dims(), data)
}

/// Copies `known` into `z` at latent cells whose mask value is background.
pub fn overwrite_known(z: &mut LatentClip, known: &LatentClip, m: &SoftMask) {
    for t in 0..z.frames {
        for c in 0..z.channels {
            for y in 0..z.height {
                for x in 0..z.width {
                    if m.get(t, y, x) <= SELECT_THRESHOLD {
                        let i = z.index(t, c, y, x);
                        z.data[i] = known.data[i];
                    }
                }
            }
        }
    }
}

/// Takes `generated` inside the mask and `source` everywhere else.
pub fn composite(generated: &VideoClip, source: &VideoClip, mask: &MaskClip) -> Result<VideoClip> {
    mask.check_aligned(source)?;
    if generated.dims() != source.dims() {
        return Err(Error::Extent {
            what: "composite",
            lhs: generated.dims().to_vec(),
            rhs: source.dims().to_vec(),
        });
    }
    let mut out = source.clone();
    for t in 0..source.frames() {
        for y in 0..source.height() {
            for x in 0..source.width() {
                if mask.get(t, y, x) {
                    for c in 0..3 {
                        out.set(t, c, y, x, generated.get(t, c, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{latent, mask, rng, tiny_model, video};
    use proptest::prelude::*;

    #[test]
    fn schedule_is_monotone_with_sane_endpoints() {
        let s = NoiseSchedule::cosine(100).unwrap();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(100) < 1e-3 && s.alpha_bar(100) > 0.0);
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn sampling_timesteps_enumeration() {
        let s = NoiseSchedule::cosine(100).unwrap();
        assert_eq!(s.sampling_timesteps(4).unwrap(), vec![100, 75, 50, 25]);
        assert_eq!(s.sampling_timesteps(100).unwrap(), (1..=100).rev().collect::<Vec<_>>());
        assert_eq!(s.sampling_timesteps(3).unwrap(), vec![100, 67, 33]);
        assert!(s.sampling_timesteps(0).is_err());
        assert!(s.sampling_timesteps(101).is_err());
    }

    #[test]
    fn add_noise_endpoints() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let z0 = latent([2, 4, 4, 4], 1);
        let eps = latent([2, 4, 4, 4], 2);
        let z = s.add_noise(&z0, 0, &eps).unwrap();
        assert!(z.data.iter().zip(&z0.data).all(|(a, b)| (a - b).abs() < 1e-6));
        let zero = LatentClip::zeros(2, 4, 4, 4);
        let z = s.add_noise(&zero, 100, &eps).unwrap();
        assert!(z.data.iter().zip(&eps.data).all(|(a, b)| (a - b).abs() <= 0.1 * b.abs() + 1e-6));
        assert!(s.add_noise(&z0, 101, &eps).is_err());
        assert!(s.add_noise(&z0, 5, &latent([1, 4, 4, 4], 3)).is_err());
    }

    #[test]
    fn add_noise_variance_monte_carlo() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let n = 10_000;
        let mut z0 = latent([1, 1, 1, n], 10);
        z0.data.iter_mut().for_each(|v| *v *= 2.0);
        let var = |d: &[f32]| {
            let m = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
            d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64
        };
        let v0 = var(&z0.data);
        for (t, seed) in [(10, 11), (50, 12), (90, 13)] {
            let eps = latent([1, 1, 1, n], seed);
            let z = s.add_noise(&z0, t, &eps).unwrap();
            let a = s.alpha_bar(t);
            let want = a * v0 + (1.0 - a);
            assert!((var(&z.data) - want).abs() < 0.05 * want, "t={t}");
        }
    }

    #[test]
    fn ddim_step_follows_true_noise_path() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut z0 = latent([1, 4, 4, 4], 1);
        z0.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        let eps = latent([1, 4, 4, 4], 2);
        let zt = s.add_noise(&z0, 60, &eps).unwrap();
        let step = ddim_step(&s, &zt, &eps, 60, 30, 2.0).unwrap();
        let want = s.add_noise(&z0, 30, &eps).unwrap();
        assert!(step.data.iter().zip(&want.data).all(|(a, b)| (a - b).abs() < 1e-4));
        let last = ddim_step(&s, &step, &eps, 30, 0, 2.0).unwrap();
        assert!(last.data.iter().zip(&z0.data).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn ddim_clamps_predicted_clean_latent() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let z = LatentClip::from_data([1, 1, 1, 2], vec![50.0, -50.0]).unwrap();
        let eps = LatentClip::zeros(1, 1, 1, 2);
        let out = ddim_step(&s, &z, &eps, 5, 0, 1.5).unwrap();
        assert_eq!(out.data, vec![1.5, -1.5]);
    }

    #[test]
    fn morphology_examples() {
        let m = MaskClip::from_fn(1, 5, 5, |_, y, x| y == 2 && x == 2);
        assert_eq!(dilate(&m, 1), m);
        assert_eq!(erode(&m, 1), m);
        let d3 = dilate(&m, 3);
        assert_eq!(d3, MaskClip::from_fn(1, 5, 5, |_, y, x| (1..=3).contains(&y) && (1..=3).contains(&x)));
        assert_eq!(erode(&d3, 3), m);
        let d2 = dilate(&m, 2);
        assert_eq!(d2, MaskClip::from_fn(1, 5, 5, |_, y, x| (2..=3).contains(&y) && (2..=3).contains(&x)));
        assert_eq!(erode(&d2, 2), m);
        let full = MaskClip::filled(1, 4, 4, 1);
        assert_eq!(erode(&full, 3), full);
    }

    proptest! {
        #[test]
        fn morphology_containment(seed in any::<u64>(), k in 1usize..6) {
            let m = mask(2, 9, 7, 0.3, seed);
            let d = dilate(&m, k);
            let e = erode(&m, k);
            let closed = erode(&d, k);
            for i in 0..m.data().len() {
                prop_assert!(d.data()[i] >= m.data()[i]);
                prop_assert!(e.data()[i] <= m.data()[i]);
                prop_assert!(closed.data()[i] >= m.data()[i]);
            }
        }

        #[test]
        fn augmentation_is_dilation_or_erosion(seed in any::<u64>()) {
            let m = mask(2, 12, 12, 0.4, seed);
            let out = augment_mask(&m, (1, 4), &mut rng(seed));
            let matches = (1..=4).any(|k| out == dilate(&m, k) || out == erode(&m, k));
            prop_assert!(matches);
        }
    }

    #[test]
    fn kernel_scaling() {
        assert_eq!(scaled_kernel_range((8, 32), 480), (8, 32));
        assert_eq!(scaled_kernel_range((8, 32), 32), (1, 2));
        assert_eq!(scaled_kernel_range((8, 32), 240), (4, 16));
        assert_eq!(scaled_kernel_range((1, 2), 16), (1, 1));
    }

    #[test]
    fn empty_erosion_is_rerolled_once() {
        let m = MaskClip::from_fn(1, 8, 8, |_, y, x| y == 3 && x == 3);
        let mut grew = 0;
        for s in 0..40 {
            let out = augment_mask(&m, (3, 3), &mut rng(s));
            if out.count() > 0 {
                grew += 1;
            }
        }
        assert!(grew > 20, "only {grew} of 40 non-empty");
    }

    #[test]
    fn composite_takes_generated_only_inside_mask() {
        let g = video(2, 4, 4, 1);
        let s = video(2, 4, 4, 2);
        let m = mask(2, 4, 4, 0.5, 3);
        let c = composite(&g, &s, &m).unwrap();
        for t in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let src = if m.get(t, y, x) { &g } else { &s };
                    for ch in 0..3 {
                        assert_eq!(c.get(t, ch, y, x), src.get(t, ch, y, x));
                    }
                }
            }
        }
        assert!(composite(&video(1, 4, 4, 1), &s, &m).is_err());
    }

    fn setup() -> (Model, ParamStore<f32>, Codec, NoiseSchedule) {
        let (model, mut store) = Model::new::<f32>(&tiny_model(), &mut rng(0)).unwrap();
        store.perturb(crate::params::Group::Backbone, 0.05, &mut rng(1));
        store.perturb(crate::params::Group::Encoder, 0.05, &mut rng(2));
        (model, store, Codec::default(), NoiseSchedule::cosine(50).unwrap())
    }

    #[test]
    fn blend_with_empty_mask_returns_input() {
        let (model, store, codec, schedule) = setup();
        let sampler = Sampler { model: &model, store: &store, codec: &codec, schedule: &schedule };
        let v = video(2, 8, 8, 5);
        let m = MaskClip::filled(2, 8, 8, 0);
        let opts = SampleOptions { steps: 5, blend_known_region: true, ..Default::default() };
        let out = sampler.sample(&v, &m, 0, None, &opts).unwrap();
        assert_eq!(out.video, v);
        let known = codec.encode(&v).unwrap();
        assert_eq!(out.latent, known);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let (model, store, codec, schedule) = setup();
        let sampler = Sampler { model: &model, store: &store, codec: &codec, schedule: &schedule };
        let v = video(2, 8, 8, 5);
        let m = MaskClip::filled(2, 8, 8, 1);
        let opts = SampleOptions { steps: 6, seed: 9, ..Default::default() };
        let a = sampler.sample(&v, &m, 1, None, &opts).unwrap();
        let b = sampler.sample(&v, &m, 1, None, &opts).unwrap();
        assert_eq!(a.video, b.video);
        assert!(a.video.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let c = sampler.sample(&v, &m, 1, None, &SampleOptions { seed: 10, ..opts }).unwrap();
        assert_ne!(a.video, c.video);
    }

    #[test]
    fn first_frame_replaces_masked_frame_zero() {
        let (model, store, codec, schedule) = setup();
        let sampler = Sampler { model: &model, store: &store, codec: &codec, schedule: &schedule };
        let v = video(3, 8, 8, 5);
        let m = MaskClip::filled(3, 8, 8, 1);
        let f = video(1, 8, 8, 6);
        let out = sampler.sample(&v, &m, 0, Some(&f), &SampleOptions { steps: 3, ..Default::default() }).unwrap();
        assert_eq!(out.video.frame(0), f.frame(0));
        assert!(out.mask.data[..out.mask.height * out.mask.width].iter().all(|&x| x == 0.0));
        assert!(sampler.sample(&v, &m, 0, Some(&video(2, 8, 8, 6)), &SampleOptions::default()).is_err());
    }

    #[test]
    fn unmasked_pixels_are_source() {
        let (model, store, codec, schedule) = setup();
        let sampler = Sampler { model: &model, store: &store, codec: &codec, schedule: &schedule };
        let v = video(2, 8, 8, 5);
        let m = mask(2, 8, 8, 0.5, 7);
        let out = sampler.sample(&v, &m, 0, None, &SampleOptions { steps: 3, ..Default::default() }).unwrap();
        for t in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    if !m.get(t, y, x) {
                        for c in 0..3 {
                            assert_eq!(out.video.get(t, c, y, x), v.get(t, c, y, x));
                        }
                    }
                }
            }
        }
    }
}
