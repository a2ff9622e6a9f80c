//! Fixed, training-free codec between pixel space and latent space.
//!
//! Encoding takes the `s×s` block mean of each RGB channel, maps it from
//! `[0,1]` to `[-1,1]`, and lifts the three normalized channels into `C'`
//! latent channels with a fixed matrix `L` whose columns are orthonormal and
//! each sum to one. Decoding applies `Lᵀ`, maps back to `[0,1]` (clamped) and
//! upsamples by pixel replication. Consequently `decode∘encode` is the block
//! mean, and an all `-1` latent decodes to black.

use crate::error::{Error, Result};
use crate::video::{LatentClip, MaskClip, SoftMask, VideoClip};

/// Pixel value written into masked pixels; it encodes to latent 0.
pub const MASK_FILL: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    spatial_factor: usize,
    channels: usize,
    /// `channels × 3`, row-major.
    lift: Vec<f64>,
}

impl Default for Codec {
    fn default() -> Self {
        Self::new(2, 4).expect("default codec")
    }
}

fn householder(v: &[f64], m: &mut [f64], rows: usize, cols: usize) {
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    for c in 0..cols {
        let dot: f64 = (0..rows).map(|r| v[r] * m[r * cols + c]).sum();
        for r in 0..rows {
            m[r * cols + c] -= 2.0 * v[r] * dot / norm2;
        }
    }
}

impl Codec {
    pub fn new(spatial_factor: usize, channels: usize) -> Result<Self> {
        if spatial_factor == 0 {
            return Err(Error::Config("spatial factor must be >= 1".into()));
        }
        if channels < 3 {
            return Err(Error::Config(format!(
                "latent channels must be >= 3 to hold RGB, got {channels}"
            )));
        }
        // Start from [I3; 0] and apply two reflections whose normals are
        // orthogonal to the all-ones vector: columns stay orthonormal and keep
        // unit column sums, while the channels get mixed.
        let mut lift = vec![0.0; channels * 3];
        for i in 0..3 {
            lift[i * 3 + i] = 1.0;
        }
        let mut v1 = vec![0.0; channels];
        v1[..3].copy_from_slice(&[1.0, 2.0, -3.0]);
        let mut v2 = vec![0.0; channels];
        if channels >= 4 {
            v2[..4].copy_from_slice(&[0.0, 1.0, 1.0, -2.0]);
        } else {
            v2.copy_from_slice(&[2.0, -1.0, -1.0]);
        }
        householder(&v1, &mut lift, channels, 3);
        householder(&v2, &mut lift, channels, 3);
        Ok(Self {
            spatial_factor,
            channels,
            lift,
        })
    }

    pub fn spatial_factor(&self) -> usize {
        self.spatial_factor
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The `C'×3` lift matrix, row-major.
    pub fn lift(&self) -> &[f64] {
        &self.lift
    }

    /// Largest absolute latent value reachable by encoding a `[0,1]` video.
    pub fn latent_bound(&self) -> f32 {
        (0..self.channels)
            .map(|r| (0..3).map(|c| self.lift[r * 3 + c].abs()).sum::<f64>())
            .fold(0.0, f64::max) as f32
    }

    pub fn latent_extent(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let s = self.spatial_factor;
        if height % s != 0 || width % s != 0 {
            return Err(Error::Invalid(format!(
                "frame {height}x{width} not divisible by spatial factor {s}"
            )));
        }
        Ok((height / s, width / s))
    }

    /// Lifts one normalized RGB triple to latent channels.
    pub fn lift_pixel(&self, rgb: [f64; 3]) -> Vec<f64> {
        (0..self.channels)
            .map(|r| (0..3).map(|c| self.lift[r * 3 + c] * (2.0 * rgb[c] - 1.0)).sum())
            .collect()
    }

    pub fn encode(&self, v: &VideoClip) -> Result<LatentClip> {
        let s = self.spatial_factor;
        let (h, w) = self.latent_extent(v.height(), v.width())?;
        let mut z = LatentClip::zeros(v.frames(), self.channels, h, w);
        let inv = 1.0 / (s * s) as f64;
        for t in 0..v.frames() {
            for by in 0..h {
                for bx in 0..w {
                    let mut mean = [0f64; 3];
                    for (c, m) in mean.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for y in by * s..(by + 1) * s {
                            for x in bx * s..(bx + 1) * s {
                                acc += v.get(t, c, y, x) as f64;
                            }
                        }
                        *m = acc * inv;
                    }
                    for (r, val) in self.lift_pixel(mean).into_iter().enumerate() {
                        let i = z.index(t, r, by, bx);
                        z.data[i] = val as f32;
                    }
                }
            }
        }
        Ok(z)
    }

    pub fn decode(&self, z: &LatentClip, fps: f32) -> Result<VideoClip> {
        if z.channels != self.channels {
            return Err(Error::Extent {
                what: "latent channels",
                lhs: vec![z.channels],
                rhs: vec![self.channels],
            });
        }
        let s = self.spatial_factor;
        let (h, w) = (z.height * s, z.width * s);
        let mut out = VideoClip::filled(z.frames, h, w, fps, 0.0);
        for t in 0..z.frames {
            for by in 0..z.height {
                for bx in 0..z.width {
                    for c in 0..3 {
                        let n: f64 = (0..self.channels)
                            .map(|r| self.lift[r * 3 + c] * z.get(t, r, by, bx) as f64)
                            .sum();
                        let p = ((n + 1.0) * 0.5).clamp(0.0, 1.0) as f32;
                        for y in by * s..(by + 1) * s {
                            for x in bx * s..(bx + 1) * s {
                                out.set(t, c, y, x, p);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Catmull-Rom cubic convolution kernel.
pub fn catmull_rom(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Four (index, weight) taps along one axis for output coordinate `o`.
fn cubic_taps(o: usize, src: usize, dst: usize) -> [(usize, f64); 4] {
    let pos = (o as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
    let base = pos.floor();
    let t = pos - base;
    let clampi = |i: f64| i.clamp(0.0, (src - 1) as f64) as usize;
    [
        (clampi(base - 1.0), catmull_rom(t + 1.0)),
        (clampi(base), catmull_rom(t)),
        (clampi(base + 1.0), catmull_rom(1.0 - t)),
        (clampi(base + 2.0), catmull_rom(2.0 - t)),
    ]
}

/// Bicubic (Catmull-Rom) resampling of each mask frame to `target`, with
/// replicated borders; results are clamped to `[0,1]`.
pub fn downsample_mask(m: &MaskClip, target: (usize, usize)) -> Result<SoftMask> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Invalid(format!("zero target extent {th}x{tw}")));
    }
    let (h, w) = (m.height(), m.width());
    let xtaps: Vec<_> = (0..tw).map(|x| cubic_taps(x, w, tw)).collect();
    let ytaps: Vec<_> = (0..th).map(|y| cubic_taps(y, h, th)).collect();
    let mut data = Vec::with_capacity(m.frames() * th * tw);
    let mut rows = vec![0f64; h * tw];
    for t in 0..m.frames() {
        for y in 0..h {
            for (x, taps) in xtaps.iter().enumerate() {
                rows[y * tw + x] = taps
                    .iter()
                    .map(|&(i, wt)| wt * m.get(t, y, i) as u8 as f64)
                    .sum();
            }
        }
        for taps in &ytaps {
            for x in 0..tw {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * rows[i * tw + x]).sum();
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(SoftMask {
        frames: m.frames(),
        height: th,
        width: tw,
        data,
    })
}

/// Replaces masked pixels with [`MASK_FILL`]; unmasked pixels are copied.
pub fn make_masked_video(v: &VideoClip, m: &MaskClip) -> Result<VideoClip> {
    m.check_aligned(v)?;
    let mut out = v.clone();
    for t in 0..v.frames() {
        for y in 0..v.height() {
            for x in 0..v.width() {
                if m.get(t, y, x) {
                    for c in 0..3 {
                        out.set(t, c, y, x, MASK_FILL);
                    }
                }
            }
        }
    }
    Ok(out)
}
