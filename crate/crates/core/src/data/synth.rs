//! Synthetic moving-shape clips with exact masks and caption ids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{MaskClip, VideoClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
}

pub const SHAPES: [Shape; 2] = [Shape::Circle, Shape::Square];

/// Named object colors.
pub const PALETTE: [(&str, [f32; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
];

pub const CAPTION_VOCAB: usize = SHAPES.len() * PALETTE.len();

/// Caption id: `shape_index · |palette| + color_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CaptionId(pub usize);

impl CaptionId {
    pub fn new(shape: Shape, color: usize) -> Result<Self> {
        if color >= PALETTE.len() {
            return Err(Error::Invalid(format!("color index {color} outside palette")));
        }
        let s = SHAPES.iter().position(|&x| x == shape).expect("shape listed");
        Ok(Self(s * PALETTE.len() + color))
    }

    pub fn decode(self) -> Result<(Shape, usize)> {
        if self.0 >= CAPTION_VOCAB {
            return Err(Error::Invalid(format!("caption id {} outside vocabulary", self.0)));
        }
        Ok((SHAPES[self.0 / PALETTE.len()], self.0 % PALETTE.len()))
    }

    pub fn color_rgb(self) -> Result<[f32; 3]> {
        Ok(PALETTE[self.decode()?.1].1)
    }

    /// Caption with the same shape and another color.
    pub fn with_color(self, color: usize) -> Result<Self> {
        Self::new(self.decode()?.0, color)
    }

    pub fn text(self) -> Result<String> {
        let (s, c) = self.decode()?;
        let shape = match s {
            Shape::Circle => "circle",
            Shape::Square => "square",
        };
        Ok(format!("a {} {shape}", PALETTE[c].0))
    }
}

pub fn color_index(name: &str) -> Option<usize> {
    PALETTE.iter().position(|(n, _)| *n == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// Horizontal gray ramp from `lo` to `hi`.
    Gradient { lo: f32, hi: f32 },
    /// Vertical gray stripes of `width` pixels.
    Stripes { width: usize, lo: f32, hi: f32 },
    /// Per-pixel uniform gray in `[0.2, 0.8]`, fixed over time.
    Noise { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    /// Index into [`PALETTE`].
    pub color: usize,
    /// Center at frame 0, in pixels.
    pub start: (f64, f64),
    /// `(dy, dx)` pixels per frame.
    pub velocity: (f64, f64),
    pub background: Background,
    /// Radius (circle) or half edge (square), in pixels.
    pub size: f64,
}

impl SceneSpec {
    pub fn caption(&self) -> Result<CaptionId> {
        CaptionId::new(self.shape, self.color)
    }

    pub fn center(&self, t: usize) -> (f64, f64) {
        (self.start.0 + self.velocity.0 * t as f64, self.start.1 + self.velocity.1 * t as f64)
    }

    /// Fails unless the shape stays inside an `h×w` frame for all `frames`.
    pub fn validate(&self, frames: usize, h: usize, w: usize) -> Result<()> {
        if self.color >= PALETTE.len() || !(self.size > 0.0) {
            return Err(Error::Invalid("scene color or size invalid".into()));
        }
        for t in [0, frames.saturating_sub(1)] {
            let (cy, cx) = self.center(t);
            if cy - self.size < 0.0 || cx - self.size < 0.0 || cy + self.size > h as f64 || cx + self.size > w as f64 {
                return Err(Error::Invalid(format!("shape leaves the {h}x{w} frame at t={t}")));
            }
        }
        Ok(())
    }

    /// Whether pixel `(y, x)` is covered at frame `t`.
    pub fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let (cy, cx) = self.center(t);
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        match self.shape {
            Shape::Circle => dy * dy + dx * dx <= self.size * self.size,
            Shape::Square => dy.abs() <= self.size && dx.abs() <= self.size,
        }
    }
}

fn background_frame(bg: &Background, h: usize, w: usize) -> Vec<f32> {
    match *bg {
        Background::Gradient { lo, hi } => (0..h * w)
            .map(|i| lo + (hi - lo) * (i % w) as f32 / (w.max(2) - 1) as f32)
            .collect(),
        Background::Stripes { width, lo, hi } => (0..h * w)
            .map(|i| if ((i % w) / width.max(1)) % 2 == 0 { lo } else { hi })
            .collect(),
        Background::Noise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..h * w).map(|_| rng.random_range(0.2..=0.8)).collect()
        }
    }
}

/// Renders a clip with hard edges, so the mask is exactly the shape support.
pub fn generate_synthetic(
    spec: &SceneSpec,
    frames: usize,
    h: usize,
    w: usize,
    fps: f32,
) -> Result<(VideoClip, MaskClip, CaptionId)> {
    spec.validate(frames, h, w)?;
    let bg = background_frame(&spec.background, h, w);
    let color = PALETTE[spec.color].1;
    let mask = MaskClip::from_fn(frames, h, w, |t, y, x| spec.covers(t, y, x));
    let mut data = Vec::with_capacity(frames * 3 * h * w);
    for t in 0..frames {
        for &col in &color {
            for y in 0..h {
                for x in 0..w {
                    data.push(if mask.get(t, y, x) { col } else { bg[y * w + x] });
                }
            }
        }
    }
    Ok((VideoClip::new(frames, h, w, fps, data)?, mask, spec.caption()?))
}

/// Object size bounds as fractions of the shorter frame side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneRanges {
    pub size_min: f64,
    pub size_max: f64,
    /// Maximum speed in pixels per frame along each axis.
    pub max_speed: f64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            size_min: 0.22,
            size_max: 0.36,
            max_speed: 1.0,
        }
    }
}

/// Draws a scene that stays inside the frame for `frames` frames.
pub fn random_spec(rng: &mut impl Rng, frames: usize, h: usize, w: usize, ranges: &SceneRanges) -> Result<SceneSpec> {
    let side = h.min(w) as f64;
    let shape = SHAPES[rng.random_range(0..SHAPES.len())];
    let color = rng.random_range(0..PALETTE.len());
    let size = (rng.random_range(ranges.size_min..=ranges.size_max) * side).round().max(1.0);
    let span = (frames.max(1) - 1) as f64;
    let mut axis = |extent: usize| -> Result<(f64, f64)> {
        // `size` and `v` are whole numbers, so `lo..=hi` has integer ends.
        let room = extent as f64 - 2.0 * size;
        if room < 0.0 {
            return Err(Error::Invalid(format!("object of size {size} does not fit {h}x{w}")));
        }
        let vmax = if span > 0.0 { ranges.max_speed.min(room / span) } else { 0.0 };
        let v = rng.random_range(-vmax..=vmax).round();
        let v = if v.abs() * span > room { 0.0 } else { v };
        let travel = v.abs() * span;
        let lo = size + if v < 0.0 { travel } else { 0.0 };
        let hi = extent as f64 - size - if v > 0.0 { travel } else { 0.0 };
        Ok((rng.random_range(lo..=hi).round(), v))
    };
    let (sy, vy) = axis(h)?;
    let (sx, vx) = axis(w)?;
    let background = match rng.random_range(0..3) {
        0 => {
            let lo = rng.random_range(0.1..0.45f32);
            Background::Gradient {
                lo,
                hi: rng.random_range(lo + 0.2..0.9),
            }
        }
        1 => Background::Stripes {
            width: rng.random_range(2..=6),
            lo: rng.random_range(0.15..0.4),
            hi: rng.random_range(0.6..0.85),
        },
        _ => Background::Noise { seed: rng.random() },
    };
    let spec = SceneSpec {
        shape,
        color,
        start: (sy, sx),
        velocity: (vy, vx),
        background,
        size,
    };
    spec.validate(frames, h, w)?;
    Ok(spec)
}

/// One synthetic training clip.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub spec: SceneSpec,
    pub video: VideoClip,
    pub mask: MaskClip,
    pub caption: CaptionId,
}

/// `count` clips from one seed; clip `i` uses its own derived stream.
pub fn synthetic_corpus(
    seed: u64,
    count: usize,
    frames: usize,
    h: usize,
    w: usize,
    fps: f32,
    ranges: &SceneRanges,
) -> Result<Vec<SyntheticClip>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let spec = random_spec(&mut rng, frames, h, w, ranges)?;
            let (video, mask, caption) = generate_synthetic(&spec, frames, h, w, fps)?;
            Ok(SyntheticClip {
                spec,
                video,
                mask,
                caption,
            })
        })
        .collect()
}
