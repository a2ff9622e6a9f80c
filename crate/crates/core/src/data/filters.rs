//! Mask-quality filters, scene-cut detection, interval splitting and
//! selection scores. All functions are pure.

use serde::{Deserialize, Serialize};

use crate::video::{MaskClip, VideoClip};

/// Per-frame mask areas of a clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStats {
    pub areas: Vec<usize>,
    pub frame_area: usize,
}

impl MaskStats {
    pub fn of(mask: &MaskClip) -> Self {
        Self {
            areas: mask.areas(),
            frame_area: mask.frame_area(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOutcome {
    pub pass: bool,
    pub value: f64,
}

/// `Δ = max_t |a_{t+1} − a_t| / max(a_t, 1)`; 0 for fewer than two frames.
pub fn mask_variation(stats: &MaskStats) -> f64 {
    stats
        .areas
        .windows(2)
        .map(|p| (p[1] as f64 - p[0] as f64).abs() / (p[0].max(1)) as f64)
        .fold(0.0, f64::max)
}

/// Passes iff `Δ < max_delta` (strict).
pub fn mask_variation_filter(stats: &MaskStats, max_delta: f64) -> FilterOutcome {
    let value = mask_variation(stats);
    FilterOutcome {
        pass: value < max_delta,
        value,
    }
}

/// Passes iff every frame's covered fraction lies in `[lo, hi]`; `value` is
/// the fraction farthest outside (or closest to leaving) that band.
pub fn coverage_filter(stats: &MaskStats, lo: f64, hi: f64) -> FilterOutcome {
    let fa = stats.frame_area.max(1) as f64;
    let fractions: Vec<f64> = stats.areas.iter().map(|&a| a as f64 / fa).collect();
    let pass = !fractions.is_empty() && fractions.iter().all(|&f| (lo..=hi).contains(&f));
    let mid = 0.5 * (lo + hi);
    let value = fractions
        .iter()
        .copied()
        .max_by(|a, b| (a - mid).abs().total_cmp(&(b - mid).abs()))
        .unwrap_or(0.0);
    FilterOutcome { pass, value }
}

/// Mean absolute difference between two frames over all channels.
pub fn frame_difference(video: &VideoClip, a: usize, b: usize) -> f64 {
    let (fa, fb) = (video.frame(a), video.frame(b));
    fa.iter().zip(fb).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / fa.len().max(1) as f64
}

/// Frames `t` whose difference from frame `t − 1` exceeds `tau`.
pub fn detect_scene_transitions(video: &VideoClip, tau: f64) -> Vec<usize> {
    (1..video.frames()).filter(|&t| frame_difference(video, t - 1, t) > tau).collect()
}

/// Splits `[0, total)` at the given cut indices.
pub fn segments_from_cuts(total: usize, cuts: &[usize]) -> Vec<(usize, usize)> {
    let mut bounds = vec![0];
    bounds.extend(cuts.iter().copied().filter(|&c| c > 0 && c < total));
    bounds.push(total);
    bounds.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[0], w[1])).collect()
}

/// Cuts each segment into consecutive `interval_s·fps`-frame chunks, keeping
/// a trailing chunk only if it lasts at least `min_s` seconds.
pub fn split_clips(segments: &[(usize, usize)], fps: f32, interval_s: f64, min_s: f64) -> Vec<(usize, usize)> {
    let chunk = ((interval_s * fps as f64).round() as usize).max(1);
    let min_len = (min_s * fps as f64).ceil() as usize;
    let mut out = Vec::new();
    for &(s, e) in segments {
        let mut a = s;
        while a < e {
            let b = (a + chunk).min(e);
            if b - a >= min_len {
                out.push((a, b));
            }
            a = b;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionScores {
    pub aesthetic: f64,
    pub motion: f64,
    pub safety: f64,
}

/// A named per-clip score.
pub trait Scorer {
    fn name(&self) -> &'static str;
    fn score(&self, video: &VideoClip) -> f64;
}

/// Luminance-histogram entropy (64 bins) divided by its maximum.
#[derive(Debug, Clone, Copy, Default)]
pub struct AestheticProxy;

const LUMA_BINS: usize = 64;

impl Scorer for AestheticProxy {
    fn name(&self) -> &'static str {
        "aesthetic"
    }

    fn score(&self, video: &VideoClip) -> f64 {
        let mut hist = [0usize; LUMA_BINS];
        let plane = video.height() * video.width();
        for t in 0..video.frames() {
            let f = video.frame(t);
            for i in 0..plane {
                let l = 0.299 * f[i] as f64 + 0.587 * f[plane + i] as f64 + 0.114 * f[2 * plane + i] as f64;
                hist[((l * LUMA_BINS as f64) as usize).min(LUMA_BINS - 1)] += 1;
            }
        }
        let n: usize = hist.iter().sum();
        if n == 0 {
            return 0.0;
        }
        let h: f64 = hist
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.ln()
            })
            .sum();
        h / (LUMA_BINS as f64).ln()
    }
}

/// Mean absolute inter-frame difference.
#[derive(Debug, Clone, Copy, Default)]
pub struct MotionScore;

impl Scorer for MotionScore {
    fn name(&self) -> &'static str {
        "motion"
    }

    fn score(&self, video: &VideoClip) -> f64 {
        if video.frames() < 2 {
            return 0.0;
        }
        (1..video.frames()).map(|t| frame_difference(video, t - 1, t)).sum::<f64>() / (video.frames() - 1) as f64
    }
}

/// Content safety stand-in: every clip scores 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct SafetyPass;

impl Scorer for SafetyPass {
    fn name(&self) -> &'static str {
        "safety"
    }

    fn score(&self, _video: &VideoClip) -> f64 {
        1.0
    }
}

pub fn selection_scores(video: &VideoClip) -> SelectionScores {
    SelectionScores {
        aesthetic: AestheticProxy.score(video),
        motion: MotionScore.score(video),
        safety: SafetyPass.score(video),
    }
}

/// Minimum (and for motion, maximum) accepted scores; defaults accept everything.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionThresholds {
    pub min_aesthetic: f64,
    pub min_motion: f64,
    pub max_motion: f64,
    pub min_safety: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        Self {
            min_aesthetic: 0.0,
            min_motion: 0.0,
            max_motion: f64::INFINITY,
            min_safety: 0.0,
        }
    }
}

impl SelectionThresholds {
    /// `None` if accepted, otherwise the reason.
    pub fn reject_reason(&self, s: &SelectionScores) -> Option<String> {
        if s.aesthetic < self.min_aesthetic {
            Some(format!("aesthetic {:.4} < {}", s.aesthetic, self.min_aesthetic))
        } else if s.motion < self.min_motion {
            Some(format!("motion {:.4} < {}", s.motion, self.min_motion))
        } else if s.motion > self.max_motion {
            Some(format!("motion {:.4} > {}", s.motion, self.max_motion))
        } else if s.safety < self.min_safety {
            Some(format!("safety {:.4} < {}", s.safety, self.min_safety))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, Background, SceneSpec, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(areas: &[usize], frame_area: usize) -> MaskStats {
        MaskStats { areas: areas.to_vec(), frame_area }
    }

    fn static_noise(frames: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.random()).collect();
        VideoClip::new(frames, 16, 16, 8.0, frame.repeat(frames)).unwrap()
    }

    #[test]
    fn variation_boundaries() {
        let a = mask_variation_filter(&stats(&[100, 110], 400), 0.2);
        assert!(a.pass && (a.value - 0.1).abs() < 1e-12);
        let b = mask_variation_filter(&stats(&[100, 120], 400), 0.2);
        assert!(!b.pass && (b.value - 0.2).abs() < 1e-12);
        assert_eq!(mask_variation(&stats(&[50, 50, 50], 400)), 0.0);
        assert_eq!(mask_variation(&stats(&[0, 5], 400)), 5.0);
        assert_eq!(mask_variation(&stats(&[7], 400)), 0.0);
        assert!((mask_variation(&stats(&[100, 90, 99], 400)) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn coverage_boundaries() {
        assert!(coverage_filter(&stats(&[50, 50], 100), 0.3, 0.7).pass);
        assert!(!coverage_filter(&stats(&[50, 25], 100), 0.3, 0.7).pass);
        assert!(coverage_filter(&stats(&[30, 70], 100), 0.3, 0.7).pass);
        assert!(!coverage_filter(&stats(&[29], 100), 0.3, 0.7).pass);
        assert!(!coverage_filter(&stats(&[71], 100), 0.3, 0.7).pass);
        assert!(!coverage_filter(&stats(&[], 100), 0.3, 0.7).pass);
        assert_eq!(coverage_filter(&stats(&[50, 25], 100), 0.3, 0.7).value, 0.25);
    }

    #[test]
    fn static_video_has_no_cuts() {
        assert!(detect_scene_transitions(&static_noise(5, 1), 0.3).is_empty());
    }

    #[test]
    fn unrelated_noise_clips_cut_once_at_junction() {
        let v = VideoClip::concat(&[static_noise(4, 1), static_noise(3, 2)]).unwrap();
        let d = frame_difference(&v, 3, 4);
        assert!((d - 1.0 / 3.0).abs() < 0.03, "noise difference {d}");
        assert_eq!(detect_scene_transitions(&v, 0.3), vec![4]);
    }

    #[test]
    fn smooth_translation_has_no_cuts() {
        let spec = SceneSpec {
            shape: Shape::Circle,
            color: 0,
            start: (6.0, 6.0),
            velocity: (1.0, 1.0),
            background: Background::Noise { seed: 3 },
            size: 4.0,
        };
        let (v, _, _) = generate_synthetic(&spec, 12, 24, 24, 8.0).unwrap();
        assert!(detect_scene_transitions(&v, 0.3).is_empty());
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_clips(&[(0, 250)], 10.0, 10.0, 6.0), vec![(0, 100), (100, 200)]);
        assert_eq!(split_clips(&[(0, 60)], 10.0, 10.0, 6.0), vec![(0, 60)]);
        assert!(split_clips(&[(0, 40)], 10.0, 10.0, 6.0).is_empty());
        assert_eq!(split_clips(&[(0, 160)], 10.0, 10.0, 6.0), vec![(0, 100), (100, 160)]);
        assert_eq!(split_clips(&[(0, 50), (50, 120)], 10.0, 10.0, 6.0), vec![(50, 120)]);
    }

    #[test]
    fn segments_from_cut_points() {
        assert_eq!(segments_from_cuts(10, &[]), vec![(0, 10)]);
        assert_eq!(segments_from_cuts(10, &[3, 7]), vec![(0, 3), (3, 7), (7, 10)]);
        assert_eq!(segments_from_cuts(10, &[0, 10]), vec![(0, 10)]);
    }

    #[test]
    fn selection_score_definitions() {
        let still = VideoClip::filled(4, 8, 8, 8.0, 0.4);
        let s = selection_scores(&still);
        assert_eq!((s.aesthetic, s.motion, s.safety), (0.0, 0.0, 1.0));
        let a = VideoClip::filled(1, 8, 8, 8.0, 0.2);
        let b = VideoClip::filled(1, 8, 8, 8.0, 0.3);
        let pair = VideoClip::concat(&[a, b]).unwrap();
        assert!((MotionScore.score(&pair) - 0.1).abs() < 1e-6);
        assert!(AestheticProxy.score(&static_noise(2, 5)) > 0.9);
    }

    #[test]
    fn thresholds_report_reasons() {
        let t = SelectionThresholds { min_motion: 0.05, ..Default::default() };
        let s = SelectionScores { aesthetic: 0.5, motion: 0.01, safety: 1.0 };
        assert!(t.reject_reason(&s).unwrap().starts_with("motion"));
        assert!(SelectionThresholds::default().reject_reason(&s).is_none());
    }
}
