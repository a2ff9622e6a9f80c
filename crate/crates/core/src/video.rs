//! Pixel-space and latent-space clip types.

use crate::error::{Error, Result};

/// RGB frames `T×3×H×W` with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    pub fps: f32,
    data: Vec<f32>,
}

impl VideoClip {
    pub const CHANNELS: usize = 3;

    pub fn new(frames: usize, height: usize, width: usize, fps: f32, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "video extents must be positive, got {frames}x{height}x{width}"
            )));
        }
        if data.len() != frames * 3 * height * width {
            return Err(Error::Extent {
                what: "video data",
                lhs: vec![data.len()],
                rhs: vec![frames, 3, height, width],
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("video value {v} outside [0,1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            fps,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, fps: f32, v: f32) -> Self {
        Self::new(frames, height, width, fps, vec![v; frames * 3 * height * width])
            .expect("filled clip is well formed")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> [usize; 4] {
        [self.frames, 3, self.height, self.width]
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn frame_len(&self) -> usize {
        3 * self.height * self.width
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * 3 + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(t, c, y, x)]
    }

    /// Sets a value, clamping into `[0,1]`.
    #[inline]
    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(t, c, y, x);
        self.data[i] = v.clamp(0.0, 1.0);
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    /// Copies frames `[start, end)` into a new clip.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::Invalid(format!(
                "frame range [{start},{end}) outside clip of {} frames",
                self.frames
            )));
        }
        let fl = self.frame_len();
        Ok(Self {
            frames: end - start,
            height: self.height,
            width: self.width,
            fps: self.fps,
            data: self.data[start * fl..end * fl].to_vec(),
        })
    }

    pub fn set_frame(&mut self, t: usize, frame: &[f32]) {
        let fl = self.frame_len();
        assert_eq!(frame.len(), fl, "frame length");
        self.data[t * fl..(t + 1) * fl].copy_from_slice(frame);
    }

    /// Concatenates clips along time; spatial extents must agree.
    pub fn concat(parts: &[VideoClip]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of no clips".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::Extent {
                    what: "concat",
                    lhs: first.dims().to_vec(),
                    rhs: p.dims().to_vec(),
                });
            }
            frames += p.frames;
            data.extend_from_slice(&p.data);
        }
        Self::new(frames, first.height, first.width, first.fps, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }
}

/// Binary masks `T×1×H×W`; 1 marks the region to inpaint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskClip {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Invalid("mask extents must be positive".into()));
        }
        if data.len() != frames * height * width {
            return Err(Error::Extent {
                what: "mask data",
                lhs: vec![data.len()],
                rhs: vec![frames, 1, height, width],
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, v: u8) -> Self {
        Self::new(frames, height, width, vec![v.min(1); frames * height * width])
            .expect("filled mask is well formed")
    }

    /// Builds a mask by evaluating `f(t, y, x)` per pixel.
    pub fn from_fn(frames: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(frames * height * width);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(t, y, x) as u8);
                }
            }
        }
        Self {
            frames,
            height,
            width,
            data,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> [usize; 4] {
        [self.frames, 1, self.height, self.width]
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.data[(t * self.height + y) * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, v: bool) {
        self.data[(t * self.height + y) * self.width + x] = v as u8;
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_area(&self) -> usize {
        self.height * self.width
    }

    /// Per-frame count of mask pixels.
    pub fn areas(&self) -> Vec<usize> {
        (0..self.frames)
            .map(|t| self.frame(t).iter().map(|&v| v as usize).sum())
            .collect()
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::Invalid(format!(
                "frame range [{start},{end}) outside mask of {} frames",
                self.frames
            )));
        }
        let n = self.height * self.width;
        Self::new(end - start, self.height, self.width, self.data[start * n..end * n].to_vec())
    }

    pub fn clear_frame(&mut self, t: usize) {
        let n = self.height * self.width;
        self.data[t * n..(t + 1) * n].fill(0);
    }

    pub fn concat(parts: &[MaskClip]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of no masks".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::Extent {
                    what: "concat",
                    lhs: first.dims().to_vec(),
                    rhs: p.dims().to_vec(),
                });
            }
            frames += p.frames;
            data.extend_from_slice(&p.data);
        }
        Self::new(frames, first.height, first.width, data)
    }

    /// Checks that the mask is aligned with `video`.
    pub fn check_aligned(&self, video: &VideoClip) -> Result<()> {
        if (self.frames, self.height, self.width) != (video.frames(), video.height(), video.width()) {
            return Err(Error::Extent {
                what: "video/mask alignment",
                lhs: video.dims().to_vec(),
                rhs: self.dims().to_vec(),
            });
        }
        Ok(())
    }
}

/// Real-valued occupancy mask `T×1×H×W` with values in `[0,1]`, produced by
/// resampling a [`MaskClip`] to latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SoftMask {
    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> f32 {
        self.data[(t * self.height + y) * self.width + x]
    }
}

/// Latent clip `T×C'×H'×W'`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl LatentClip {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
        }
    }

    pub fn from_data(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Extent {
                what: "latent data",
                lhs: vec![data.len()],
                rhs: dims.to_vec(),
            });
        }
        Ok(Self {
            frames: dims[0],
            channels: dims[1],
            height: dims[2],
            width: dims[3],
            data,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(t, c, y, x)]
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        let fl = self.frame_len();
        Self {
            frames: end - start,
            data: self.data[start * fl..end * fl].to_vec(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_extents_and_values() {
        assert!(VideoClip::new(0, 2, 2, 8.0, vec![]).is_err());
        assert!(VideoClip::new(1, 2, 2, 8.0, vec![0.0; 11]).is_err());
        assert!(VideoClip::new(1, 1, 1, 8.0, vec![0.0, 1.5, 0.0]).is_err());
        assert!(MaskClip::new(1, 1, 2, vec![0, 2]).is_err());
        assert!(LatentClip::from_data([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn slicing_and_concat_are_inverse() {
        let data: Vec<f32> = (0..4 * 3 * 2 * 2).map(|i| i as f32 / 48.0).collect();
        let v = VideoClip::new(4, 2, 2, 8.0, data).unwrap();
        let parts = [v.slice(0, 1).unwrap(), v.slice(1, 4).unwrap()];
        assert_eq!(VideoClip::concat(&parts).unwrap(), v);
        assert!(v.slice(2, 2).is_err());
        assert!(v.slice(3, 5).is_err());

        let m = MaskClip::from_fn(3, 2, 3, |t, y, x| (t + y + x) % 2 == 0);
        let parts = [m.slice(0, 2).unwrap(), m.slice(2, 3).unwrap()];
        assert_eq!(MaskClip::concat(&parts).unwrap(), m);
    }

    #[test]
    fn indexing_is_row_major() {
        let mut v = VideoClip::filled(2, 3, 4, 8.0, 0.0);
        v.set(1, 2, 2, 3, 0.75);
        assert_eq!(v.data()[v.data().len() - 1], 0.75);
        assert_eq!(v.index(1, 0, 0, 0), 3 * 3 * 4);
        let z = LatentClip::zeros(2, 4, 3, 5);
        assert_eq!(z.index(1, 2, 1, 3), ((4 + 2) * 3 + 1) * 5 + 3);
    }

    #[test]
    fn mask_areas_and_clear() {
        let mut m = MaskClip::from_fn(2, 4, 4, |t, y, _| t == 0 || y < 2);
        assert_eq!(m.areas(), vec![16, 8]);
        m.clear_frame(0);
        assert_eq!(m.areas(), vec![0, 8]);
        assert_eq!(m.count(), 8);
    }

    #[test]
    fn alignment_check() {
        let v = VideoClip::filled(2, 4, 4, 8.0, 0.5);
        assert!(MaskClip::filled(2, 4, 4, 1).check_aligned(&v).is_ok());
        assert!(MaskClip::filled(3, 4, 4, 1).check_aligned(&v).is_err());
    }

    #[test]
    fn map_clamps() {
        let v = VideoClip::filled(1, 1, 1, 8.0, 0.9).map(|x| x + 0.5);
        assert!(v.data().iter().all(|&x| x == 1.0));
    }
}
