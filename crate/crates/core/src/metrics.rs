//! Region-restricted fidelity metrics and identity drift.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::longvideo::ClipPlan;
use crate::video::{MaskClip, VideoClip};

pub const PSNR_CAP_DB: f64 = 99.0;
const PSNR_CAP_MSE: f64 = 1e-10;
const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Unmasked,
    Masked,
    Full,
}

impl Region {
    #[inline]
    fn selects(self, masked: bool) -> bool {
        match self {
            Region::Unmasked => !masked,
            Region::Masked => masked,
            Region::Full => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
    pub pixel_count: usize,
    pub region: Region,
}

fn check(gen: &VideoClip, reference: &VideoClip, mask: &MaskClip) -> Result<()> {
    if gen.dims() != reference.dims() {
        return Err(Error::Extent {
            what: "metric inputs",
            lhs: gen.dims().to_vec(),
            rhs: reference.dims().to_vec(),
        });
    }
    mask.check_aligned(reference)
}

/// Sums of `|d|` and `d²` over selected pixels and all channels, plus the pixel count.
fn diff_sums(gen: &VideoClip, reference: &VideoClip, mask: &MaskClip, region: Region) -> Result<(f64, f64, usize)> {
    check(gen, reference, mask)?;
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for t in 0..gen.frames() {
        for y in 0..gen.height() {
            for x in 0..gen.width() {
                if region.selects(mask.get(t, y, x)) {
                    n += 1;
                    for c in 0..3 {
                        let d = gen.get(t, c, y, x) as f64 - reference.get(t, c, y, x) as f64;
                        abs += d.abs();
                        sq += d * d;
                    }
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Invalid(format!("{region:?} region is empty")));
    }
    Ok((abs, sq, n))
}

pub fn region_mse(gen: &VideoClip, reference: &VideoClip, mask: &MaskClip, region: Region) -> Result<f64> {
    let (_, sq, n) = diff_sums(gen, reference, mask, region)?;
    Ok(sq / (3 * n) as f64)
}

pub fn region_mae(gen: &VideoClip, reference: &VideoClip, mask: &MaskClip, region: Region) -> Result<f64> {
    let (abs, _, n) = diff_sums(gen, reference, mask, region)?;
    Ok(abs / (3 * n) as f64)
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_CAP_MSE {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn region_psnr(gen: &VideoClip, reference: &VideoClip, mask: &MaskClip, region: Region) -> Result<f64> {
    Ok(psnr_from_mse(region_mse(gen, reference, mask, region)?))
}

/// Normalized 7×7 Gaussian window (σ = 1.5), row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// SSIM of two equally sized patches under weights `w`.
pub fn ssim_patch(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let mu = |v: &[f64]| v.iter().zip(w).map(|(x, k)| x * k).sum::<f64>();
    let (ma, mb) = (mu(a), mu(b));
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..w.len() {
        let (da, db) = (a[i] - ma, b[i] - mb);
        va += w[i] * da * da;
        vb += w[i] * db * db;
        cov += w[i] * da * db;
    }
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean local SSIM over windows lying entirely inside the region; channels
/// are averaged per frame, then frames are averaged.
pub fn region_ssim(gen: &VideoClip, reference: &VideoClip, mask: &MaskClip, region: Region) -> Result<f64> {
    check(gen, reference, mask)?;
    let (h, w) = (gen.height(), gen.width());
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Invalid(format!("frames {h}x{w} smaller than the SSIM window")));
    }
    let win = gaussian_window();
    let mut frame_scores = Vec::new();
    let (mut pa, mut pb) = (vec![0.0; k * k], vec![0.0; k * k]);
    for t in 0..gen.frames() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let inside = (0..k).all(|dy| (0..k).all(|dx| region.selects(mask.get(t, y0 + dy, x0 + dx))));
                if !inside {
                    continue;
                }
                let mut s = 0.0;
                for c in 0..3 {
                    for dy in 0..k {
                        for dx in 0..k {
                            pa[dy * k + dx] = gen.get(t, c, y0 + dy, x0 + dx) as f64;
                            pb[dy * k + dx] = reference.get(t, c, y0 + dy, x0 + dx) as f64;
                        }
                    }
                    s += ssim_patch(&pa, &pb, &win);
                }
                sum += s / 3.0;
                count += 1;
            }
        }
        if count > 0 {
            frame_scores.push(sum / count as f64);
        }
    }
    if frame_scores.is_empty() {
        return Err(Error::Invalid(format!("no SSIM window fits inside the {region:?} region")));
    }
    Ok(frame_scores.iter().sum::<f64>() / frame_scores.len() as f64)
}

pub fn region_report(gen: &VideoClip, reference: &VideoClip, mask: &MaskClip, region: Region) -> Result<RegionMetricReport> {
    let (abs, sq, n) = diff_sums(gen, reference, mask, region)?;
    let mse = sq / (3 * n) as f64;
    Ok(RegionMetricReport {
        psnr_db: psnr_from_mse(mse),
        ssim: region_ssim(gen, reference, mask, region)?,
        mse,
        mae: abs / (3 * n) as f64,
        pixel_count: n,
        region,
    })
}

/// Mean RGB over the masked pixels of frames `[s, e)`.
pub fn masked_mean_color(video: &VideoClip, mask: &MaskClip, s: usize, e: usize) -> Result<[f64; 3]> {
    mask.check_aligned(video)?;
    let mut acc = [0f64; 3];
    let mut n = 0usize;
    for t in s..e {
        for y in 0..video.height() {
            for x in 0..video.width() {
                if mask.get(t, y, x) {
                    n += 1;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += video.get(t, c, y, x) as f64;
                    }
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Invalid(format!("masked region empty in frames {s}..{e}")));
    }
    Ok(acc.map(|a| a / n as f64))
}

/// Mean Euclidean distance between consecutive windows' masked mean colors.
pub fn id_drift(video: &VideoClip, mask: &MaskClip, plan: &ClipPlan) -> Result<f64> {
    let means = plan
        .windows
        .iter()
        .map(|&(s, e)| masked_mean_color(video, mask, s, e))
        .collect::<Result<Vec<_>>>()?;
    if means.len() < 2 {
        return Ok(0.0);
    }
    let total: f64 = means
        .windows(2)
        .map(|p| (0..3).map(|c| (p[1][c] - p[0][c]).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / (means.len() - 1) as f64)
}

pub const CSV_HEADER: &str = "name,psnr,ssim,lpips,mse,mae,clip_sim,clip_sim_m,fvid";

/// One report row: preservation metrics, then unavailable alignment and quality columns.
pub fn csv_row(name: &str, r: &RegionMetricReport) -> String {
    format!(
        "{name},{:.4},{:.6},n/a,{:.8},{:.8},n/a,n/a,n/a",
        r.psnr_db, r.ssim, r.mse, r.mae
    )
}

pub fn write_csv(w: &mut impl Write, rows: &[(String, RegionMetricReport)]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for (name, r) in rows {
        writeln!(w, "{}", csv_row(name, r))?;
    }
    Ok(())
}
