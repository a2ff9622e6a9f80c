//! Region-restricted quality metrics.
//!
//! A reference clip is corrupted only inside its mask, so the unmasked
//! region scores perfectly (PSNR at its cap, SSIM 1) while the masked and
//! full-frame scores degrade with the noise level. Rows are printed as CSV.

use dualpaint::data::synth::{synthetic_corpus, SceneRanges};
use dualpaint::metrics::{csv_row, region_report, Region, CSV_HEADER};
use dualpaint::video::{MaskClip, VideoClip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn corrupt(video: &VideoClip, mask: &MaskClip, sigma: f32, seed: u64) -> anyhow::Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma)?;
    let mut out = video.clone();
    for t in 0..video.frames() {
        for y in 0..video.height() {
            for x in 0..video.width() {
                if mask.get(t, y, x) {
                    for c in 0..3 {
                        let v = video.get(t, c, y, x) + noise.sample(&mut rng);
                        out.set(t, c, y, x, v.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn main() -> anyhow::Result<()> {
    let clip = synthetic_corpus(3, 1, 8, 32, 32, 8.0, &SceneRanges::default())?.remove(0);
    println!("{CSV_HEADER}");
    for sigma in [0.02f32, 0.1, 0.3] {
        let gen = corrupt(&clip.video, &clip.mask, sigma, 1)?;
        for region in [Region::Unmasked, Region::Masked, Region::Full] {
            let r = region_report(&gen, &clip.video, &clip.mask, region)?;
            let name = format!("sigma{sigma}_{region:?}").to_lowercase();
            println!("{}", csv_row(&name, &r));
        }
    }
    Ok(())
}
