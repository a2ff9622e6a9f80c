//! The fixed patch-mean codec and the cubic mask downsampler.
//!
//! Encodes a synthetic clip, decodes it back, and shows how a binary mask
//! becomes a soft occupancy map at latent resolution.

use dualpaint::codec::{downsample_mask, make_masked_video, Codec, MASK_FILL};
use dualpaint::data::synth::{synthetic_corpus, SceneRanges};

fn main() -> anyhow::Result<()> {
    let codec = Codec::default();
    let clip = synthetic_corpus(3, 1, 4, 32, 32, 8.0, &SceneRanges::default())?.remove(0);
    let z = codec.encode(&clip.video)?;
    println!(
        "video {:?} -> latent {:?} (factor {}, bound ±{:.3})",
        clip.video.dims(),
        z.dims(),
        codec.spatial_factor(),
        codec.latent_bound()
    );

    // Decoding returns the block mean of every s×s patch.
    let back = codec.decode(&z, clip.video.fps)?;
    let s = codec.spatial_factor();
    let mut worst = 0f32;
    for t in 0..4 {
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let (by, bx) = (y / s * s, x / s * s);
                    let mut mean = 0.0;
                    for dy in 0..s {
                        for dx in 0..s {
                            mean += clip.video.get(t, c, by + dy, bx + dx);
                        }
                    }
                    mean /= (s * s) as f32;
                    worst = worst.max((back.get(t, c, y, x) - mean).abs());
                }
            }
        }
    }
    println!("decode(encode(v)) vs block mean: max abs err {worst:.2e}");

    let (h, w) = codec.latent_extent(32, 32)?;
    let soft = downsample_mask(&clip.mask, (h, w))?;
    println!("mask frame 0 at {h}x{w} (occupancy scaled to 0-9):");
    for y in 0..h {
        let row: String = (0..w).map(|x| char::from_digit((soft.get(0, y, x) * 9.0).round() as u32, 10).unwrap()).collect();
        println!("  {row}");
    }

    let masked = make_masked_video(&clip.video, &clip.mask)?;
    let hole = (0..32 * 32).filter(|i| clip.mask.get(0, i / 32, i % 32)).count();
    let filled = (0..32 * 32).filter(|i| (0..3).all(|c| masked.get(0, c, i / 32, i % 32) == MASK_FILL)).count();
    println!("frame 0: {hole} masked pixels, {filled} of them set to the fill value {MASK_FILL} in the masked video");
    Ok(())
}
