use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::BackboneConfig;
use crate::model::ModelConfig;
use crate::video::{LatentClip, MaskClip, VideoClip};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn latent(dims: [usize; 4], seed: u64) -> LatentClip {
    let mut r = rng(seed);
    let n = dims.iter().product();
    LatentClip::from_data(dims, (0..n).map(|_| r.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

pub fn video(frames: usize, h: usize, w: usize, seed: u64) -> VideoClip {
    let mut r = rng(seed);
    let n = frames * 3 * h * w;
    VideoClip::new(frames, h, w, 8.0, (0..n).map(|_| r.random::<f32>()).collect()).unwrap()
}

pub fn mask(frames: usize, h: usize, w: usize, p: f64, seed: u64) -> MaskClip {
    let mut r = rng(seed);
    let n = frames * h * w;
    MaskClip::new(frames, h, w, (0..n).map(|_| r.random_bool(p) as u8).collect()).unwrap()
}

pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        n_layers: 2,
        d_model: 12,
        n_heads: 2,
        mlp_ratio: 2,
        ..BackboneConfig::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: tiny_backbone(),
        ..ModelConfig::default()
    }
}

pub fn tiny_examples(codec: &crate::codec::Codec, count: usize, seed: u64) -> Vec<crate::train::Example> {
    crate::data::synth::synthetic_corpus(seed, count, 4, 16, 16, 8.0, &Default::default())
        .unwrap()
        .into_iter()
        .map(|c| crate::train::Example::new(codec, c.video, c.mask, c.caption.0).unwrap())
        .collect()
}
