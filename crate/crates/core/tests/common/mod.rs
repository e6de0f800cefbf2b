#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svcn_core::data::{make_pairs, samples, FrameSpec, Pair, Sample};
use svcn_core::lidar::PolarPattern;
use svcn_core::scene::{gen_scene, SceneSpec};
use svcn_core::svcn::SvcnConfig;
use svcn_core::unet::LevelSpec;

pub fn tiny_levels() -> LevelSpec {
    LevelSpec { encoder: vec![[4, 4]; 7], decoder: vec![[4, 4]; 6] }
}

pub fn tiny_svcn() -> SvcnConfig {
    SvcnConfig { levels: tiny_levels(), ..Default::default() }
}

pub fn small_scene(seed: u64) -> SceneSpec {
    SceneSpec { extent: 6.0, density: 100.0, seed, ..Default::default() }
}

/// `frames` ring-32 frames from each of `scenes` small scenes.
pub fn small_pairs(scenes: u64, frames: usize, seed: u64) -> Vec<Pair> {
    let pattern = PolarPattern::ring32();
    let spec = FrameSpec { frames_per_scene: frames, ..Default::default() };
    let mut out = Vec::new();
    for i in 0..scenes {
        let scene = gen_scene(&small_scene(seed * 1000 + i)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + i);
        out.extend(make_pairs(&scene.cloud, &pattern, &spec, &mut rng).unwrap());
    }
    out
}

pub fn small_samples(scenes: u64, frames: usize, seed: u64) -> Vec<Sample> {
    samples(&small_pairs(scenes, frames, seed), 0.2).unwrap()
}

/// One random corruption of `bytes`: a bit flip, a truncation, an inserted
/// byte, or a random 8-byte overwrite (which hits length fields often).
pub fn mutate(bytes: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    use rand::Rng;
    let mut b = bytes.to_vec();
    if b.is_empty() {
        return vec![rng.gen()];
    }
    match rng.gen_range(0..4) {
        0 => {
            let i = rng.gen_range(0..b.len());
            b[i] ^= 1 << rng.gen_range(0..8);
        }
        1 => b.truncate(rng.gen_range(0..b.len())),
        2 => b.insert(rng.gen_range(0..=b.len()), rng.gen()),
        _ => {
            let i = rng.gen_range(0..b.len());
            let end = (i + 8).min(b.len());
            let word: [u8; 8] = rng.gen();
            b[i..end].copy_from_slice(&word[..end - i]);
        }
    }
    b
}
