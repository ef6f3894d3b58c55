//! Corpus construction: seeded clips, their latents, and cached
//! discrepancy maps.
//!
//! Discrepancy maps depend only on the clean latent, so they are
//! computed once per clip at encode time and reused by every training
//! step.

use crate::error::Result;
use crate::ltd::{ltd_map, DiscrepancyTensor};
use crate::rng::Rng;
use crate::synthetic::{generate, pseudo_encode, SceneSpec};
use crate::tensor::{LatentVideo, PixelVideo};

use super::config::ExperimentConfig;

/// Random-stream indices off the master seed; training draws must stay
/// bitwise identical between paired runs, so every purpose gets its own
/// stream.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const TIMESTEP: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SAMPLER: u64 = 6;
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub latent: LatentVideo,
    pub d: DiscrepancyTensor,
    pub d_mean: f64,
    pub label: usize,
    pub kind_name: &'static str,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub clips: Vec<Clip>,
    /// Mean discrepancy per latent frame, averaged over clips.
    pub frame_ltd: Vec<f64>,
    pub latent_dims: [usize; 4],
}

/// Per-clip seeds derived from the master seed's data stream.
pub fn clip_seeds(master_seed: u64, clips: usize) -> Vec<u64> {
    let mut rng = Rng::new(master_seed).stream(streams::DATA);
    (0..clips).map(|_| rng.next_u64()).collect()
}

/// Generate and label the pixel clips for a config.
pub fn pixel_clips(cfg: &ExperimentConfig) -> Result<Vec<(SceneSpec, PixelVideo, usize)>> {
    let seeds = clip_seeds(cfg.train.seed, cfg.data.clips);
    let mut out = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let spec = cfg.data.scene_spec(seed)?;
        let (video, label) = generate(&spec)?;
        out.push((spec, video, label));
    }
    Ok(out)
}

/// Encode the corpus and cache each clip's discrepancy map.
pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let latent_dims = cfg.latent_dims();
    let mut clips = Vec::with_capacity(cfg.data.clips);
    let mut frame_ltd = vec![0.0; latent_dims[0]];
    for (spec, video, label) in pixel_clips(cfg)? {
        let latent = pseudo_encode(&video, &cfg.encoder)?;
        let d = ltd_map(&latent, &cfg.ltd)?;
        let d_mean = d.tensor().reduce_mean();
        for (acc, m) in frame_ltd.iter_mut().zip(d.frame_means()) {
            *acc += m;
        }
        clips.push(Clip {
            latent,
            d,
            d_mean,
            label,
            kind_name: spec.kind.name(),
            seed: spec.seed,
        });
    }
    for v in frame_ltd.iter_mut() {
        *v /= clips.len() as f64;
    }
    Ok(Corpus {
        clips,
        frame_ltd,
        latent_dims,
    })
}
