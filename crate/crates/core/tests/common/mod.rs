#![allow(dead_code)]

use trackgen::adversarial::CriticConfig;
use trackgen::content_vae::{ContentVae, ContentVaeConfig};
use trackgen::generator::{Generator, GeneratorConfig, Pipeline};
use trackgen::layers::ConvSpec;
use trackgen::motion_vae::{MotionVae, MotionVaeConfig};
use trackgen::preprocess::{BackgroundSource, MaskOptions, PreparedEpisode};
use trackgen::synth::{generate_episode, WorldConfig};
use trackgen::train::TrainConfig;

pub const N: usize = 4;
pub const H: usize = 16;
pub const W: usize = 16;

pub fn world() -> WorldConfig {
    WorldConfig {
        n: N,
        h: H,
        w: W,
        sprite_size: 4,
        num_objects: 1,
        velocity_range: 1,
        ..WorldConfig::default()
    }
}

pub fn episodes(count: u64, base_seed: u64) -> Vec<PreparedEpisode> {
    (0..count)
        .map(|i| {
            let e = generate_episode(&world(), base_seed + i).unwrap();
            PreparedEpisode::build(e.video, e.tracks, &BackgroundSource::Known(e.background.view()), MaskOptions::default())
                .unwrap()
        })
        .collect()
}

pub fn motion_cfg() -> MotionVaeConfig {
    MotionVaeConfig {
        n: N,
        h: H,
        w: W,
        latent_dim: 8,
        conv: ConvSpec::new(&[4, 8]),
        ..Default::default()
    }
}

pub fn content_cfg() -> ContentVaeConfig {
    ContentVaeConfig {
        h: H,
        w: W,
        latent_dim: 6,
        conv: ConvSpec::new(&[4, 8]),
        ..Default::default()
    }
}

pub fn generator_cfg() -> GeneratorConfig {
    GeneratorConfig {
        n: N,
        h: H,
        w: W,
        motion_latent_dim: 8,
        content_latent_dim: 6,
        noise_dim: 4,
        decoder_conv: ConvSpec::new(&[4, 8]),
        sr_hidden: 4,
        sr_noise_channels: 2,
    }
}

pub fn critic_cfg() -> CriticConfig {
    CriticConfig {
        n: N,
        h: H,
        w: W,
        conv: ConvSpec::new(&[4, 8]),
        critic_steps: 2,
        ..Default::default()
    }
}

pub fn train_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        learning_rate: 1e-3,
        seed,
        log_every: 1,
    }
}

/// Untrained but shape-consistent pipeline.
pub fn pipeline(seed: u64) -> Pipeline {
    Pipeline::new(
        MotionVae::new(motion_cfg(), seed).unwrap(),
        ContentVae::new(content_cfg(), seed + 1).unwrap(),
        Generator::new(generator_cfg(), seed + 2).unwrap(),
    )
    .unwrap()
}
