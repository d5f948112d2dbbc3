//! The desk-scale toy setup: 64x64 synthetic scenes, patch 8, C = 8, noisy
//! synthetic provider, 8 training and 8 held-out sequences.

use crate::error::Result;
use crate::providers::ProviderSpec;
use crate::sequence::FrameSequence;
use crate::synthscenes::{generate_sequence, mix, SceneConfig};
use crate::trainer::TrainConfig;

pub const TOY_TRAIN_SEQUENCES: usize = 8;
pub const TOY_VAL_SEQUENCES: usize = 8;
pub const TOY_NOISE: f64 = 0.25;
pub const TOY_MAX_STEPS: usize = 500;

/// Two independently moving objects and two that move with the camera.
pub fn toy_scene() -> SceneConfig {
    SceneConfig {
        static_objects: 2,
        ..SceneConfig::default()
    }
}

/// Scene seed of sequence `index` in split `split` (0 = train, 1 = held-out).
pub fn toy_sequence_seed(seed: u64, split: u64, index: usize) -> u64 {
    mix(&[seed, split, index as u64])
}

/// Training and held-out sequences for `seed`.
pub fn toy_suite(seed: u64) -> Result<(Vec<FrameSequence>, Vec<FrameSequence>)> {
    let scene = toy_scene();
    let make = |split: u64, count: usize, prefix: &str| -> Result<Vec<FrameSequence>> {
        (0..count)
            .map(|i| {
                let s = generate_sequence(&scene, toy_sequence_seed(seed, split, i))?;
                Ok(s.to_frame_sequence(format!("{prefix}_{i:02}")))
            })
            .collect()
    };
    Ok((make(0, TOY_TRAIN_SEQUENCES, "train")?, make(1, TOY_VAL_SEQUENCES, "val")?))
}

/// Training configuration of the toy setup; `seed` drives initialisation,
/// data order and provider noise.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        learning_rate: 2e-3,
        frames_per_batch: 8,
        seed,
        eval_every: 10,
        max_steps: Some(TOY_MAX_STEPS),
        provider: ProviderSpec::Synthetic { noise: TOY_NOISE, depth_cue_weight: 1.0, seed },
        ..TrainConfig::default()
    };
    cfg.epochs = TOY_MAX_STEPS.div_ceil(TOY_TRAIN_SEQUENCES);
    cfg
}
