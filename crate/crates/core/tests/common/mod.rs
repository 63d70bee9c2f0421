#![allow(dead_code)]

use plugdit::backbone::{ModelInput, TextContext};
use plugdit::config::{BackboneConfig, ExperimentConfig};
use plugdit::numerics::{Rng, Tensor};
use plugdit::schedule::Timestep;

/// A backbone small enough for finite differences.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch: 4,
        d_model: 8,
        heads: 2,
        depth: 4,
        ffn_expansion: 2,
        text_vocab: 32,
        text_len: 3,
        ..Default::default()
    }
}

pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone = tiny_backbone();
    cfg.schedule.timesteps = 20;
    cfg.schedule.sample_steps = 4;
    cfg.pretrain.batch_size = 4;
    cfg.pretrain.iterations = 10;
    cfg.train.batch_size = 4;
    cfg.train.iterations = 10;
    cfg
}

/// Random generate-mode or task-mode input for `cfg`.
pub fn random_input(cfg: &BackboneConfig, batch: usize, channels: usize, seed: u64) -> ModelInput {
    let mut rng = Rng::new(seed);
    let z = rng.normal_tensor(&[batch, channels, cfg.image_size, cfg.image_size]);
    let times = (0..batch).map(|_| Timestep::Discrete(rng.below(20) as usize)).collect();
    let text = (0..batch)
        .map(|_| {
            let n = rng.below(cfg.text_len as u64 + 1) as usize;
            let toks: Vec<usize> = (0..n)
                .map(|_| 1 + rng.below(cfg.text_vocab as u64 - 1) as usize)
                .collect();
            TextContext::new(&toks, cfg.text_len, cfg.text_vocab).unwrap()
        })
        .collect();
    ModelInput { z, times, text }
}

pub fn to_f64(input: &ModelInput) -> ModelInput<f64> {
    ModelInput {
        z: input.z.cast(),
        times: input.times.clone(),
        text: input.text.clone(),
    }
}

pub fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub mod gradcheck;
pub mod oracles;
