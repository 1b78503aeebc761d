//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use echo_lora::adapters::{AdapterConfig, AdapterKind};
use echo_lora::backbone::{BackboneConfig, Projection};
use echo_lora::data::{gen_mixture, Batch, DataConfig, Sample, Task};
use echo_lora::echo::EchoConfig;
use echo_lora::model::{Model, ModelConfig};
use echo_lora::rng::normal_vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 20;

/// Four layers, width 8, rank 2: under 2k trainable parameters with echo.
pub fn micro_config(kind: AdapterKind) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: VOCAB,
            max_seq_len: 16,
            seed: 3,
        },
        adapter: AdapterConfig {
            kind,
            rank: 2,
            alpha: 4.0,
            dropout: 0.1,
            projections: Projection::ALL.to_vec(),
            layers: vec![],
        },
        echo: Some(EchoConfig {
            source_layers: vec![3],
            target_layers: vec![1],
            target_projections: vec![Projection::Q, Projection::V],
            bottleneck_dim: 4,
            gate_bias_init: -2.0,
            lambda_init: 1.0,
            answer_only_mask: true,
        }),
    }
}

/// Small toy backbone: deep enough for the default layer choice.
pub fn toy_config() -> ModelConfig {
    let mut cfg = ModelConfig { echo: Some(EchoConfig::default()), ..ModelConfig::default() };
    cfg.backbone.d_model = 32;
    cfg.backbone.d_ff = 64;
    cfg.backbone.vocab_size = VOCAB;
    cfg.backbone.max_seq_len = 16;
    cfg.adapter.rank = 4;
    cfg.echo.as_mut().unwrap().bottleneck_dim = 8;
    cfg
}

pub fn data_config() -> DataConfig {
    DataConfig { tasks: Task::ALL.to_vec(), train_per_task: 4, eval_per_task: 4, prompt_len: 3, modulus: 5 }
}

pub fn samples(per_task: usize, seed: u64) -> Vec<Sample> {
    gen_mixture(&Task::ALL, per_task, &data_config(), VOCAB, seed).unwrap()
}

pub fn batch(samples: &[Sample], max_seq_len: usize) -> Batch {
    let refs: Vec<&Sample> = samples.iter().collect();
    Batch::new(&refs, VOCAB, max_seq_len).unwrap()
}

/// Overwrites every trainable tensor with Gaussian noise so no gradient is
/// trivially zero (fresh LoRA B and echo output layers start at zero).
pub fn randomize_trainable(model: &mut Model, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.trainable_tensors_mut() {
        let noise = normal_vec(&mut rng, t.numel(), std);
        for (x, n) in t.data_mut().iter_mut().zip(noise) {
            *x += n;
        }
    }
}

pub fn flat_params(model: &Model) -> Vec<f64> {
    model.trainable_tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

pub fn set_flat_params(model: &mut Model, values: &[f64]) {
    let mut offset = 0;
    for (_, t) in model.trainable_tensors_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, values.len());
}

pub fn flat_grads(model: &Model) -> Vec<f64> {
    model
        .trainable_tensors()
        .iter()
        .flat_map(|(_, t)| t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect()
}
