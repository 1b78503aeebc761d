//! Folding adapters into the backbone and dropping echo modules for deployment.

mod common;

use std::collections::BTreeMap;

use common::*;
use echo_lora::adapters::{strip_echo, AdapterKind};
use echo_lora::data::{greedy_decode, NextTokenPredictor};
use echo_lora::model::Model;
use echo_lora::rng::{stream, Stream};
use rand::Rng;

fn random_tokens(rng: &mut impl Rng, vocab: usize, max_len: usize) -> Vec<usize> {
    let len = rng.random_range(1..=max_len);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn merged_forward_matches_adapted_forward() {
    for kind in [AdapterKind::Lora, AdapterKind::Dora] {
        let mut cfg = toy_config();
        cfg.adapter.kind = kind;
        let mut model = Model::init(&cfg, 5).unwrap();
        randomize_trainable(&mut model, 6, 0.1);
        let merged = model.merged().unwrap();
        assert!(merged.adapters.is_empty());
        let mut rng = stream(99, Stream::Probe);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let tokens = random_tokens(&mut rng, VOCAB, cfg.backbone.max_seq_len);
            let a = model.logits(&tokens).unwrap();
            let b = merged.logits(&tokens).unwrap();
            worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
        }
        assert!(worst < 1e-9, "{kind}: merged deviates by {worst:e}");
    }
}

#[test]
fn stripped_model_generates_like_echo_off() {
    let cfg = toy_config();
    let mut model = Model::init(&cfg, 8).unwrap();
    randomize_trainable(&mut model, 9, 0.2);
    let stripped = model.strip_echo();
    assert!(stripped.echo.is_none());
    assert!(stripped.trainable_tensors().iter().all(|(n, _)| !n.starts_with("echo.")));
    let prompts = samples(5, 12);
    for s in prompts.iter().take(20) {
        let full = greedy_decode(&model, &s.prompt, 4).unwrap();
        let deployed = greedy_decode(&stripped, &s.prompt, 4).unwrap();
        assert_eq!(full, deployed);
        let a = model.logits(&s.prompt).unwrap();
        let b = stripped.logits(&s.prompt).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn tensor_map_strip_counts() {
    let model = Model::init(&toy_config(), 1).unwrap();
    let echo = model.echo.as_ref().unwrap();
    // Default config: two target layers × two projections.
    assert_eq!(echo.len(), 4);
    let named: BTreeMap<String, usize> = model.named_tensors().into_iter().map(|(n, t)| (n, t.numel())).collect();
    let echo_names = named.keys().filter(|n| n.starts_with("echo.")).count();
    assert_eq!(echo_names, 4 * 6);
    let required: Vec<String> = named.keys().filter(|n| n.starts_with("adapter.")).cloned().collect();
    let total = named.len();
    let stripped = strip_echo(named, &required).unwrap();
    assert_eq!(stripped.len(), total - echo_names);
    assert!(stripped.keys().all(|n| !n.starts_with("echo.")));

    let mut missing = stripped.clone();
    missing.remove(&required[0]);
    assert!(strip_echo(missing, &required).is_err());
}
