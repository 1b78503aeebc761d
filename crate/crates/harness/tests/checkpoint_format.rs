mod common;

use common::tiny;
use echo_harness::checkpoint::Checkpoint;
use echo_harness::HarnessError;
use echo_lora::model::Model;

fn trained_checkpoint() -> (Checkpoint, Model) {
    let cfg = tiny();
    let outcome = echo_harness::runner::train(&cfg, None).unwrap();
    (Checkpoint::from_model(&outcome.model, &cfg), outcome.model)
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, model) = trained_checkpoint();
    let first = dir.path().join("a.bin");
    let second = dir.path().join("b.bin");
    ckpt.save(&first).unwrap();
    let loaded = Checkpoint::load(&first).unwrap();
    loaded.save(&second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());

    let restored = loaded.to_model().unwrap();
    let a = model.named_tensors();
    let b = restored.named_tensors();
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert!(ta.bitwise_eq(tb), "{na}");
    }
    assert!(!restored.backbone.tok_emb.requires_grad());
    assert!(restored.trainable_tensors().iter().all(|(_, t)| t.requires_grad()));
}

#[test]
fn tensor_count_follows_the_config() {
    let cfg = tiny();
    let (ckpt, _) = trained_checkpoint();
    let b = &cfg.backbone;
    // Embeddings, final norm, head, and nine tensors per block.
    let backbone = 4 + 9 * b.n_layers;
    let adapters = 2 * b.n_layers * cfg.adapter.projections.len();
    let echo = 6 * cfg.echo.target_layers.len() * cfg.echo.target_projections.len();
    assert_eq!(ckpt.tensors.len(), backbone + adapters + echo);
    let deploy = ckpt.strip_echo().unwrap();
    assert_eq!(deploy.tensors.len(), backbone + adapters);
    assert!(!deploy.has_echo());
    assert!(!deploy.config().unwrap().echo.enabled);
}

#[test]
fn every_single_byte_corruption_is_detected() {
    let (ckpt, _) = trained_checkpoint();
    let bytes = ckpt.to_bytes();
    let step = (bytes.len() / 97).max(1);
    for offset in (0..bytes.len()).step_by(step) {
        let mut bad = bytes.clone();
        bad[offset] ^= 0x5A;
        match Checkpoint::from_bytes(&bad) {
            Err(HarnessError::Checksum { offset: at }) => assert_eq!(at as usize, bytes.len() - 4),
            other => panic!("corruption at {offset} gave {other:?}"),
        }
    }
}

#[test]
fn truncated_files_fail_with_an_offset() {
    let (ckpt, _) = trained_checkpoint();
    let bytes = ckpt.to_bytes();
    for keep in [0, 3, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..keep]).unwrap_err();
        assert!(matches!(err, HarnessError::Checksum { .. } | HarnessError::Truncated { .. }), "{keep}: {err:?}");
        assert!(err.to_string().contains("offset"), "{err}");
    }
}

#[test]
fn config_hash_mismatch_is_reported() {
    let (ckpt, _) = trained_checkpoint();
    assert!(!ckpt.warn_on_config_mismatch(&tiny()));
    let mut other = tiny();
    other.objective.lr = 1e-3;
    assert!(ckpt.warn_on_config_mismatch(&other));
}
