#![allow(dead_code)]

use echo_harness::config::RunConfig;

/// A few seconds of training: small backbone, 16 samples per task, 2 epochs.
pub const TINY_TOML: &str = r#"
[backbone]
n_layers = 6
d_model = 16
n_heads = 2
d_ff = 32
vocab_size = 24
max_seq_len = 12

[adapter]
rank = 2
alpha = 4.0

[echo]
source_layers = [-2, -1]
target_layers = [1, 2]
bottleneck_dim = 4

[data]
train_per_task = 16
eval_per_task = 8
modulus = 5

[train]
epochs = 2
batch_size = 8
"#;

pub fn tiny() -> RunConfig {
    RunConfig::parse(TINY_TOML, "tiny").unwrap()
}
