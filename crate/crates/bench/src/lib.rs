//! Shared fixtures for the criterion benches.

use refback::model::{init_params, ModelConfig, Parameters};
use refback::task::{generate_split, Split, TaskConfig};

/// Default-sized model and a batch of `n` generated token sequences.
pub fn fixture(d_model: usize, n: usize) -> (Parameters, Vec<Vec<u32>>) {
    let task = TaskConfig::default();
    let cfg = ModelConfig::new(d_model, task.vocabulary().len(), task.sequence_len());
    let params = init_params(&cfg, 0).expect("valid config");
    let data = generate_split(&task, Split::Train, n, 0).expect("valid task");
    let tokens = data.sequences.into_iter().map(|s| s.tokens).collect();
    (params, tokens)
}
