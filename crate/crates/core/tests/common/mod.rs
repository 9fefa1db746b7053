#![allow(dead_code)]

use mvp_core::harness::{RunConfig, Strategy};

/// A stream small enough for a full run to take well under a second.
pub fn small_config(strategy: Strategy, seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.strategy = strategy;
    c.stream.tasks_per_family = 2;
    c.stream.d_img = 8;
    c.stream.d_text = 8;
    c.model.d_tok = 8;
    c.model.hidden = 32;
    c.model.n_vocab = 8;
    c.moe.n_experts = 4;
    c.moe.k = 2;
    c.train.epochs = 2;
    c.train.train_samples = 64;
    c.train.eval_samples = 64;
    c.prune.steps = 20;
    c.finetune.n_per_task = 32;
    c.finetune.epochs = 1;
    c.pretrain.samples_per_task = 512;
    c
}
