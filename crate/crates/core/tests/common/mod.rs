#![allow(dead_code)]

pub mod fd;

use modgap::config::RunConfig;

/// A run small enough for sub-second tests.
pub fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(seed);
    cfg.data.num_samples = 300;
    cfg.data.feature_dim = 4;
    cfg.model.hidden = vec![8];
    cfg.schedule.warmup_epochs = 3;
    cfg.schedule.adaptive_steps = 2;
    cfg.schedule.adaptive_epochs = 2;
    cfg.schedule.batch_size = 32;
    cfg.finetune.epochs = 2;
    cfg
}
