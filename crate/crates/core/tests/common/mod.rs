#![allow(dead_code)]

use stationary_compat::harness::ExperimentConfig;
use stationary_compat::trainer::HocConfig;

/// A seconds-scale experiment: 3 tasks, replacement at the second one.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.simplex_k = 16;
    cfg.data.input_dim = 8;
    cfg.data.hidden = vec![16, 16];
    cfg.data.samples_per_class = 40;
    cfg.data.pretrain_samples_per_class = 60;
    cfg.data.eval_classes = 4;
    cfg.data.eval_samples_per_class = 20;
    cfg.sequence.tasks = 3;
    cfg.sequence.first_task_classes = 3;
    cfg.sequence.classes_per_task = 1;
    cfg.sequence.replacements = vec![1];
    cfg.sequence.pretrain_classes = vec![4, 6];
    cfg.sequence.memory_per_class = 5;
    let quick = HocConfig {
        learning_rate: 0.05,
        epochs: 4,
        batch_size: 32,
        lr_schedule: vec![],
        ..HocConfig::default()
    };
    cfg.hoc = quick.clone();
    cfg.pretrain = HocConfig { lambda: 1.0, ..quick };
    cfg.eval.def1_pairs = 2000;
    cfg
}
