#![allow(dead_code)]

use oltqa_core::autodiff::Gradients;
use oltqa_core::config::Config;
use oltqa_core::params::{Bound, ParamSet};
use oltqa_core::task_registry::{Format, QAInstance, Split};
use std::path::Path;

pub fn desk_config() -> Config {
    Config::load(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml"))).expect("desk config")
}

/// Desk config shrunk further for tests that only need the mechanics.
pub fn tiny_config() -> Config {
    desk_config()
        .with_overrides(&[
            "synthetic.train_per_task=60".into(),
            "synthetic.test_per_task=4".into(),
            "curation.head_budget=60".into(),
            "train.stage1_epochs=1".into(),
            "train.epochs=2".into(),
            "train.validation_subsample=8".into(),
            "train.candidate_subsample=4".into(),
            "miner.candidates=16".into(),
            "miner.retrieve=6".into(),
            "miner.hints=2".into(),
        ])
        .expect("tiny overrides")
}

pub fn inst(task: &str, offset: usize, context: &str, question: &str, answer: &str) -> QAInstance {
    QAInstance {
        task_id: task.into(),
        format: Format::Abstractive,
        context: context.into(),
        question: question.into(),
        answer: answer.into(),
        options: None,
        split: Split::Train,
        offset,
    }
}

/// Sum of absolute gradient entries that reached `set` through `bound`.
pub fn grad_mass(grads: &Gradients, bound: &Bound, set: &ParamSet) -> f64 {
    set.ids()
        .filter_map(|id| grads.get(bound.var(id)))
        .map(|g| g.iter().map(|v| v.abs()).sum::<f64>())
        .sum()
}
