#![allow(dead_code)]

use taskattn::ExperimentConfig;
use taskattn_core::meta::Algorithm;

/// A configuration small enough to train in well under a second.
pub fn tiny(algorithm: Algorithm, attention: bool) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(algorithm);
    c.attention = attention;
    c.family.split = [12, 6, 6];
    c.family.dim = 6;
    c.task.q_query = 3;
    c.train.batch_size = 3;
    c.train.steps = 2;
    c.train.iterations = 6;
    c.model.hidden = vec![8];
    c.model.lstm_hidden = 4;
    c.model.attention_width = 6;
    c.validation.every = 2;
    c.validation.tasks = 10;
    c.seed = 7;
    c
}

pub fn read(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
