//! The objects a configuration determines: class split, base learner,
//! attention network, and the deterministic task streams.

use taskattn_core::meta::{Adam, ClassifierEpisode, MetaModel};
use taskattn_core::models::{AttentionNet, BaseLearner};
use taskattn_core::tasks::{build_meta_splits, seed_stream, MetaSplit, Pool, Task};

use crate::checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
use crate::config::ExperimentConfig;
use crate::{HarnessError, Result};

/// Random-stream domains. A draw depends only on (seed, domain, index).
pub const DOMAIN_INIT: u64 = 1;
pub const DOMAIN_TRAIN: u64 = 2;
pub const DOMAIN_FRESH: u64 = 3;
pub const DOMAIN_VALIDATION: u64 = 4;
pub const DOMAIN_TEST: u64 = 5;
pub const DOMAIN_TRACE: u64 = 6;
pub const DOMAIN_TRACE_EVAL: u64 = 7;

pub struct Experiment {
    pub config: ExperimentConfig,
    pub split: MetaSplit,
    pub learner: BaseLearner,
    pub attention: Option<AttentionNet>,
}

impl Experiment {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let split = build_meta_splits(&config.family, &config.task, config.seed)?;
        let mut sizes = vec![config.family.dim];
        sizes.extend(&config.model.hidden);
        sizes.push(config.task.n_way);
        let learner = BaseLearner::new(sizes).map_err(|e| HarnessError::Config(e.to_string()))?;
        let attention = config
            .attention
            .then(|| AttentionNet::with_width(config.train.batch_size, config.model.attention_width));
        Ok(Self {
            config: config.clone(),
            split,
            learner,
            attention,
        })
    }

    /// Checkpoint at iteration 0.
    pub fn initial_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut rng = seed_stream(c.seed, DOMAIN_INIT, 0);
        let base = self.learner.init_params(&mut rng);
        let model = MetaModel::new(c.algorithm, base, c.train.inner_lr, c.model.lstm_hidden, &mut rng);
        let theta_adam = Adam::new(c.train.meta_lr, model.theta.len());
        let delta = self.attention.as_ref().map(|net| net.init_weights(&mut rng));
        let delta_adam = delta.as_ref().map(|d| Adam::new(c.train.attention_lr, d.len()));
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: c.clone(),
            iteration: 0,
            model,
            theta_adam,
            delta,
            delta_adam,
            rng: RngState {
                seed: c.seed,
                next_iteration: 0,
            },
        }
    }

    /// The meta-batch of iteration `index` in `domain`.
    pub fn batch(&self, domain: u64, index: u64) -> Result<Vec<Task>> {
        let mut rng = seed_stream(self.config.seed, domain, index);
        Ok(self
            .split
            .sample_task_batch(Pool::Train, &self.config.task, self.config.train.batch_size, &mut rng)?)
    }

    /// `n` tasks from `pool`, task `i` drawn from stream `i` of `domain`.
    pub fn tasks(&self, pool: Pool, domain: u64, n: usize) -> Result<Vec<Task>> {
        (0..n as u64)
            .map(|i| {
                let mut rng = seed_stream(self.config.seed, domain, i);
                Ok(self.split.sample_task(pool, &self.config.task, &mut rng)?)
            })
            .collect()
    }

    pub fn episodes<'a>(&'a self, tasks: &'a [Task]) -> Vec<ClassifierEpisode<'a>> {
        tasks
            .iter()
            .map(|task| ClassifierEpisode {
                learner: &self.learner,
                task,
            })
            .collect()
    }
}
