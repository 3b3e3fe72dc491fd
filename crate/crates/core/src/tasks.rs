//! Synthetic episodic task families.
//!
//! A class is an isotropic Gaussian in `R^d` around a prototype drawn
//! uniformly from `[-scale, scale]^d`. Classes are partitioned once into
//! disjoint meta-train / meta-validation / meta-test pools, and N-way K-shot
//! tasks are sampled from a pool with labels relabelled to `0..N`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("{pool} pool has {size} classes, fewer than the {n_way} a task needs")]
    PoolTooSmall { pool: Pool, size: usize, n_way: usize },
    #[error("invalid family: {0}")]
    InvalidFamily(String),
}

/// N-way K-shot problem shape with Q query samples per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl TaskSpec {
    pub fn new(n_way: usize, k_shot: usize, q_query: usize) -> Result<Self, TaskError> {
        let spec = Self { n_way, k_shot, q_query };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.n_way < 2 {
            return Err(TaskError::InvalidSpec(format!("n_way = {} < 2", self.n_way)));
        }
        if self.k_shot < 1 || self.q_query < 1 {
            return Err(TaskError::InvalidSpec("k_shot and q_query must be at least 1".into()));
        }
        Ok(())
    }
}

/// Labelled rows: `inputs` is rows × d.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub support: Dataset,
    pub query: Dataset,
    /// Original class identities; `class_ids[j]` carries task label `j`.
    pub class_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Pool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pool::Train => "train",
            Pool::Val => "val",
            Pool::Test => "test",
        })
    }
}

/// Parameters of the Gaussian class family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianFamily {
    /// Class counts of the train, validation and test pools.
    pub split: [usize; 3],
    pub dim: usize,
    pub sigma: f64,
    pub prototype_scale: f64,
}

impl Default for GaussianFamily {
    fn default() -> Self {
        Self {
            split: [64, 16, 20],
            dim: 32,
            sigma: 0.35,
            prototype_scale: 1.0,
        }
    }
}

/// Frozen class prototypes and the disjoint class pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSplit {
    pub family: GaussianFamily,
    pub seed: u64,
    /// One prototype per class identity.
    pub prototypes: Vec<Vec<f64>>,
    pub train_pool: Vec<usize>,
    pub val_pool: Vec<usize>,
    pub test_pool: Vec<usize>,
}

/// Deterministic random stream for `(seed, domain, index)`.
///
/// Every sampling site derives its generator from this, so a draw depends
/// only on the master seed and its position, never on earlier draws.
pub fn seed_stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(domain)));
    rng.set_stream(index);
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn build_meta_splits(family: &GaussianFamily, spec: &TaskSpec, seed: u64) -> Result<MetaSplit, TaskError> {
    spec.validate()?;
    if family.dim == 0 || !(family.sigma >= 0.0) || !(family.prototype_scale > 0.0) {
        return Err(TaskError::InvalidFamily(format!("{family:?}")));
    }
    for (pool, &size) in [Pool::Train, Pool::Val, Pool::Test].iter().zip(&family.split) {
        if size < spec.n_way {
            return Err(TaskError::PoolTooSmall {
                pool: *pool,
                size,
                n_way: spec.n_way,
            });
        }
    }
    let n_classes: usize = family.split.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = (0..n_classes)
        .map(|_| {
            (0..family.dim)
                .map(|_| rng.gen_range(-family.prototype_scale..=family.prototype_scale))
                .collect()
        })
        .collect();
    let mut ids: Vec<usize> = (0..n_classes).collect();
    ids.shuffle(&mut rng);
    let [a, b, _] = family.split;
    Ok(MetaSplit {
        family: family.clone(),
        seed,
        prototypes,
        train_pool: ids[..a].to_vec(),
        val_pool: ids[a..a + b].to_vec(),
        test_pool: ids[a + b..].to_vec(),
    })
}

impl MetaSplit {
    pub fn pool(&self, pool: Pool) -> &[usize] {
        match pool {
            Pool::Train => &self.train_pool,
            Pool::Val => &self.val_pool,
            Pool::Test => &self.test_pool,
        }
    }

    pub fn dim(&self) -> usize {
        self.family.dim
    }

    /// One task: `n_way` distinct classes, `k_shot` support and `q_query`
    /// query draws per class, support rows first ordered by label.
    pub fn sample_task<R: Rng>(&self, pool: Pool, spec: &TaskSpec, rng: &mut R) -> Result<Task, TaskError> {
        spec.validate()?;
        let classes = self.pool(pool);
        if classes.len() < spec.n_way {
            return Err(TaskError::PoolTooSmall {
                pool,
                size: classes.len(),
                n_way: spec.n_way,
            });
        }
        let class_ids: Vec<usize> = classes.choose_multiple(rng, spec.n_way).copied().collect();
        let d = self.dim();
        let mut support = Vec::with_capacity(spec.n_way * spec.k_shot * d);
        let mut query = Vec::with_capacity(spec.n_way * spec.q_query * d);
        let mut support_labels = Vec::with_capacity(spec.n_way * spec.k_shot);
        let mut query_labels = Vec::with_capacity(spec.n_way * spec.q_query);
        for (label, &class) in class_ids.iter().enumerate() {
            let proto = &self.prototypes[class];
            for row in 0..spec.k_shot + spec.q_query {
                let (buf, labels) = if row < spec.k_shot {
                    (&mut support, &mut support_labels)
                } else {
                    (&mut query, &mut query_labels)
                };
                for &p in proto {
                    let noise: f64 = StandardNormal.sample(rng);
                    buf.push(p + self.family.sigma * noise);
                }
                labels.push(label);
            }
        }
        let to_dataset = |data: Vec<f64>, labels: Vec<usize>| Dataset {
            inputs: Tensor::matrix(labels.len(), d, data).expect("finite samples"),
            labels,
        };
        Ok(Task {
            support: to_dataset(support, support_labels),
            query: to_dataset(query, query_labels),
            class_ids,
        })
    }

    pub fn sample_task_batch<R: Rng>(
        &self,
        pool: Pool,
        spec: &TaskSpec,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Task>, TaskError> {
        (0..batch_size).map(|_| self.sample_task(pool, spec, rng)).collect()
    }
}

/// `(x − b)ᵀ A (x − b)` on the plane, A symmetric positive definite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTask {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl QuadraticTask {
    pub fn new(a: [[f64; 2]; 2], b: [f64; 2]) -> Result<Self, TaskError> {
        let task = Self { a, b };
        if a[0][1] != a[1][0] {
            return Err(TaskError::InvalidFamily("A must be symmetric".into()));
        }
        let (lo, _) = task.eigenvalues();
        if !(lo > 0.0) {
            return Err(TaskError::InvalidFamily("A must be positive definite".into()));
        }
        Ok(task)
    }

    /// Random task with eigenvalues in `[eig_min, eig_max]`, a random
    /// orientation, and optimum uniform in `[-center_scale, center_scale]²`.
    pub fn random<R: Rng>(rng: &mut R, eig_min: f64, eig_max: f64, center_scale: f64) -> Self {
        let l1 = rng.gen_range(eig_min..=eig_max);
        let l2 = rng.gen_range(eig_min..=eig_max);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let (s, c) = angle.sin_cos();
        // R diag(l1, l2) Rᵀ
        let a00 = c * c * l1 + s * s * l2;
        let a11 = s * s * l1 + c * c * l2;
        let a01 = c * s * (l1 - l2);
        Self {
            a: [[a00, a01], [a01, a11]],
            b: [
                rng.gen_range(-center_scale..=center_scale),
                rng.gen_range(-center_scale..=center_scale),
            ],
        }
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let [[a, b], [_, d]] = self.a;
        let mean = 0.5 * (a + d);
        let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        (mean - r, mean + r)
    }

    pub fn value(&self, point: [f64; 2]) -> f64 {
        let d = [point[0] - self.b[0], point[1] - self.b[1]];
        d[0] * (self.a[0][0] * d[0] + self.a[0][1] * d[1]) + d[1] * (self.a[1][0] * d[0] + self.a[1][1] * d[1])
    }

    /// Differentiable loss at a length-2 `point`.
    pub fn loss<'g>(&self, point: Var<'g>) -> Result<Var<'g>, AdError> {
        let g = point.graph();
        let centred = point
            .reshape(&[1, 2])?
            .sub(g.constant(Tensor::matrix(1, 2, self.b.to_vec())?))?;
        let a = g.constant(Tensor::matrix(
            2,
            2,
            vec![self.a[0][0], self.a[0][1], self.a[1][0], self.a[1][1]],
        )?);
        centred.matmul(a)?.matmul_t(centred, false, true)?.reshape(&[])
    }
}
